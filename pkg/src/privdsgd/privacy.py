"""Information-theoretic privacy bounds for multiplicative stepsize noise.

Scalar channel model: a private gradient value g uniform on [-kappa, kappa]
is observed only through the product y = lambda * g, with the stepsize
lambda uniform on [0, 2*lambda_bar] and independent of g. The conditional
differential entropy h(g | y) lower-bounds every estimator's mean squared
error via e^{2h}/(2*pi*e). Vector gradients are d independent scalar
channels, so everything here is scalar.

All entropies are in nats. The closed forms assume 2*lambda_bar <= kappa;
laws outside that regime are rejected rather than extrapolated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .errors import DegenerateLaw, QuadratureFailure

TWO_PI_E = 2.0 * np.pi * np.e
QUAD_ERROR_LIMIT = 1e-6
_SUBSTITUTION_CUTOFF = 40.0  # e^{-u} tail beyond u=40 is < 1e-17


@dataclass(frozen=True)
class ObfuscationLaw:
    """Uniform gradient prior on [-kappa, kappa], stepsize on [0, 2*lambda_bar]."""

    lambda_bar: float
    kappa: float

    def __post_init__(self):
        if self.kappa <= 0.0:
            raise ValueError("kappa must be positive")
        if self.lambda_bar < 0.0:
            raise ValueError("lambda_bar must be nonnegative")
        if 2.0 * self.lambda_bar > self.kappa * (1.0 + 1e-12):
            raise ValueError(
                "law requires 2*lambda_bar <= kappa; "
                f"got lambda_bar={self.lambda_bar}, kappa={self.kappa}")

    @property
    def support_halfwidth(self) -> float:
        """Half-width 2*lambda_bar*kappa of the product variable's support."""
        return 2.0 * self.lambda_bar * self.kappa


@dataclass(frozen=True)
class PrivacyBound:
    """Theorem-level privacy quantities for one law."""

    joint_entropy: float        # h(g, lambda*g), nats
    product_entropy: float      # c = h(lambda*g), nats
    conditional_entropy: float  # theta = h(g | lambda*g), nats
    mmse_lower: float           # e^{2*theta} / (2*pi*e)


def joint_entropy(law: ObfuscationLaw) -> float:
    """Joint differential entropy h(g, lambda*g) = ln(4*lambda_bar*kappa^2) - 1."""
    if law.lambda_bar == 0.0:
        raise DegenerateLaw(
            "joint entropy diverges to -inf at lambda_bar = 0; "
            "use conditional_entropy, which takes the lambda_bar -> 0 limit")
    return float(np.log(4.0 * law.lambda_bar * law.kappa ** 2) - 1.0)


def product_density(x, law: ObfuscationLaw):
    """Density of the product y = lambda*g at x.

    p(x) = ln(2*lambda_bar*kappa/|x|) / (4*lambda_bar*kappa) on the open
    support, 0 outside, +inf at the (integrable) singular point x = 0.
    Accepts scalars or arrays.
    """
    if law.lambda_bar == 0.0:
        raise ValueError("product density undefined at lambda_bar = 0")
    a = law.support_halfwidth
    x = np.asarray(x, dtype=float)
    absx = np.abs(x)
    out = np.zeros_like(absx)
    inside = (absx > 0.0) & (absx < a)
    out[inside] = np.log(a / absx[inside]) / (2.0 * a)
    out[absx == 0.0] = np.inf
    if out.ndim == 0:
        return float(out)
    return out


def product_entropy(law: ObfuscationLaw) -> float:
    """c(lambda_bar, kappa) = -2 * int_0^{2*lambda_bar*kappa} p ln p dx.

    The endpoint singularity at x -> 0 is removed by the substitution
    u = ln(2*lambda_bar*kappa / x), which maps the integrand onto
    u * e^{-u} * (ln(2a) - ln u) / ... decay on [0, inf); the tail is cut
    at u = 40 where it is below 1e-17.
    """
    if law.lambda_bar == 0.0:
        raise DegenerateLaw("product entropy diverges at lambda_bar = 0")
    a = law.support_halfwidth
    log2a = np.log(2.0 * a)

    def integrand(u):
        return u * np.exp(-u) * (log2a - np.log(u))

    value, err = integrate.quad(integrand, 0.0, _SUBSTITUTION_CUTOFF,
                                epsabs=1e-12, epsrel=1e-12, limit=200)
    if err > QUAD_ERROR_LIMIT:
        raise QuadratureFailure(f"entropy quadrature error estimate {err:.3e}")
    return float(value)


def conditional_entropy(law: ObfuscationLaw) -> float:
    """theta(lambda_bar, kappa) = joint entropy minus product entropy.

    At lambda_bar = 0 the closed form is 0*inf-indeterminate termwise, so
    the value is taken as the numerical limit along lambda_bar = 10^-1..10^-8
    (clipped into the admissible regime), with a stabilization check across
    the last evaluations.
    """
    if law.lambda_bar > 0.0:
        return joint_entropy(law) - product_entropy(law)
    vals = []
    for t in range(1, 9):
        lb = min(10.0 ** (-t), law.kappa / 2.0)
        small = ObfuscationLaw(lambda_bar=lb, kappa=law.kappa)
        vals.append(joint_entropy(small) - product_entropy(small))
    tail = np.array(vals[-4:])
    if np.max(np.abs(tail - tail[-1])) > 1e-6:
        raise QuadratureFailure(
            "lambda_bar -> 0 limit of the conditional entropy did not stabilize")
    return float(tail.mean())


def mmse_lower_bound(law: ObfuscationLaw) -> float:
    """Minimum achievable E[(g - ghat)^2] for any estimator: e^{2*theta}/(2*pi*e)."""
    return float(np.exp(2.0 * conditional_entropy(law)) / TWO_PI_E)


def evaluate_privacy(law: ObfuscationLaw) -> PrivacyBound:
    """All Theorem-level quantities for one law (lambda_bar > 0)."""
    joint = joint_entropy(law)
    prod = product_entropy(law)
    theta = joint - prod
    return PrivacyBound(joint_entropy=joint, product_entropy=prod,
                        conditional_entropy=theta,
                        mmse_lower=float(np.exp(2.0 * theta) / TWO_PI_E))


# ---------------------------------------------------------------------------
# Monte Carlo oracles
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MonteCarloEstimate:
    value: float
    stderr: float
    samples: int


def monte_carlo_product_entropy(law: ObfuscationLaw, samples: int,
                                gen: np.random.Generator) -> MonteCarloEstimate:
    """Resubstitution entropy estimate -mean(ln p(y)) over sampled products.

    Independent of the quadrature path: it samples the generative model and
    evaluates the known density, so it serves as the oracle for
    product_entropy.
    """
    g = gen.uniform(-law.kappa, law.kappa, size=samples)
    lam = gen.uniform(0.0, 2.0 * law.lambda_bar, size=samples)
    y = lam * g
    dens = product_density(y, law)
    log_dens = np.log(dens)
    value = -log_dens.mean()
    stderr = log_dens.std(ddof=1) / np.sqrt(samples)
    return MonteCarloEstimate(value=float(value), stderr=float(stderr),
                              samples=samples)


def monte_carlo_mmse(law: ObfuscationLaw, samples: int, bins: int,
                     gen: np.random.Generator,
                     deterministic_stepsize: bool = False) -> MonteCarloEstimate:
    """Empirical MSE of the binned conditional-mean estimator of g from y.

    Bins are equal-probability in y (quantile edges), which stabilizes
    per-bin counts. The conditional mean is the MMSE-optimal estimator, so
    up to binning and sampling error the result dominates mmse_lower_bound.
    ``deterministic_stepsize`` is a diagnostic mode with lambda fixed at
    lambda_bar (no obfuscation): g is then recoverable as y / lambda_bar.
    """
    if samples < 10 ** 5:
        raise ValueError("samples must be >= 1e5")
    if bins < 50:
        raise ValueError("bins must be >= 50")
    g = gen.uniform(-law.kappa, law.kappa, size=samples)
    if deterministic_stepsize:
        lam = np.full(samples, law.lambda_bar)
    else:
        lam = gen.uniform(0.0, 2.0 * law.lambda_bar, size=samples)
    y = lam * g

    if np.ptp(y) == 0.0:
        # lambda_bar = 0: the observation carries nothing; the conditional
        # mean is the prior mean
        resid_sq = (g - g.mean()) ** 2
    else:
        edges = np.quantile(y, np.linspace(0.0, 1.0, bins + 1))
        inner = np.unique(edges[1:-1])
        which = np.searchsorted(inner, y, side="right")
        counts = np.bincount(which, minlength=inner.size + 1)
        sums = np.bincount(which, weights=g, minlength=inner.size + 1)
        cond_mean = sums / np.maximum(counts, 1)
        resid_sq = (g - cond_mean[which]) ** 2
    return MonteCarloEstimate(
        value=float(resid_sq.mean()),
        stderr=float(resid_sq.std(ddof=1) / np.sqrt(samples)),
        samples=samples,
    )
