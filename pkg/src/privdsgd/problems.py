"""Objective functions with stochastic gradient oracles.

Two problem families:

* a convex sensor-estimation problem (per-agent least squares with
  ridge term) whose aggregate optimum has a closed form, and
* a small sigmoid MLP on synthetic two-blob binary classification as the
  smooth non-convex stand-in.

Problems are immutable after generation; stochastic gradients take the
generator by value so concurrent evaluation across agents is safe.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import SingularSystem
from .randomness import RandomSource

MAX_CONDITION_NUMBER = 1e6


class GradientOracle(ABC):
    """Per-agent objective with a noisy first-order oracle."""

    @property
    @abstractmethod
    def d(self) -> int:
        """Dimension of the decision variable."""

    @abstractmethod
    def value(self, x: np.ndarray) -> float: ...

    @abstractmethod
    def full_gradient(self, x: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def stochastic_gradient(self, x: np.ndarray, gen: np.random.Generator,
                            batch: int = 1) -> np.ndarray: ...

    @abstractmethod
    def lipschitz_bound(self) -> float: ...

    @abstractmethod
    def noise_variance_bound(self) -> float:
        """Bound on E||g - grad f||^2 for the batch-1 oracle."""


# ---------------------------------------------------------------------------
# Convex sensor estimation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SensorEstimationProblem(GradientOracle):
    """One agent's share of the decentralized estimation problem.

    f(theta) = (1/n) sum_j ||z_j - M theta||^2 + r ||theta||^2
    """

    measurement_matrix: np.ndarray   # (s, d)
    measurements: np.ndarray         # (n, s)
    regularizer: float

    @property
    def d(self) -> int:
        return self.measurement_matrix.shape[1]

    @property
    def n(self) -> int:
        return self.measurements.shape[0]

    @cached_property
    def hessian(self) -> np.ndarray:
        m_mat = self.measurement_matrix
        return 2.0 * (m_mat.T @ m_mat + self.regularizer * np.eye(self.d))

    @cached_property
    def gradient_offset(self) -> np.ndarray:
        """c with grad f(x) = H x - c."""
        return 2.0 * self.measurement_matrix.T @ self.measurements.mean(axis=0)

    def value(self, x: np.ndarray) -> float:
        resid = self.measurements - self.measurement_matrix @ x
        return float((resid ** 2).sum(axis=1).mean()
                     + self.regularizer * (x @ x))

    def full_gradient(self, x: np.ndarray) -> np.ndarray:
        return self.hessian @ x - self.gradient_offset

    def stochastic_gradient(self, x: np.ndarray, gen: np.random.Generator,
                            batch: int = 1) -> np.ndarray:
        if not 1 <= batch <= self.n:
            raise ValueError(f"batch must be in [1, {self.n}]")
        if batch == self.n:
            # a full batch is a full data pass, equal to the exact gradient
            return self.full_gradient(x)
        idx = gen.integers(0, self.n, size=batch)  # with replacement
        return self.gradient_at_samples(x, idx)

    def gradient_at_samples(self, x: np.ndarray, idx: np.ndarray) -> np.ndarray:
        m_mat = self.measurement_matrix
        resid = m_mat @ x - self.measurements[idx].mean(axis=0)
        return 2.0 * m_mat.T @ resid + 2.0 * self.regularizer * x

    def lipschitz_bound(self) -> float:
        return float(np.linalg.eigvalsh(self.hessian)[-1])

    def noise_variance_bound(self) -> float:
        # exact for the quadratic: the theta-dependent part of g is common
        # to all samples, so the batch-1 variance is 4 E_j ||M^T (z_j - zbar)||^2
        dev = self.measurements - self.measurements.mean(axis=0)
        proj = dev @ self.measurement_matrix  # (n, d)
        return float(4.0 * (proj ** 2).sum(axis=1).mean())


@dataclass(frozen=True)
class SensorNetwork:
    """The m-agent sensor estimation instance plus vectorized kernels."""

    agents: tuple                # of SensorEstimationProblem
    theta_true: np.ndarray       # generation-time ground truth, (d,)

    @property
    def m(self) -> int:
        return len(self.agents)

    @property
    def dim(self) -> int:
        return self.agents[0].d

    @property
    def n_samples(self) -> int:
        return self.agents[0].n

    @property
    def has_optimum(self) -> bool:
        return True

    # dense stacks used by the vectorized runner (cached: agents are frozen)
    @cached_property
    def measurement_stack(self) -> np.ndarray:      # (m, s, d)
        return np.stack([a.measurement_matrix for a in self.agents])

    @cached_property
    def measurements_stack(self) -> np.ndarray:     # (m, n, s)
        return np.stack([a.measurements for a in self.agents])

    @cached_property
    def hessian_stack(self) -> np.ndarray:          # (m, d, d)
        return np.stack([a.hessian for a in self.agents])

    @cached_property
    def offset_stack(self) -> np.ndarray:           # (m, d)
        return np.stack([a.gradient_offset for a in self.agents])

    @cached_property
    def regularizer_vector(self) -> np.ndarray:     # (m,)
        return np.array([a.regularizer for a in self.agents])

    def batch_gradients(self, x: np.ndarray, idx: np.ndarray) -> np.ndarray:
        """Per-agent minibatch gradients.

        x has shape (..., m, d), idx has shape (..., m, b) of sample indices;
        returns gradients of shape (..., m, d).
        """
        m_stack = self.measurement_stack            # (m, s, d)
        z_stack = self.measurements_stack           # (m, n, s)
        agent_ix = np.arange(self.m).reshape((1,) * (idx.ndim - 2) + (self.m, 1))
        z_sel = z_stack[agent_ix, idx].mean(axis=-2)            # (..., m, s)
        pred = np.einsum('msd,...md->...ms', m_stack, x)
        grad = 2.0 * np.einsum('msd,...ms->...md', m_stack, pred - z_sel)
        return grad + (2.0 * self.regularizer_vector)[:, None] * x

    def full_gradients(self, x: np.ndarray) -> np.ndarray:
        """Exact per-agent gradients at per-agent states x (..., m, d)."""
        return (np.einsum('mde,...me->...md', self.hessian_stack, x)
                - self.offset_stack)

    def agent_gradient(self, agent: int, x: np.ndarray,
                       idx: np.ndarray) -> np.ndarray:
        """Minibatch gradient of agent ``agent`` (1-indexed) at x (d,)."""
        return self.agents[agent - 1].gradient_at_samples(x, idx)

    @cached_property
    def mean_hessian(self) -> np.ndarray:
        return self.hessian_stack.mean(axis=0)

    @cached_property
    def mean_offset(self) -> np.ndarray:
        return self.offset_stack.mean(axis=0)

    def grad_objective(self, x: np.ndarray) -> np.ndarray:
        """Gradient of F = (1/m) sum f_i at a common point x (..., d)."""
        return np.einsum('de,...e->...d', self.mean_hessian, x) - self.mean_offset

    def objective(self, x: np.ndarray) -> float:
        return float(np.mean([a.value(x) for a in self.agents]))

    def objective_gap(self, x: np.ndarray, theta_star: np.ndarray) -> np.ndarray:
        """F(x) - F(theta*) via the exact quadratic form; x is (..., d)."""
        delta = x - theta_star
        return 0.5 * np.einsum('...d,de,...e->...', delta,
                               self.mean_hessian, delta)


def generate_sensor_data(m: int, n_i: int, s: int, d: int, rng: RandomSource,
                         regularizer: float = 0.1) -> SensorNetwork:
    """Synthesize the m-agent estimation instance.

    Measurement matrices have U[-1, 1] entries and measurements are
    z_ij = M_i theta_true + w_ij with noise entries w ~ U[0, 1]. Instances
    whose aggregate normal matrix is ill-conditioned (condition number
    above 1e6) are redrawn.
    """
    if min(m, n_i, s, d) < 1:
        raise ValueError("m, n_i, s, d must all be >= 1")
    gen = rng.stream(0, 0, "problem")
    for _ in range(64):
        theta_true = gen.uniform(-1.0, 1.0, size=d)
        mats = gen.uniform(-1.0, 1.0, size=(m, s, d))
        normal = sum(mat.T @ mat for mat in mats) + m * regularizer * np.eye(d)
        if np.linalg.cond(normal) > MAX_CONDITION_NUMBER:
            continue
        noise = gen.uniform(0.0, 1.0, size=(m, n_i, s))
        z = np.einsum('msd,d->ms', mats, theta_true)[:, None, :] + noise
        agents = []
        for i in range(m):
            mat = mats[i].copy()
            mat.setflags(write=False)
            meas = z[i].copy()
            meas.setflags(write=False)
            agents.append(SensorEstimationProblem(
                measurement_matrix=mat, measurements=meas,
                regularizer=float(regularizer)))
        return SensorNetwork(agents=tuple(agents), theta_true=theta_true)
    raise SingularSystem("could not draw a well-conditioned instance")


def closed_form_optimum(network: SensorNetwork) -> np.ndarray:
    """Solve the aggregate normal equations for theta*.

    Raises SingularSystem when the system is singular or the solution does
    not meet the residual contract ||grad F(theta*)|| <= 1e-10.
    """
    h_bar = network.mean_hessian
    c_bar = network.mean_offset
    try:
        theta = np.linalg.solve(h_bar, c_bar)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc
    residual = float(np.linalg.norm(network.grad_objective(theta)))
    if not np.isfinite(residual) or residual > 1e-10:
        raise SingularSystem(f"normal-equation residual {residual:.3e}")
    return theta


def stochastic_gradient(oracle: GradientOracle, x: np.ndarray,
                        batch: int, gen: np.random.Generator) -> np.ndarray:
    """Minibatch gradient of one agent's objective (uniform, with replacement)."""
    return oracle.stochastic_gradient(x, gen, batch=batch)


def estimate_constants(oracle: GradientOracle, sample_count: int,
                       gen: np.random.Generator,
                       scale: float = 1.0) -> tuple[float, float]:
    """(L estimate, sigma_g^2 estimate) for an oracle.

    Quadratic problems report the exact eigenvalue-based constants; other
    problems report the max sampled gradient-difference ratio and the max
    sampled squared oracle deviation over ``sample_count`` probes.
    """
    if sample_count < 2:
        raise ValueError("sample_count must be >= 2")
    if isinstance(oracle, SensorEstimationProblem):
        return oracle.lipschitz_bound(), oracle.noise_variance_bound()
    lip = 0.0
    noise = 0.0
    for _ in range(sample_count):
        x = gen.normal(scale=scale, size=oracle.d)
        y = gen.normal(scale=scale, size=oracle.d)
        dx = float(np.linalg.norm(x - y))
        if dx > 1e-12:
            gdiff = np.linalg.norm(oracle.full_gradient(x) - oracle.full_gradient(y))
            lip = max(lip, float(gdiff) / dx)
        g = oracle.stochastic_gradient(x, gen, batch=1)
        dev = float(np.linalg.norm(g - oracle.full_gradient(x)) ** 2)
        noise = max(noise, dev)
    return lip, noise


# ---------------------------------------------------------------------------
# Smooth non-convex stand-in: tiny sigmoid MLP
# ---------------------------------------------------------------------------

def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class MlpNetwork:
    """m agents training one tiny sigmoid MLP on local two-blob data.

    Architecture is [input_dim, hidden, 1], squared loss on the sigmoid
    output. Sigmoid activations and bounded inputs make every gradient
    component uniformly bounded, hence the objective is smooth.
    """

    features: np.ndarray        # (m, n, input_dim)
    labels: np.ndarray          # (m, n) in {0, 1}
    val_features: np.ndarray    # (n_val, input_dim)
    val_labels: np.ndarray      # (n_val,)
    hidden: int

    @property
    def m(self) -> int:
        return self.features.shape[0]

    @property
    def n_samples(self) -> int:
        return self.features.shape[1]

    @property
    def input_dim(self) -> int:
        return self.features.shape[2]

    @property
    def dim(self) -> int:
        h, i = self.hidden, self.input_dim
        return h * i + h + h + 1

    @property
    def has_optimum(self) -> bool:
        return False

    def _unpack(self, theta: np.ndarray):
        h, i = self.hidden, self.input_dim
        lead = theta.shape[:-1]
        w1 = theta[..., : h * i].reshape(*lead, h, i)
        b1 = theta[..., h * i : h * i + h]
        w2 = theta[..., h * i + h : h * i + 2 * h]
        b2 = theta[..., -1]
        return w1, b1, w2, b2

    def _forward(self, theta: np.ndarray, x: np.ndarray):
        """x has shape (..., b, input_dim) aligned with theta's lead axes."""
        w1, b1, w2, b2 = self._unpack(theta)
        z1 = np.einsum('...hi,...bi->...bh', w1, x) + b1[..., None, :]
        a1 = _sigmoid(z1)
        z2 = np.einsum('...h,...bh->...b', w2, a1) + b2[..., None]
        return _sigmoid(z2), a1

    def _gradient(self, theta: np.ndarray, x: np.ndarray,
                  y: np.ndarray) -> np.ndarray:
        """Backprop of the mean squared loss over the trailing batch axis."""
        w1, b1, w2, b2 = self._unpack(theta)
        p, a1 = self._forward(theta, x)
        batch = x.shape[-2]
        d2 = (2.0 / batch) * (p - y) * p * (1.0 - p)          # (..., b)
        g_w2 = np.einsum('...b,...bh->...h', d2, a1)
        g_b2 = d2.sum(axis=-1)[..., None]
        dz1 = d2[..., None] * w2[..., None, :] * a1 * (1.0 - a1)
        g_w1 = np.einsum('...bh,...bi->...hi', dz1, x)
        g_b1 = dz1.sum(axis=-2)
        lead = theta.shape[:-1]
        return np.concatenate(
            [g_w1.reshape(*lead, -1), g_b1, g_w2, g_b2], axis=-1)

    def _select(self, idx: np.ndarray):
        """Gather per-agent samples; idx is (..., m, b)."""
        agent_ix = np.arange(self.m).reshape((1,) * (idx.ndim - 2) + (self.m, 1))
        return self.features[agent_ix, idx], self.labels[agent_ix, idx]

    def batch_gradients(self, x: np.ndarray, idx: np.ndarray) -> np.ndarray:
        feats, labs = self._select(idx)
        return self._gradient(x, feats, labs)

    def full_gradients(self, x: np.ndarray) -> np.ndarray:
        """Per-agent full-data gradients at per-agent states x (..., m, d)."""
        return self._gradient(x, self.features, self.labels)

    def agent_gradient(self, agent: int, x: np.ndarray,
                       idx: np.ndarray) -> np.ndarray:
        """Minibatch gradient of agent ``agent`` (1-indexed) at x (d,)."""
        return self._gradient(x, self.features[agent - 1, idx],
                              self.labels[agent - 1, idx])

    def grad_objective(self, x: np.ndarray) -> np.ndarray:
        """Gradient of F at a common point x (..., d)."""
        rep = np.broadcast_to(
            x[..., None, :], x.shape[:-1] + (self.m, x.shape[-1]))
        return self.full_gradients(rep).mean(axis=-2)

    def objective(self, x: np.ndarray) -> np.ndarray:
        rep = np.broadcast_to(
            x[..., None, :], x.shape[:-1] + (self.m, x.shape[-1]))
        p, _ = self._forward(rep, self.features)
        return ((p - self.labels) ** 2).mean(axis=(-1, -2))

    def accuracy(self, x: np.ndarray, split: str = "train") -> np.ndarray:
        """Classification accuracy of the model at x (..., d)."""
        if split == "train":
            rep = np.broadcast_to(
                x[..., None, :], x.shape[:-1] + (self.m, x.shape[-1]))
            p, _ = self._forward(rep, self.features)
            hits = (p > 0.5) == (self.labels > 0.5)
            return hits.mean(axis=(-1, -2))
        p, _ = self._forward(x, self.val_features)
        hits = (p > 0.5) == (self.val_labels > 0.5)
        return hits.mean(axis=-1)

    def agent_oracle(self, agent: int) -> "MlpAgentOracle":
        return MlpAgentOracle(network=self, agent=agent)


@dataclass(frozen=True)
class MlpAgentOracle(GradientOracle):
    """GradientOracle view of one agent's share of an MlpNetwork."""

    network: MlpNetwork
    agent: int

    @property
    def d(self) -> int:
        return self.network.dim

    def value(self, x: np.ndarray) -> float:
        p, _ = self.network._forward(x, self.network.features[self.agent - 1])
        return float(((p - self.network.labels[self.agent - 1]) ** 2).mean())

    def full_gradient(self, x: np.ndarray) -> np.ndarray:
        return self.network._gradient(
            x, self.network.features[self.agent - 1],
            self.network.labels[self.agent - 1])

    def stochastic_gradient(self, x: np.ndarray, gen: np.random.Generator,
                            batch: int = 1) -> np.ndarray:
        if batch == self.network.n_samples:
            return self.full_gradient(x)
        idx = gen.integers(0, self.network.n_samples, size=batch)
        return self.network._gradient(
            x, self.network.features[self.agent - 1, idx],
            self.network.labels[self.agent - 1, idx])

    def lipschitz_bound(self) -> float:
        gen = np.random.default_rng(0)
        lip, _ = estimate_constants(self, 256, gen)
        return lip

    def noise_variance_bound(self) -> float:
        gen = np.random.default_rng(0)
        _, noise = estimate_constants(self, 256, gen)
        return noise


def generate_blob_data(m: int, points_per_agent: int, rng: RandomSource,
                       input_dim: int = 10, hidden: int = 8,
                       val_points: int = 400,
                       separation: float = 3.0) -> MlpNetwork:
    """Two-Gaussian-blob binary classification split across agents."""
    gen = rng.stream(0, 0, "problem", extra=(1,))
    direction = np.ones(input_dim) / np.sqrt(input_dim)
    offset = 0.5 * separation * direction

    def draw(count):
        labels = gen.integers(0, 2, size=count)
        signs = np.where(labels > 0, 1.0, -1.0)
        feats = gen.normal(size=(count, input_dim)) + signs[:, None] * offset
        return feats, labels.astype(float)

    feats, labels = draw(m * points_per_agent)
    val_feats, val_labels = draw(val_points)
    return MlpNetwork(
        features=feats.reshape(m, points_per_agent, input_dim),
        labels=labels.reshape(m, points_per_agent),
        val_features=val_feats,
        val_labels=val_labels,
        hidden=hidden,
    )
