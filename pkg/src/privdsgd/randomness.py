"""Per-iteration private randomness: stepsize matrices and mixing columns.

Randomness is organized as counter-based streams keyed by
(seed, agent, iteration, purpose), so draws are reproducible regardless of
execution order. Agent id 0 is reserved for network-wide block draws used
by the vectorized experiment runner; agents proper are 1..m.

Samplers are stateless; a RandomSource is a value type that can be moved
freely between workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

SQRT3 = float(np.sqrt(3.0))

PURPOSE_CODES = {
    "stepsize_mean": 1,
    "stepsize": 2,
    "mixing": 3,
    "gradient": 4,
    "round": 5,
    "init": 6,
    "problem": 7,
    "dp_noise": 8,
    "mmse": 9,
    "attack": 10,
    "verify": 11,
}

SCHEDULE_KINDS = ("paper_default", "constant_mean", "custom")
STEPSIZE_MODES = ("draw_around_mean", "use_directly")


@dataclass(frozen=True)
class RandomSource:
    """Master seed plus deterministic stream derivation.

    Identical (seed, stream id) pairs yield identical draws; distinct
    stream ids yield independent streams.
    """

    seed: int

    def stream(self, agent: int, iteration: int, purpose: str,
               extra: tuple = ()) -> np.random.Generator:
        code = PURPOSE_CODES[purpose]
        key = (int(agent), int(iteration), code) + tuple(int(e) for e in extra)
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=key))

    def round_stream(self, iteration: int, extra: tuple = ()) -> np.random.Generator:
        """Network-wide block stream for one iteration of the runner.

        The runner consumes draws in a fixed order (stepsize means, stepsize
        entries, mixing weights, minibatch indices, noise) with repetition
        and agent as leading block axes, which keeps serial and vectorized
        execution bit-identical.
        """
        return self.stream(0, iteration, "round", extra=extra)


def paper_default_mean(k: int, rho: float) -> float:
    """Mean stepsize (1 - rho/k)/k for a heterogeneity draw rho in [0, 1]."""
    return (1.0 - rho / k) / k


@dataclass(frozen=True)
class StepsizeSchedule:
    """Stepsize law shared by all agents.

    kind:
      paper_default  - mean (1 - rho_i^k/k)/k with rho_i^k ~ U[0,1]
      constant_mean  - fixed mean ``value`` (diagnostic; not square-summable)
      custom         - mean scale/(k + offset)**power
    mode:
      draw_around_mean - the realized mean parametrizes i.i.d. U[0, 2*mean]
                         diagonal entries (default)
      use_directly     - each diagonal entry is its own (1 - rho/k)/k draw
                         (per-coordinate heterogeneity draws)
    """

    kind: str = "paper_default"
    params: Mapping[str, float] = field(default_factory=dict)
    mode: str = "draw_around_mean"

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.mode not in STEPSIZE_MODES:
            raise ValueError(f"unknown stepsize mode {self.mode!r}")
        if self.kind == "constant_mean" and "value" not in self.params:
            raise ValueError("constant_mean schedule needs params['value']")

    def deterministic_mean(self, k: int) -> float:
        """Publicly known expected stepsize mean at iteration k."""
        if self.kind == "paper_default":
            return (1.0 - 0.5 / k) / k
        if self.kind == "constant_mean":
            return float(self.params["value"])
        scale = float(self.params.get("scale", 1.0))
        offset = float(self.params.get("offset", 0.0))
        power = float(self.params.get("power", 1.0))
        return scale / (k + offset) ** power

    def is_randomized_mean(self) -> bool:
        return self.kind == "paper_default"

    def entry_std(self, lambda_bar: float, k: int) -> float:
        """Standard deviation of the diagonal stepsize entries."""
        if self.mode == "draw_around_mean":
            return lambda_bar / SQRT3
        if self.kind == "paper_default":
            # entries are (1 - rho/k)/k with rho ~ U[0,1]
            return 1.0 / (np.sqrt(12.0) * k * k)
        return 0.0


@dataclass(frozen=True)
class StepsizeMatrix:
    """Diagonal stepsize draw for one agent at one iteration."""

    diag: np.ndarray
    mean: float  # law mean of the entries
    agent: int
    iteration: int


@dataclass(frozen=True)
class MixingColumn:
    """Column-stochastic mixing weights owned by one agent."""

    owner: int
    weights: Mapping[int, float]  # receiver agent -> b_{ij}^k


def mean_stepsize(schedule: StepsizeSchedule, agent: int, iteration: int,
                  rng: RandomSource) -> float:
    """Realized mean stepsize of ``agent`` at ``iteration`` (>= 1)."""
    if iteration < 1:
        raise ValueError("iteration must be >= 1")
    if schedule.kind == "paper_default":
        rho = float(rng.stream(agent, iteration, "stepsize_mean").random())
        return paper_default_mean(iteration, rho)
    return schedule.deterministic_mean(iteration)


def sample_stepsize_matrix(lambda_bar: float, d: int, gen: np.random.Generator,
                           agent: int = 0, iteration: int = 0) -> StepsizeMatrix:
    """d i.i.d. uniform draws on [0, 2*lambda_bar]."""
    if lambda_bar < 0.0:
        raise ValueError("lambda_bar must be nonnegative")
    if d < 1:
        raise ValueError("d must be >= 1")
    diag = 2.0 * lambda_bar * gen.random(d)
    diag.setflags(write=False)
    return StepsizeMatrix(diag=diag, mean=float(lambda_bar),
                          agent=agent, iteration=iteration)


def direct_stepsize_matrix(schedule: StepsizeSchedule, d: int, k: int,
                           gen: np.random.Generator, agent: int = 0) -> StepsizeMatrix:
    """Diagonal entries for ``use_directly`` mode.

    For paper_default each entry is its own (1 - rho/k)/k draw; other kinds
    degenerate to a deterministic diagonal at the schedule mean.
    """
    if schedule.kind == "paper_default":
        diag = (1.0 - gen.random(d) / k) / k
    else:
        diag = np.full(d, schedule.deterministic_mean(k))
    diag.setflags(write=False)
    return StepsizeMatrix(diag=diag, mean=schedule.deterministic_mean(k),
                          agent=agent, iteration=k)


def sample_mixing_column(owner: int, neighbors, gen: np.random.Generator) -> MixingColumn:
    """Strictly positive weights over N_owner summing to one.

    Sampled as |N_owner| i.i.d. uniform (0, 1] draws, normalized. Receivers
    are ordered by agent id so the draw layout is deterministic.
    """
    receivers = sorted(neighbors)
    if owner not in receivers:
        raise ValueError(f"owner {owner} must belong to its neighbor set")
    raw = 1.0 - gen.random(len(receivers))  # in (0, 1], strictly positive
    weights = raw / raw.sum()
    return MixingColumn(owner=owner,
                        weights={i: float(w) for i, w in zip(receivers, weights)})


def assemble_mixing_matrix(columns, m: int) -> np.ndarray:
    """Stack MixingColumns into the m-by-m matrix B with B[i-1, j-1] = b_ij."""
    b = np.zeros((m, m))
    for col in columns:
        for receiver, weight in col.weights.items():
            b[receiver - 1, col.owner - 1] = weight
    return b


# ---------------------------------------------------------------------------
# Finite-horizon schedule diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScheduleDiagnostics:
    """Partial-sum report for the stepsize conditions. Advisory only:
    a finite horizon cannot prove the infinite-sum conditions, so the flags
    record non-monotone-convergent trends rather than proofs.
    """

    horizon: int
    sum_mean: np.ndarray        # per-agent sum of realized means
    sum_mean_sq: np.ndarray     # per-agent sum of squared means
    sum_sigma_sq: np.ndarray    # per-agent sum of squared entry stds
    heterogeneity_sum: float    # sum over k of sum_{i != j} |mean_i - mean_j|
    mean_sq_tail_fraction: float
    sigma_sq_tail_fraction: float
    heterogeneity_tail_fraction: float
    flags: tuple

    @property
    def ok(self) -> bool:
        return not self.flags


def _tail_fraction(series_half: float, series_full: float) -> float:
    if series_full <= 0.0:
        return 0.0
    return (series_full - series_half) / series_full


def verify_schedule(schedule: StepsizeSchedule, agents: int, horizon: int,
                    rng: RandomSource) -> ScheduleDiagnostics:
    """Partial sums of the stepsize conditions up to ``horizon``.

    Flags trends incompatible with: mean non-summable, mean and entry-std
    square-summable, pairwise mean heterogeneity absolutely summable.
    """
    if horizon < 10:
        raise ValueError("horizon must be >= 10")
    m = agents
    ks = np.arange(1, horizon + 1, dtype=float)
    if schedule.is_randomized_mean():
        rho = rng.stream(0, 0, "verify").random((horizon, m))
        lb = (1.0 - rho / ks[:, None]) / ks[:, None]
    else:
        lb = np.tile(
            np.array([schedule.deterministic_mean(int(k)) for k in ks])[:, None],
            (1, m),
        )
    if schedule.mode == "draw_around_mean":
        sig = lb / SQRT3
    elif schedule.kind == "paper_default":
        sig = np.tile((1.0 / (np.sqrt(12.0) * ks * ks))[:, None], (1, m))
    else:
        sig = np.zeros_like(lb)

    het_terms = np.zeros(horizon)
    for i in range(m):
        for j in range(i + 1, m):
            het_terms += 2.0 * np.abs(lb[:, i] - lb[:, j])

    half = horizon // 2
    s_mean = lb.sum(axis=0)
    s_mean_sq = (lb ** 2).sum(axis=0)
    s_sig_sq = (sig ** 2).sum(axis=0)
    s_het = float(het_terms.sum())

    mean_increment = float(lb[half:].sum(axis=0).max())
    msq_tail = _tail_fraction(float((lb[:half] ** 2).sum(axis=0).max()),
                              float(s_mean_sq.max()))
    ssq_tail = _tail_fraction(float((sig[:half] ** 2).sum(axis=0).max()),
                              float(s_sig_sq.max()))
    het_tail = _tail_fraction(float(het_terms[:half].sum()), s_het)

    flags = []
    if float(s_mean.min()) <= 0.0 or mean_increment <= 0.01 * float(s_mean.max()):
        flags.append("mean-sum-not-diverging")
    if msq_tail >= 0.25:
        flags.append("mean-square-sum-diverging")
    if ssq_tail >= 0.25:
        flags.append("sigma-square-sum-diverging")
    if het_tail >= 0.25:
        flags.append("heterogeneity-sum-diverging")

    return ScheduleDiagnostics(
        horizon=horizon,
        sum_mean=s_mean,
        sum_mean_sq=s_mean_sq,
        sum_sigma_sq=s_sig_sq,
        heterogeneity_sum=s_het,
        mean_sq_tail_fraction=msq_tail,
        sigma_sq_tail_fraction=ssq_tail,
        heterogeneity_tail_fraction=het_tail,
        flags=tuple(flags),
    )
