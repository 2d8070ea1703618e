"""Adversary observation models and gradient-inference attacks.

The eavesdropper sees every transmitted message plus the public coupling
matrix and public schedule means, but never an agent's own-loop message
v_jj, its realized stepsize draws, its mixing coefficients, or its internal
state. An honest-but-curious agent additionally holds its own state and
draws but only receives messages addressed to it.

Attack estimators in this module consume observation views built from the
message log; ground truth enters only in the separate scoring step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MissingMessages, ZeroStepsize
from .randomness import StepsizeSchedule
from .simulate import MessageLog
from .topology import CouplingMatrix


@dataclass(frozen=True)
class EavesdropperView:
    """All transmitted v_ij (i != j) indexed densely, plus public knowledge."""

    coupling: CouplingMatrix
    horizon: int
    dim: int
    pair_sender: np.ndarray     # (P,) 1-indexed sender per message slot
    pair_receiver: np.ndarray   # (P,) 1-indexed receiver per message slot
    messages: np.ndarray        # (K, P, d)
    schedule_mean: np.ndarray   # (K,) public deterministic stepsize mean

    def outgoing_slots(self, j: int) -> np.ndarray:
        return np.nonzero(self.pair_sender == j)[0]


@dataclass(frozen=True)
class CuriousAgentView:
    """Messages addressed to one participating agent, plus its own internals."""

    agent: int
    coupling: CouplingMatrix
    horizon: int
    dim: int
    pair_sender: np.ndarray
    messages: np.ndarray        # (K, P_in, d), only v_ij with i == agent
    own_states: np.ndarray      # (K+1, d)
    schedule_mean: np.ndarray


def _schedule_mean_series(schedule: StepsizeSchedule, horizon: int) -> np.ndarray:
    return np.array([schedule.deterministic_mean(k)
                     for k in range(1, horizon + 1)])


def _dense_messages(log: MessageLog, coupling: CouplingMatrix, horizon: int,
                    rep: int):
    graph = coupling.graph
    pairs = [(j, i) for j in range(1, graph.m + 1)
             for i in sorted(graph.neighbors(j)) if i != j]
    slot = {pair: p for p, pair in enumerate(pairs)}
    reps, iters, senders, receivers, payload = log.arrays()
    keep = reps == rep
    dense = np.full((horizon, len(pairs), log.dim), np.nan)
    for k, j, i, v in zip(iters[keep], senders[keep], receivers[keep],
                          payload[keep]):
        if 1 <= k <= horizon:
            dense[k - 1, slot[(j, i)]] = v
    if np.isnan(dense).any():
        raise MissingMessages("message log does not cover every edge/round")
    send = np.array([j for j, _ in pairs])
    recv = np.array([i for _, i in pairs])
    return send, recv, dense


def eavesdropper_view(log: MessageLog, coupling: CouplingMatrix,
                      schedule: StepsizeSchedule, horizon: int,
                      rep: int = 0) -> EavesdropperView:
    send, recv, dense = _dense_messages(log, coupling, horizon, rep)
    return EavesdropperView(
        coupling=coupling, horizon=horizon, dim=log.dim,
        pair_sender=send, pair_receiver=recv, messages=dense,
        schedule_mean=_schedule_mean_series(schedule, horizon))


def curious_agent_view(log: MessageLog, coupling: CouplingMatrix,
                       schedule: StepsizeSchedule, horizon: int, agent: int,
                       own_states: np.ndarray, rep: int = 0) -> CuriousAgentView:
    send, recv, dense = _dense_messages(log, coupling, horizon, rep)
    mine = recv == agent
    return CuriousAgentView(
        agent=agent, coupling=coupling, horizon=horizon, dim=log.dim,
        pair_sender=send[mine], messages=dense[:, mine, :],
        own_states=np.asarray(own_states, dtype=float),
        schedule_mean=_schedule_mean_series(schedule, horizon))


def residual_observable(view: EavesdropperView, j: int, k: int) -> np.ndarray:
    """Sum of agent j's outgoing messages at round k, as the adversary sees it.

    Equals (1 - w_jj) x_j^k - (1 - b_jj^k) Lam_j^k g_j^k by the update's
    algebra; j's own-loop term v_jj is never transmitted, which is exactly
    what leaves b_jj and Lam_j free to obfuscate the gradient.
    """
    slots = view.outgoing_slots(j)
    if not 1 <= k <= view.horizon:
        raise MissingMessages(f"round {k} outside the logged horizon")
    if slots.size == 0:
        return np.zeros(view.dim)
    return view.messages[k - 1, slots].sum(axis=0)


@dataclass(frozen=True)
class AttackReport:
    """Inference quality of a gradient attack, scored against ground truth."""

    sq_err: np.ndarray           # (K, m) squared gradient-vector errors
    mse_series: np.ndarray       # (K,) mean over agents
    per_entry_mse: float         # mean squared error per gradient entry
    per_entry_se: float          # Monte Carlo standard error of that mean
    theta_err: np.ndarray | None = None   # (K,) ||theta_hat_k - theta*||^2

    @property
    def overall_mse(self) -> float:
        return float(self.mse_series.mean())

    @property
    def final_theta_error(self) -> float | None:
        return None if self.theta_err is None else float(self.theta_err[-1])


def attack_conventional(states: np.ndarray, coupling: CouplingMatrix,
                        stepsizes: np.ndarray) -> np.ndarray:
    """Exact gradient reconstruction against the conventional baseline.

    The baseline shares states in full, and W and the stepsize sequence are
    public, so g_i^k = (sum_j w_ij x_j^k - x_i^{k+1}) / lam^k. ``states`` is
    the shared (K+1, m, d) series; returns (K, m, d) gradient estimates.
    """
    stepsizes = np.asarray(stepsizes, dtype=float)
    if np.any(stepsizes == 0.0):
        raise ZeroStepsize("cannot invert a zero public stepsize")
    mixed = np.einsum('ij,kjd->kid', coupling.entries, states[:-1])
    return (mixed - states[1:]) / stepsizes[:, None, None]


def attack_private(view: EavesdropperView,
                   side_states: np.ndarray | None = None,
                   side_lambda_bars: np.ndarray | None = None) -> np.ndarray:
    """Mean-inversion estimate of every agent's gradient from its residual.

    Unknown quantities are replaced by their public expectations: Lam_j^k by
    the schedule mean (or granted side-information means), b_jj^k by the
    mixing sampler's mean 1/|N_j|, and x_j^k by granted side information or,
    failing that, by the average of j's outgoing messages rescaled by the
    known coupling weights (exact only when the gradient term vanishes).
    Returns (K, m, d) estimates.
    """
    graph = view.coupling.graph
    m, kk, d = graph.m, view.horizon, view.dim
    w_diag = np.array([view.coupling.w(j, j) for j in range(1, m + 1)])
    b_mean = np.array([1.0 / len(graph.neighbors(j)) for j in range(1, m + 1)])

    residuals = np.zeros((kk, m, d))
    for j in range(1, m + 1):
        slots = view.outgoing_slots(j)
        residuals[:, j - 1] = view.messages[:, slots].sum(axis=1)

    if side_states is not None:
        x_hat = np.asarray(side_states, dtype=float)[:kk]
    else:
        x_hat = np.zeros((kk, m, d))
        for j in range(1, m + 1):
            slots = view.outgoing_slots(j)
            w_out = np.array([view.coupling.w(int(r), j)
                              for r in view.pair_receiver[slots]])
            x_hat[:, j - 1] = (view.messages[:, slots]
                               / w_out[None, :, None]).mean(axis=1)

    if side_lambda_bars is not None:
        lam_bar = np.asarray(side_lambda_bars, dtype=float)[:kk]
    else:
        lam_bar = np.broadcast_to(view.schedule_mean[:, None], (kk, m))
    denom = (1.0 - b_mean)[None, :] * lam_bar
    return ((1.0 - w_diag)[None, :, None] * x_hat - residuals) / denom[..., None]


def score_gradient_attack(estimates: np.ndarray, true_gradients: np.ndarray,
                          theta_err: np.ndarray | None = None) -> AttackReport:
    """Score estimates (K, m, d) against the experimenter's ground truth."""
    diff = estimates - true_gradients
    sq = (diff ** 2).sum(axis=-1)
    entrywise = (diff ** 2).ravel()
    return AttackReport(
        sq_err=sq,
        mse_series=sq.mean(axis=1),
        per_entry_mse=float(entrywise.mean()),
        per_entry_se=float(entrywise.std(ddof=1) / np.sqrt(entrywise.size)),
        theta_err=theta_err,
    )


def infer_theta_series(estimates: np.ndarray, states_used: np.ndarray,
                       hessians: np.ndarray, theta_star: np.ndarray) -> np.ndarray:
    """Least-squares parameter inference from recovered sensor gradients.

    The sensor gradient is linear in the secret: g_i^k = H_i x_i^k - c_i
    with public H_i, so each recovered gradient yields an unbiased estimate
    of c_i. Cumulative averaging over rounds gives theta_hat_k solving
    mean_i(H_i) theta = mean_i(c_hat_i); returns ||theta_hat_k - theta*||^2.
    """
    kk = estimates.shape[0]
    c_hat = (np.einsum('mde,kme->kmd', hessians, states_used[:kk])
             - estimates)
    c_cum = np.cumsum(c_hat, axis=0) / np.arange(1, kk + 1)[:, None, None]
    h_mean = hessians.mean(axis=0)
    theta_hat = np.linalg.solve(
        h_mean[None, :, :], c_cum.mean(axis=1)[..., None])[..., 0]
    return ((theta_hat - theta_star) ** 2).sum(axis=-1)
