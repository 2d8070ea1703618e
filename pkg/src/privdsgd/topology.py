"""Agent interaction graphs and doubly-stochastic coupling matrices.

Agents are numbered 1..m to match the config file format; matrix entry
``entries[i-1, j-1]`` is the coupling weight w_ij. Every agent's neighbor
set contains itself (self-loops are implicit). All types are immutable
after construction and safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AssumptionViolated, DisconnectedGraph, InvalidAgentIndex

STOCHASTICITY_TOL = 1e-12


@dataclass(frozen=True)
class AgentGraph:
    """Undirected connected graph over agents 1..m with implicit self-loops."""

    m: int
    edges: frozenset  # frozenset of (i, j) pairs with i < j, no self-loops
    neighbor_sets: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if not self.neighbor_sets:
            nbrs = [{i} for i in range(self.m + 1)]  # index 0 unused
            for i, j in self.edges:
                nbrs[i].add(j)
                nbrs[j].add(i)
            object.__setattr__(
                self, "neighbor_sets", tuple(frozenset(s) for s in nbrs[1:])
            )

    def neighbors(self, i: int) -> frozenset:
        """Neighbor set N_i, including i itself."""
        if not 1 <= i <= self.m:
            raise InvalidAgentIndex(f"agent {i} not in [1..{self.m}]")
        return self.neighbor_sets[i - 1]

    def degree(self, i: int) -> int:
        """Number of neighbors of i excluding i itself."""
        return len(self.neighbors(i)) - 1

    def adjacency(self) -> np.ndarray:
        """0/1 adjacency matrix including the diagonal (self-loops)."""
        a = np.eye(self.m)
        for i, j in self.edges:
            a[i - 1, j - 1] = 1.0
            a[j - 1, i - 1] = 1.0
        return a


def build_graph(m: int, edge_list) -> AgentGraph:
    """Validate and build the interaction graph.

    Accepts 1-indexed edges as any iterable of pairs; self-loops are added
    implicitly and duplicate/reversed edges are merged. Raises
    InvalidAgentIndex for endpoints outside [1..m] and DisconnectedGraph
    when the graph is not connected.
    """
    if m < 2:
        raise InvalidAgentIndex(f"need at least 2 agents, got m={m}")
    edges = set()
    for pair in edge_list:
        i, j = int(pair[0]), int(pair[1])
        if not (1 <= i <= m and 1 <= j <= m):
            raise InvalidAgentIndex(f"edge ({i},{j}) outside [1..{m}]")
        if i == j:
            continue  # self-loops are implicit
        edges.add((min(i, j), max(i, j)))
    graph = AgentGraph(m=m, edges=frozenset(edges))

    # connectivity by breadth-first search from agent 1
    seen = {1}
    frontier = [1]
    while frontier:
        nxt = []
        for u in frontier:
            for v in graph.neighbors(u):
                if v not in seen:
                    seen.add(v)
                    nxt.append(v)
        frontier = nxt
    if len(seen) != m:
        missing = sorted(set(range(1, m + 1)) - seen)
        raise DisconnectedGraph(f"agents {missing} unreachable from agent 1")
    return graph


def reference_topology() -> AgentGraph:
    """The 5-agent reference network: a 5-cycle plus the chord (1, 3)."""
    return build_graph(5, [(1, 2), (2, 3), (3, 4), (4, 5), (5, 1), (1, 3)])


def _deviation_matrix(entries: np.ndarray) -> np.ndarray:
    m = entries.shape[0]
    return entries - np.full((m, m), 1.0 / m)


def _spectral_norm_power(mat: np.ndarray, tol: float = 1e-14,
                         max_iter: int = 50_000) -> float:
    """Largest singular value of ``mat`` by power iteration on matᵀmat."""
    m = mat.shape[0]
    if m == 1:
        return abs(float(mat[0, 0]))
    # deterministic, generically non-orthogonal start
    v = np.linspace(1.0, 2.0, m)
    v /= np.linalg.norm(v)
    prev = np.inf
    est = 0.0
    for _ in range(max_iter):
        w = mat.T @ (mat @ v)
        norm_w = np.linalg.norm(w)
        if norm_w == 0.0:
            return 0.0
        est = float(v @ w)  # Rayleigh quotient for matᵀmat
        v = w / norm_w
        if abs(est - prev) <= tol * max(1.0, abs(est)):
            break
        prev = est
    return float(np.sqrt(max(est, 0.0)))


@dataclass(frozen=True)
class CouplingMatrix:
    """Doubly-stochastic coupling weights over an AgentGraph.

    ``rho`` caches the spectral radius of W - (1/m)*ones, which must be < 1.
    """

    graph: AgentGraph
    entries: np.ndarray
    rho: float

    @classmethod
    def build(cls, graph: AgentGraph, entries: np.ndarray) -> "CouplingMatrix":
        entries = np.asarray(entries, dtype=float)
        m = graph.m
        if entries.shape != (m, m):
            raise AssumptionViolated(np.nan, f"expected {(m, m)} matrix")
        row = entries.sum(axis=1)
        col = entries.sum(axis=0)
        if np.max(np.abs(row - 1.0)) > STOCHASTICITY_TOL:
            raise AssumptionViolated(np.nan, "row sums deviate from 1")
        if np.max(np.abs(col - 1.0)) > STOCHASTICITY_TOL:
            raise AssumptionViolated(np.nan, "column sums deviate from 1")
        if np.any(entries < 0.0):
            raise AssumptionViolated(np.nan, "negative coupling weight")
        for i in range(1, m + 1):
            for j in range(1, m + 1):
                positive = entries[i - 1, j - 1] > 0.0
                if positive != (j in graph.neighbors(i)):
                    raise AssumptionViolated(
                        np.nan, f"support mismatch at w[{i},{j}]"
                    )
        rho = spectral_radius(entries)
        mat = entries.copy()
        mat.setflags(write=False)
        return cls(graph=graph, entries=mat, rho=rho)

    def w(self, i: int, j: int) -> float:
        """Coupling weight w_ij for 1-indexed agents."""
        return float(self.entries[i - 1, j - 1])


def spectral_radius(entries: np.ndarray) -> float:
    """Spectral radius of W - (1/m)*ones*onesᵀ, computed by power iteration.

    Raises AssumptionViolated when the result is not < 1 - 1e-12, since such
    a matrix cannot drive consensus.
    """
    entries = np.asarray(entries, dtype=float)
    rho = _spectral_norm_power(_deviation_matrix(entries))
    if rho >= 1.0 - 1e-12:
        raise AssumptionViolated(rho)
    return rho


def metropolis_weights(graph: AgentGraph) -> CouplingMatrix:
    """Metropolis-Hastings coupling weights for a connected graph.

    w_ij = 1 / (1 + max(deg_i, deg_j)) for neighboring i != j, and
    w_ii absorbs the remainder so each row sums to one. The result is
    symmetric, hence doubly stochastic, with rho < 1 on connected graphs.
    """
    m = graph.m
    w = np.zeros((m, m))
    for i, j in graph.edges:
        w[i - 1, j - 1] = 1.0 / (1.0 + max(graph.degree(i), graph.degree(j)))
        w[j - 1, i - 1] = w[i - 1, j - 1]
    for i in range(m):
        w[i, i] = 1.0 - w[i].sum()
    return CouplingMatrix.build(graph, w)


def coupling_to_csv(coupling: CouplingMatrix) -> str:
    """Row-major CSV of the coupling entries at full precision."""
    lines = [
        ",".join(repr(float(x)) for x in row) for row in coupling.entries
    ]
    return "\n".join(lines) + "\n"


def singleton_coupling() -> CouplingMatrix:
    """The trivial m=1 coupling (W = [1]); used by degenerate test runs."""
    graph = AgentGraph(m=1, edges=frozenset())
    mat = np.ones((1, 1))
    mat.setflags(write=False)
    return CouplingMatrix(graph=graph, entries=mat, rho=0.0)
