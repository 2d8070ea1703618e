import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from privdsgd.errors import (AssumptionViolated, DisconnectedGraph,
                             InvalidAgentIndex)
from privdsgd.topology import (CouplingMatrix, build_graph, coupling_to_csv,
                               metropolis_weights, reference_topology,
                               spectral_radius)

STOCH_TOL = 1e-12


def test_smallest_connected_graph():
    g = build_graph(2, [(1, 2)])
    assert g.neighbors(1) == frozenset({1, 2})
    assert g.neighbors(2) == frozenset({1, 2})


def test_reference_topology_is_five_agent_ring_plus_chord():
    g = reference_topology()
    assert g.m == 5
    assert 3 in g.neighbors(1)  # the chord
    assert g.degree(2) == 2


def test_disconnected_graph_rejected():
    with pytest.raises(DisconnectedGraph):
        build_graph(3, [(1, 2)])


def test_bad_edge_endpoint_rejected():
    with pytest.raises(InvalidAgentIndex):
        build_graph(3, [(1, 4)])


def test_fewer_than_two_agents_rejected():
    with pytest.raises(InvalidAgentIndex):
        build_graph(1, [])


def test_metropolis_complete_two_agents():
    w = metropolis_weights(build_graph(2, [(1, 2)]))
    np.testing.assert_allclose(w.entries, [[0.5, 0.5], [0.5, 0.5]], atol=0)
    assert w.rho == pytest.approx(0.0, abs=1e-12)


def test_metropolis_path_three_agents():
    # hand-applied Metropolis rule on the path 1-2-3
    w = metropolis_weights(build_graph(3, [(1, 2), (2, 3)]))
    expected = np.array([
        [2 / 3, 1 / 3, 0.0],
        [1 / 3, 1 / 3, 1 / 3],
        [0.0, 1 / 3, 2 / 3],
    ])
    np.testing.assert_allclose(w.entries, expected, atol=1e-15)
    assert abs(w.entries.sum(axis=0) - 1).max() < STOCH_TOL
    assert abs(w.entries.sum(axis=1) - 1).max() < STOCH_TOL


def test_ring5_rho_matches_dense_eigensolve():
    g = build_graph(5, [(1, 2), (2, 3), (3, 4), (4, 5), (5, 1)])
    w = metropolis_weights(g)
    dev = w.entries - np.full((5, 5), 0.2)
    oracle = np.max(np.abs(np.linalg.eigvalsh(dev)))
    assert w.rho == pytest.approx(oracle, abs=1e-8)


def test_spectral_radius_raises_at_one():
    with pytest.raises(AssumptionViolated):
        spectral_radius(np.eye(3))


def test_support_mismatch_rejected():
    g = build_graph(3, [(1, 2), (2, 3)])
    with pytest.raises(AssumptionViolated):
        CouplingMatrix.build(g, np.eye(3))


def test_csv_export_full_precision():
    w = metropolis_weights(reference_topology())
    text = coupling_to_csv(w)
    parsed = np.array([[float(x) for x in line.split(",")]
                       for line in text.strip().splitlines()])
    assert np.array_equal(parsed, w.entries)


@st.composite
def connected_graphs(draw):
    m = draw(st.integers(2, 12))
    edges = [(draw(st.integers(1, i - 1)), i) for i in range(2, m + 1)]
    extra = draw(st.lists(
        st.tuples(st.integers(1, m), st.integers(1, m)), max_size=12))
    edges += [e for e in extra if e[0] != e[1]]
    return m, edges


@settings(max_examples=60, deadline=None)
@given(connected_graphs())
def test_metropolis_properties_on_random_connected_graphs(spec):
    m, edges = spec
    w = metropolis_weights(build_graph(m, edges))
    assert np.abs(w.entries.sum(axis=0) - 1.0).max() <= STOCH_TOL
    assert np.abs(w.entries.sum(axis=1) - 1.0).max() <= STOCH_TOL
    assert all(w.w(i, i) > 0 for i in range(1, m + 1))
    assert w.rho < 1.0
    # dense-eigensolve oracle for the power-iteration value
    dev = w.entries - np.full((m, m), 1.0 / m)
    oracle = np.max(np.abs(np.linalg.eigvalsh(dev)))
    assert w.rho == pytest.approx(oracle, abs=1e-8)


@settings(max_examples=25, deadline=None)
@given(connected_graphs(), st.integers(0, 2 ** 32 - 1))
def test_consensus_subspace_invariant(spec, seed):
    m, edges = spec
    w = metropolis_weights(build_graph(m, edges))
    assert np.abs(w.entries @ np.ones(m) - 1.0).max() <= STOCH_TOL
    c = np.random.default_rng(seed).normal(size=3)
    stacked = np.kron(np.ones(m), c)
    w_hat = np.kron(w.entries, np.eye(3))
    assert np.linalg.norm(w_hat @ stacked - stacked) <= STOCH_TOL * m
