import numpy as np
import pytest

from privdsgd.errors import DimensionMismatch
from privdsgd.problems import closed_form_optimum, generate_sensor_data
from privdsgd.randomness import RandomSource, StepsizeSchedule
from privdsgd.simulate import (NetworkState, check_mean_dynamics,
                               conventional_round, private_round,
                               recursion_certificate, run_experiment)
from privdsgd.topology import (build_graph, metropolis_weights,
                               reference_topology, singleton_coupling)

ZERO_SCHEDULE = StepsizeSchedule(kind="constant_mean", params={"value": 0.0})


@pytest.fixture(scope="module")
def setup5():
    coupling = metropolis_weights(reference_topology())
    src = RandomSource(314)
    problem = generate_sensor_data(5, 100, 3, 2, src)
    theta = closed_form_optimum(problem)
    return coupling, problem, theta, src


def _random_state(src, m, d, k=1):
    x = src.stream(0, 0, "init").uniform(-1.0, 1.0, size=(m, d))
    return NetworkState.create(k, x)


def test_zero_stepsizes_give_pure_consensus(setup5):
    coupling, problem, _, src = setup5
    state = _random_state(src, 5, 2)
    res = private_round(state, coupling, ZERO_SCHEDULE, problem, src)
    expected = coupling.entries @ state.x
    np.testing.assert_allclose(res.state.x, expected, atol=1e-15)


def test_single_agent_reduces_to_sgd_step():
    coupling = singleton_coupling()
    src = RandomSource(9)
    problem = generate_sensor_data(1, 20, 2, 3, src)
    state = _random_state(src, 1, 3)
    res = private_round(state, coupling, StepsizeSchedule(), problem, src)
    w = res.witness
    np.testing.assert_allclose(
        res.state.x, state.x - w.lam_diag * w.gradients, atol=1e-15)
    assert res.messages == ()


def test_private_round_matches_hand_expansion_m2_d1():
    coupling = metropolis_weights(build_graph(2, [(1, 2)]))
    src = RandomSource(17)
    problem = generate_sensor_data(2, 30, 1, 1, src)
    state = _random_state(src, 2, 1)
    res = private_round(state, coupling, StepsizeSchedule(), problem, src)
    w = res.witness
    x1, x2 = float(state.x[0, 0]), float(state.x[1, 0])
    u1 = float(w.lam_diag[0, 0] * w.gradients[0, 0])
    u2 = float(w.lam_diag[1, 0] * w.gradients[1, 0])
    b = w.mixing
    expected = np.array([
        [0.5 * x1 + 0.5 * x2 - b[0, 0] * u1 - b[0, 1] * u2],
        [0.5 * x1 + 0.5 * x2 - b[1, 0] * u1 - b[1, 1] * u2],
    ])
    np.testing.assert_allclose(res.state.x, expected, atol=1e-15)


def test_conventional_round_matches_hand_expansion_m2():
    coupling = metropolis_weights(build_graph(2, [(1, 2)]))
    src = RandomSource(23)
    problem = generate_sensor_data(2, 30, 1, 1, src)
    state = _random_state(src, 2, 1)
    nxt = conventional_round(state, coupling, 0.25, problem, src, batch=None)
    grads = problem.full_gradients(state.x)
    expected = 0.5 * (state.x[0] + state.x[1]) - 0.25 * grads
    np.testing.assert_allclose(nxt.x, expected, atol=1e-15)


def test_conventional_zero_stepsize_is_pure_consensus(setup5):
    coupling, problem, _, src = setup5
    state = _random_state(src, 5, 2)
    nxt = conventional_round(state, coupling, 0.0, problem, src)
    np.testing.assert_allclose(nxt.x, coupling.entries @ state.x, atol=1e-15)


def test_mean_dynamics_identity_random_rounds(setup5):
    coupling, problem, _, _ = setup5
    for seed in range(25):
        src = RandomSource(1000 + seed)
        state = _random_state(src, 5, 2, k=1 + seed % 7)
        res = private_round(state, coupling, StepsizeSchedule(), problem, src)
        resid = check_mean_dynamics(state, res.state, res.witness.lam_diag,
                                    res.witness.gradients)
        assert resid <= 1e-10


def test_mean_dynamics_zero_round_keeps_mean(setup5):
    coupling, problem, _, src = setup5
    state = _random_state(src, 5, 2)
    res = private_round(state, coupling, ZERO_SCHEDULE, problem, src)
    assert np.linalg.norm(res.state.mean - state.mean) <= 1e-12


def test_message_count_and_no_self_messages(setup5):
    coupling, problem, _, src = setup5
    state = _random_state(src, 5, 2)
    res = private_round(state, coupling, StepsizeSchedule(), problem, src)
    graph = coupling.graph
    expected = sum(len(graph.neighbors(j)) - 1 for j in range(1, 6))
    assert len(res.messages) == expected
    assert all(j != i for j, i, _ in res.messages)


def test_receiver_sums_exactly_its_messages_and_mutation_changes_state(setup5):
    coupling, problem, _, src = setup5
    state = _random_state(src, 5, 2)
    res = private_round(state, coupling, StepsizeSchedule(), problem, src)
    w = res.witness
    u = w.lam_diag * w.gradients

    def reconstruct(messages):
        x_next = np.zeros_like(state.x)
        for i in range(1, 6):
            own = coupling.w(i, i) * state.x[i - 1] - w.mixing[i - 1, i - 1] * u[i - 1]
            incoming = [v for j, r, v in messages if r == i]
            x_next[i - 1] = own + sum(incoming)
        return x_next

    np.testing.assert_allclose(reconstruct(res.messages), res.state.x,
                               atol=1e-12)
    for idx in range(len(res.messages)):
        tampered = list(res.messages)
        j, i, v = tampered[idx]
        tampered[idx] = (j, i, v + 1e-3)
        bad = reconstruct(tampered)
        assert np.abs(bad[i - 1] - res.state.x[i - 1]).max() > 1e-4


def test_degenerate_config_reduces_to_weighted_baseline():
    # deterministic Lam = lam*I and b_ij = w_ij / column sum: on the complete
    # 2-agent graph the private update collapses to x <- W (x - lam*g)
    coupling = metropolis_weights(build_graph(2, [(1, 2)]))
    src = RandomSource(55)
    problem = generate_sensor_data(2, 25, 1, 1, src)
    theta = closed_form_optimum(problem)
    lam = 0.05
    schedule = StepsizeSchedule(kind="constant_mean", params={"value": lam},
                                mode="use_directly")
    traj = run_experiment(coupling, problem, schedule, algorithm="private",
                          horizon=2, reps=1, rng=src, batch=None,
                          theta_star=theta, record_state=True,
                          fixed_mixing=True)
    x = traj.snapshots[0, 0]
    for k in range(2):
        x = coupling.entries @ (x - lam * problem.full_gradients(x))
        np.testing.assert_allclose(traj.snapshots[0, k + 1], x, atol=1e-12)


def test_zero_horizon_trajectory(setup5):
    coupling, problem, theta, src = setup5
    traj = run_experiment(coupling, problem, StepsizeSchedule(),
                          algorithm="private", horizon=0, reps=2, rng=src,
                          theta_star=theta)
    for series in traj.metrics.values():
        assert series.mean.shape == (1,)


def test_trajectory_lengths_and_nonnegative_norms(setup5):
    coupling, problem, theta, src = setup5
    traj = run_experiment(coupling, problem, StepsizeSchedule(),
                          algorithm="private", horizon=40, reps=3, rng=src,
                          theta_star=theta)
    for name, series in traj.metrics.items():
        assert series.mean.shape == (41,)
        assert series.se.shape == (41,)
        assert np.all(series.mean >= 0.0)
    assert traj.metrics["lambda_bar_mean"].mean[0] == 0.0
    for k in range(1, 41):
        lb = traj.metrics["lambda_bar_mean"].mean[k]
        assert (1.0 - 1.0 / k) / k <= lb <= 1.0 / k


def test_same_seed_replays_byte_identically(setup5):
    coupling, problem, theta, _ = setup5
    runs = [run_experiment(coupling, problem, StepsizeSchedule(),
                           algorithm="private", horizon=60, reps=4,
                           rng=RandomSource(888), theta_star=theta)
            for _ in range(2)]
    for name in runs[0].metrics:
        assert runs[0].metrics[name].mean.tobytes() == \
            runs[1].metrics[name].mean.tobytes()


def test_serial_equals_vectorized_bitwise(setup5):
    coupling, problem, theta, _ = setup5
    kwargs = dict(algorithm="private", horizon=30, reps=3,
                  rng=RandomSource(777), theta_star=theta,
                  record_state=True)
    vec = run_experiment(coupling, problem, StepsizeSchedule(), **kwargs)
    ser = run_experiment(coupling, problem, StepsizeSchedule(),
                         vectorized=False, **kwargs)
    assert vec.snapshots.tobytes() == ser.snapshots.tobytes()
    for name in vec.metrics:
        assert np.array_equal(vec.metrics[name].mean, ser.metrics[name].mean,
                              equal_nan=True)
        assert np.array_equal(vec.metrics[name].se, ser.metrics[name].se,
                              equal_nan=True)


def test_state_mean_cache_invariant(setup5):
    _, _, _, src = setup5
    state = _random_state(src, 5, 2)
    assert state.mean_residual() <= 1e-12


def test_dimension_mismatch_raises(setup5):
    coupling, problem, _, src = setup5
    state = NetworkState.create(1, np.zeros((3, 2)))
    with pytest.raises(DimensionMismatch):
        private_round(state, coupling, StepsizeSchedule(), problem, src)


def test_recursion_certificate_on_converged_run(setup5):
    coupling, problem, theta, _ = setup5
    traj = run_experiment(coupling, problem, StepsizeSchedule(),
                          algorithm="private", horizon=3000, reps=10,
                          rng=RandomSource(5150), theta_star=theta)
    cert = recursion_certificate(traj, theta, coupling.rho)
    assert cert.v_series.shape == (3001, 2)
    assert cert.final_opt_gap < 0.05 * cert.v_series[0, 0]
    assert cert.final_consensus < 1e-4 * cert.v_series[0, 1]
    assert cert.contraction_ok


def test_recursion_certificate_sees_contraction_with_damped_stepsizes(setup5):
    # with stepsizes far below the disagreement scale, the consensus
    # coordinate sits well above its noise floor and must contract at the
    # mixing rate
    coupling, problem, theta, _ = setup5
    damped = StepsizeSchedule(kind="custom", params={"scale": 1e-6})
    traj = run_experiment(coupling, problem, damped, algorithm="private",
                          horizon=60, reps=10, rng=RandomSource(606),
                          theta_star=theta)
    cert = recursion_certificate(traj, theta, coupling.rho)
    assert np.isfinite(cert.transient_ratio_median)
    assert cert.transient_ratio_median <= coupling.rho + 0.1
    assert cert.contraction_ok


def test_recursion_certificate_zero_stepsize_from_consensus(setup5):
    coupling, problem, _, src = setup5
    common = src.stream(0, 0, "init").uniform(-1, 1, size=2)
    state = NetworkState.create(1, np.tile(common, (5, 1)))
    for _ in range(5):
        res = private_round(state, coupling, ZERO_SCHEDULE, problem, src)
        consensus = ((res.state.x - res.state.mean) ** 2).sum()
        assert consensus <= 1e-24
        assert np.linalg.norm(res.state.mean - state.mean) <= 1e-14
        state = res.state
