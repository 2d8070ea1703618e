import numpy as np
import pytest

from privdsgd.randomness import (RandomSource, StepsizeSchedule,
                                 direct_stepsize_matrix, mean_stepsize,
                                 paper_default_mean, sample_mixing_column,
                                 sample_stepsize_matrix, verify_schedule,
                                 assemble_mixing_matrix)

SQRT3 = np.sqrt(3.0)


def test_paper_default_mean_endpoints():
    assert paper_default_mean(1, 1.0) == 0.0
    assert paper_default_mean(1, 0.0) == 1.0


def test_mean_stepsize_range_and_determinism():
    src = RandomSource(7)
    sched = StepsizeSchedule()
    for k in (1, 2, 17, 1000):
        v = mean_stepsize(sched, agent=3, iteration=k, rng=src)
        assert (1.0 - 1.0 / k) / k <= v <= 1.0 / k
        assert v == mean_stepsize(sched, agent=3, iteration=k, rng=src)
    # distinct agents see distinct draws
    assert mean_stepsize(sched, 1, 5, src) != mean_stepsize(sched, 2, 5, src)


def test_partial_sums_to_1e5():
    # direct-summation oracle: realized means sum like log k, squares converge
    src = RandomSource(11)
    ks = np.arange(1, 10 ** 5 + 1, dtype=float)
    rho = src.stream(1, 0, "verify").random(10 ** 5)
    lb = (1.0 - rho / ks) / ks
    s1 = np.cumsum(lb)
    s2 = np.cumsum(lb ** 2)
    # increment of the mean sum over the last decade is ~ ln(10)
    increment = s1[-1] - s1[10 ** 4 - 1]
    assert 2.25 <= increment <= 2.35
    # square sum has nearly converged by 1e4
    assert s2[-1] - s2[10 ** 4 - 1] < 2e-4
    assert s2[-1] < 1.7


def test_stepsize_matrix_zero_mean_is_zero():
    mat = sample_stepsize_matrix(0.0, 8, np.random.default_rng(0))
    assert np.all(mat.diag == 0.0)


def test_stepsize_matrix_law_of_large_numbers():
    d = 10 ** 6
    mat = sample_stepsize_matrix(0.5, d, np.random.default_rng(3))
    assert np.all(mat.diag >= 0.0) and np.all(mat.diag <= 1.0)
    # documented tolerance: 3 sigma / sqrt(d) for the mean, 1% for the std
    assert abs(mat.diag.mean() - 0.5) <= 3.0 * (0.5 / SQRT3) / np.sqrt(d)
    assert abs(mat.diag.std() - 0.5 / SQRT3) <= 0.01 * (0.5 / SQRT3)


def test_stepsize_matrix_byte_identical_replay():
    src = RandomSource(99)
    a = sample_stepsize_matrix(0.5, 4, src.stream(2, 9, "stepsize"))
    b = sample_stepsize_matrix(0.5, 4, src.stream(2, 9, "stepsize"))
    assert a.diag.tobytes() == b.diag.tobytes()


def test_mixing_single_neighbor():
    col = sample_mixing_column(4, {4}, np.random.default_rng(0))
    assert col.weights == {4: 1.0}


def test_mixing_sums_to_one_and_positive():
    gen = np.random.default_rng(5)
    for _ in range(200):
        col = sample_mixing_column(2, {1, 2, 3}, gen)
        total = sum(col.weights.values())
        assert abs(total - 1.0) <= 1e-12
        assert all(v > 0.0 for v in col.weights.values())
        assert set(col.weights) == {1, 2, 3}


def test_mixing_expectation_uniform_over_neighbors():
    gen = np.random.default_rng(8)
    draws = np.array([
        [sample_mixing_column(2, {1, 2, 3}, gen).weights[i] for i in (1, 2, 3)]
        for _ in range(10 ** 5)
    ])
    assert np.abs(draws.mean(axis=0) - 1.0 / 3.0).max() <= 0.01 / 3.0


def test_assemble_mixing_matrix_column_stochastic():
    gen = np.random.default_rng(2)
    cols = [sample_mixing_column(1, {1, 2}, gen),
            sample_mixing_column(2, {1, 2, 3}, gen),
            sample_mixing_column(3, {2, 3}, gen)]
    b = assemble_mixing_matrix(cols, 3)
    np.testing.assert_allclose(b.sum(axis=0), 1.0, atol=1e-12)
    assert b[2, 0] == 0.0  # agent 3 is not a neighbor of agent 1


def test_stream_independence_cross_correlation():
    src = RandomSource(123)
    n = 10 ** 5
    base = src.stream(1, 1, "stepsize").random(n)
    for other_id in [(2, 1, "stepsize"), (1, 2, "stepsize"), (1, 1, "mixing")]:
        other = src.stream(*other_id).random(n)
        r = np.corrcoef(base, other)[0, 1]
        assert abs(r) < 0.01


def test_direct_mode_entries_and_mean():
    sched = StepsizeSchedule(mode="use_directly")
    gen = np.random.default_rng(4)
    k = 10
    mat = direct_stepsize_matrix(sched, 10 ** 5, k, gen)
    lo, hi = (1.0 - 1.0 / k) / k, 1.0 / k
    assert np.all(mat.diag >= lo) and np.all(mat.diag <= hi)
    assert mat.mean == (1.0 - 0.5 / k) / k
    assert abs(mat.diag.mean() - mat.mean) < 3.0 / (np.sqrt(12) * k * k) / np.sqrt(10 ** 5) * np.sqrt(12)


def test_verify_schedule_paper_default_clean():
    diag = verify_schedule(StepsizeSchedule(), agents=5, horizon=10 ** 4,
                           rng=RandomSource(1))
    assert diag.ok
    # pairwise means differ by at most 1/k^2, so the heterogeneity sum has
    # converged: the tail contributes a vanishing fraction
    assert diag.heterogeneity_tail_fraction < 0.01
    assert diag.heterogeneity_sum < 20 * 2.0  # pairs * sum 1/k^2 bound


def test_verify_schedule_constant_flagged():
    sched = StepsizeSchedule(kind="constant_mean", params={"value": 0.1})
    diag = verify_schedule(sched, agents=3, horizon=2000, rng=RandomSource(1))
    assert "mean-square-sum-diverging" in diag.flags
    assert "mean-sum-not-diverging" not in diag.flags


def test_verify_schedule_zero_flagged():
    sched = StepsizeSchedule(kind="constant_mean", params={"value": 0.0})
    diag = verify_schedule(sched, agents=3, horizon=100, rng=RandomSource(1))
    assert "mean-sum-not-diverging" in diag.flags
    assert float(diag.sum_mean.max()) == 0.0


def test_verify_schedule_requires_horizon():
    with pytest.raises(ValueError):
        verify_schedule(StepsizeSchedule(), 3, 5, RandomSource(0))


def test_schedule_validation():
    with pytest.raises(ValueError):
        StepsizeSchedule(kind="nope")
    with pytest.raises(ValueError):
        StepsizeSchedule(mode="nope")
    with pytest.raises(ValueError):
        StepsizeSchedule(kind="constant_mean")
