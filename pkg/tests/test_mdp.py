"""Bellman machinery tests.

Greedy values are checked against dense grid scans; the operator properties
(monotonicity, discount contraction) are verified at machine-tight golden
tolerance (tol=0 runs the full 80-iteration bracket).
"""

import numpy as np
import pytest

from mfgham.errors import DimensionMismatch, EmptyData, EmptyInterval, InvalidBounds
from mfgham.mdp import (
    ConcaveQ,
    Dataset,
    FeasibleInterval,
    HouseholdState,
    bellman_problems,
    bellman_target_values,
    greedy_value,
    greedy_values,
    read_dataset_csv,
    write_dataset_csv,
)
from mfgham.shape_reg import MaxAffineFn

B = 20.0  # value cap used throughout: 1 / (1 - 0.95)


def concave_from_surrogate(slopes, intercepts, lipschitz=5.0, upper=B, levels=1):
    fn = MaxAffineFn(slopes, intercepts, lipschitz, upper)
    return ConcaveQ(level_fns=[fn] * levels, upper_bound=upper)


def random_concave(rng, levels=2, pieces=5, lipschitz=4.0, upper=B):
    fns = []
    for _ in range(levels):
        slopes = rng.uniform(-lipschitz, lipschitz, size=(pieces, 2))
        # keep surrogate values near [0, B] so the clamp stays mostly inactive
        intercepts = rng.uniform(0.2 * upper, 0.8 * upper, size=pieces)
        fns.append(MaxAffineFn(slopes, intercepts, lipschitz, upper))
    return ConcaveQ(level_fns=fns, upper_bound=upper)


def unit_interval(b, w):
    return np.zeros_like(b), np.ones_like(b)


def toy_dataset(rng, m=64, hi=1.0):
    b = rng.uniform(0, 1, m)
    w = rng.integers(0, 2, m)
    a = rng.uniform(0, hi, m)
    return Dataset(
        capital=b,
        income=w,
        action=a,
        reward=rng.uniform(0, 1, m),
        capital_next=a,
        income_next=rng.integers(0, 2, m),
        wage=1.0,
        rent=0.1,
    )


# ---------------------------------------------------------------------------
# greedy search


def test_greedy_tent_function():
    # Q(b, w, a) = 1 - |a - 0.3|: surrogate pieces (0, -1, B-0.7), (0, 1, B-1.3)
    q = concave_from_surrogate(
        np.array([[0.0, -1.0], [0.0, 1.0]]), np.array([B - 0.7, B - 1.3]),
        lipschitz=1.0,
    )
    value, argmax = greedy_value(
        q, HouseholdState(0.5, 0), FeasibleInterval(0.0, 1.0), tol=0.0
    )
    assert value == pytest.approx(1.0, abs=1e-6)
    assert argmax == pytest.approx(0.3, abs=1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_greedy_matches_dense_grid(seed):
    rng = np.random.default_rng(seed)
    q = random_concave(rng, levels=2, pieces=5)
    n = 5
    b = rng.uniform(0, 1, n)
    w = rng.integers(0, 2, n)
    lo = np.zeros(n)
    hi = rng.uniform(0.5, 1.0, n)
    values, argmax = greedy_values(q, b, w, lo, hi, tol=0.0)
    # oracle: dense scan fine enough that L * spacing / 2 < 1e-6, plus the
    # two exact inequalities (value attainable, value dominates every grid point)
    grid = np.linspace(0.0, 1.0, 4_000_001)
    for i in range(n):
        acts = lo[i] + grid * (hi[i] - lo[i])
        dense = q.value(
            np.full_like(acts, b[i]), np.full_like(acts, w[i], dtype=np.int64), acts
        )
        dense_max = float(dense.max())
        assert values[i] == pytest.approx(dense_max, abs=1e-6)
        assert values[i] >= dense_max - 1e-12  # never below any grid point
        attained = float(q.value(b[i], int(w[i]), argmax[i]))
        assert attained == pytest.approx(values[i], abs=1e-9)  # value is attained
        assert lo[i] <= argmax[i] <= hi[i]


def test_greedy_degenerate_interval():
    rng = np.random.default_rng(1)
    q = random_concave(rng, levels=1)
    value, argmax = greedy_value(q, HouseholdState(0.4, 0), FeasibleInterval(0.7, 0.7))
    assert argmax == 0.7
    assert value == pytest.approx(float(q.value(0.4, 0, 0.7)), abs=1e-12)


def test_greedy_interval_errors():
    rng = np.random.default_rng(2)
    q = random_concave(rng, levels=1)
    with pytest.raises(EmptyInterval):
        greedy_values(q, np.zeros(1), np.zeros(1, dtype=int), np.ones(1), np.zeros(1))
    with pytest.raises(EmptyInterval):
        FeasibleInterval(1.0, 0.0)
    with pytest.raises(DimensionMismatch):
        greedy_values(q, np.zeros(2), np.zeros(1, dtype=int), np.zeros(1), np.ones(1))


def test_zero_q_has_zero_values():
    q = ConcaveQ.zero(2, upper_bound=B, lipschitz=1.0)
    rng = np.random.default_rng(0)
    b = rng.uniform(0, 1, 10)
    w = rng.integers(0, 2, 10)
    assert np.all(q.value(b, w, b) == 0.0)
    values, _ = greedy_values(q, b, w, np.zeros(10), np.ones(10))
    assert np.all(values == 0.0)


# ---------------------------------------------------------------------------
# Bellman targets


def test_target_frozen_arithmetic():
    # r = 0.5, gamma = 0.95, JQ = 2 everywhere -> target 0.5 + 0.95 * 2 = 2.4
    q = concave_from_surrogate(np.array([[0.0, 0.0]]), np.array([B - 2.0]), levels=2)
    data = Dataset(
        capital=np.array([0.5]),
        income=np.array([0]),
        action=np.array([0.2]),
        reward=np.array([0.5]),
        capital_next=np.array([0.2]),
        income_next=np.array([1]),
        wage=1.0,
        rent=0.1,
    )
    targets, _ = bellman_target_values(data, q, 0.95, unit_interval)
    assert targets[0] == pytest.approx(2.4, abs=1e-9)


def test_target_clamps_to_value_cap():
    q = ConcaveQ.zero(1, upper_bound=B, lipschitz=1.0)
    data = Dataset(
        capital=np.array([0.1]),
        income=np.array([0]),
        action=np.array([0.1]),
        reward=np.array([100.0]),
        capital_next=np.array([0.1]),
        income_next=np.array([0]),
        wage=1.0,
        rent=0.1,
    )
    targets, _ = bellman_target_values(data, q, 0.95, unit_interval)
    assert targets[0] == B


def test_target_validation_errors():
    q = ConcaveQ.zero(2, upper_bound=B, lipschitz=1.0)
    rng = np.random.default_rng(0)
    data = toy_dataset(rng)
    with pytest.raises(InvalidBounds):
        bellman_target_values(data, q, 1.0, unit_interval)
    empty = Dataset(
        capital=np.zeros(0), income=np.zeros(0, dtype=int), action=np.zeros(0),
        reward=np.zeros(0), capital_next=np.zeros(0),
        income_next=np.zeros(0, dtype=int), wage=1.0, rent=0.1,
    )
    with pytest.raises(EmptyData):
        bellman_target_values(empty, q, 0.95, unit_interval)


@pytest.mark.parametrize("seed", range(4))
def test_target_monotonicity_machine_tight(seed):
    rng = np.random.default_rng(seed)
    data = toy_dataset(rng, m=80)
    q1 = random_concave(rng, levels=2, pieces=4)
    # lower every surrogate intercept -> Q2 >= Q1 pointwise through the clamp
    shift = rng.uniform(0.1, 1.0)
    fns2 = [
        MaxAffineFn(f.slopes, f.intercepts - shift, f.lipschitz, f.upper_bound)
        for f in q1.level_fns
    ]
    q2 = ConcaveQ(level_fns=fns2, upper_bound=q1.upper_bound)
    t1, _ = bellman_target_values(data, q1, 0.95, unit_interval, tol=0.0)
    t2, _ = bellman_target_values(data, q2, 0.95, unit_interval, tol=0.0)
    assert np.all(t2 >= t1 - 1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_target_discount_contraction_machine_tight(seed):
    rng = np.random.default_rng(100 + seed)
    data = toy_dataset(rng, m=80)
    qa = random_concave(rng, levels=2, pieces=4)
    qb = random_concave(rng, levels=2, pieces=4)
    ta, arg_a = bellman_target_values(data, qa, 0.95, unit_interval, tol=0.0)
    tb, arg_b = bellman_target_values(data, qb, 0.95, unit_interval, tol=0.0)
    # |J(qa) - J(qb)| <= max over the two maximizers of |qa - qb|; probing at
    # the returned argmax points makes the bound per-row and machine tight
    diff_at_a = np.abs(
        qa.value(data.capital_next, data.income_next, arg_a)
        - qb.value(data.capital_next, data.income_next, arg_a)
    )
    diff_at_b = np.abs(
        qa.value(data.capital_next, data.income_next, arg_b)
        - qb.value(data.capital_next, data.income_next, arg_b)
    )
    bound = 0.95 * np.maximum(diff_at_a, diff_at_b)
    assert np.all(np.abs(ta - tb) <= bound + 1e-12)


def test_bellman_problems_group_by_level():
    rng = np.random.default_rng(5)
    data = toy_dataset(rng, m=100)
    q = ConcaveQ.zero(2, upper_bound=B, lipschitz=2.0)
    problems = bellman_problems(data, q, 0.95, unit_interval, lipschitz=2.0)
    assert set(problems) == {0, 1}
    total = sum(p.sample_count for p in problems.values())
    assert total == 100
    for level, prob in problems.items():
        mask = data.income == level
        assert np.array_equal(prob.x[:, 0], data.capital[mask])
        assert np.array_equal(prob.x[:, 1], data.action[mask])
        # zero Q -> targets are just clamped rewards
        assert prob.y == pytest.approx(np.clip(data.reward[mask], 0, B), abs=1e-12)


# ---------------------------------------------------------------------------
# dataset plumbing


def test_dataset_csv_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    data = toy_dataset(rng, m=17)
    path = tmp_path / "transitions.csv"
    write_dataset_csv(data, str(path))
    back = read_dataset_csv(str(path), wage=data.wage, rent=data.rent)
    assert np.array_equal(back.capital, data.capital)
    assert np.array_equal(back.income, data.income)
    assert np.array_equal(back.action, data.action)
    assert np.array_equal(back.reward, data.reward)
    assert np.array_equal(back.capital_next, data.capital_next)
    assert np.array_equal(back.income_next, data.income_next)
    write_dataset_csv(back, str(tmp_path / "again.csv"))
    assert (tmp_path / "again.csv").read_text() == path.read_text()


def test_dataset_column_alignment():
    with pytest.raises(DimensionMismatch):
        Dataset(
            capital=np.zeros(3), income=np.zeros(2, dtype=int), action=np.zeros(3),
            reward=np.zeros(3), capital_next=np.zeros(3),
            income_next=np.zeros(3, dtype=int), wage=1.0, rent=0.1,
        )
