"""Assignment solver against an exhaustive oracle, plus cost semantics."""

import itertools
import time

import numpy as np
import pytest

from owdet.matching import (Assignment, CostWeights, binary_match_cost,
                            class_match_cost, dual_match, hungarian_solve)
from owdet.structures import Prediction, Target


def brute_force_assignment(cost):
    """Enumerate every injection of rows into columns; return (best, optima).

    ``optima`` is the set of assignments whose total is within 1e-9 of the
    minimum, as frozensets of (row, col) pairs.
    """
    cost = np.asarray(cost, dtype=float)
    n, m = cost.shape
    best = np.inf
    optima = []
    for cols in itertools.permutations(range(m), n):
        total = sum(cost[r, c] for r, c in enumerate(cols))
        if total < best - 1e-9:
            best = total
            optima = [frozenset(enumerate(cols))]
        elif total <= best + 1e-9:
            optima.append(frozenset(enumerate(cols)))
    return best, optima


def test_two_by_two_example():
    out = hungarian_solve([[1, 2], [3, 1]])
    assert out.pairs == [(0, 0), (1, 1)]
    assert out.total_cost == 2


def test_all_zero_ties_break_to_diagonal():
    out = hungarian_solve(np.zeros((3, 3)))
    assert out.pairs == [(0, 0), (1, 1), (2, 2)]
    assert out.total_cost == 0


def test_empty_cost():
    out = hungarian_solve(np.zeros((0, 5)))
    assert out.pairs == [] and out.total_cost == 0.0


def test_rows_exceed_columns_rejected():
    with pytest.raises(ValueError):
        hungarian_solve(np.zeros((3, 2)))


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        hungarian_solve([[np.inf, 1.0]])


def test_random_rectangular_against_brute_force():
    rng = np.random.default_rng(17)
    start = time.monotonic()
    for trial in range(100):
        n = int(rng.integers(1, 8))
        m = int(rng.integers(n, 8))
        cost = rng.normal(size=(n, m)) * 10
        solved = hungarian_solve(cost)
        best, optima = brute_force_assignment(cost)
        assert abs(solved.total_cost - best) < 1e-9, f"trial {trial}"
        assert frozenset(solved.pairs) in optima, f"trial {trial}"
        assert len({c for _, c in solved.pairs}) == n
    assert time.monotonic() - start < 5.0


def test_row_constant_shift_keeps_assignment_optimal():
    rng = np.random.default_rng(23)
    for _ in range(20):
        cost = rng.normal(size=(4, 6))
        shifted = cost + rng.normal(size=(4, 1))
        out = hungarian_solve(shifted)
        _, optima = brute_force_assignment(shifted)
        assert frozenset(out.pairs) in optima


def _pred(logits, binary_logit, box):
    return Prediction(class_logits=logits, binary_logit=binary_logit, box=box)


def test_perfect_prediction_has_minimal_column_cost():
    rng = np.random.default_rng(31)
    target = Target(label=2, box=[0.5, 0.5, 0.2, 0.2])
    perfect = _pred(np.array([-20.0, 20.0, -20.0]), 0.0, [0.5, 0.5, 0.2, 0.2])
    others = [_pred(rng.normal(size=3), 0.0, rng.uniform(0.1, 0.9, 4)) for _ in range(10)]
    cost = class_match_cost([target], [perfect] + others)
    assert cost.shape == (1, 11)
    assert np.argmin(cost[0]) == 0


def test_class_cost_zero_weight_identical_boxes():
    target = Target(label=1, box=[0.5, 0.5, 0.2, 0.2])
    pred = _pred(np.zeros(2), 0.0, [0.5, 0.5, 0.2, 0.2])
    cost = class_match_cost([target], [pred], CostWeights(w_cls=0.0))
    assert abs(cost[0, 0]) < 1e-12


def test_class_cost_orders_by_l1():
    target = Target(label=1, box=[0.5, 0.5, 0.2, 0.2])
    near = _pred(np.zeros(2), 0.0, [0.52, 0.5, 0.2, 0.2])
    far = _pred(np.zeros(2), 0.0, [0.6, 0.5, 0.2, 0.2])
    cost = class_match_cost([target], [near, far])
    assert cost[0, 0] < cost[0, 1]


def test_binary_cost_prefers_confident_objectness():
    target = Target(label=3, box=[0.5, 0.5, 0.2, 0.2])
    confident = _pred(np.zeros(3), 20.0, [0.5, 0.5, 0.2, 0.2])
    unsure = _pred(np.zeros(3), 0.0, [0.5, 0.5, 0.2, 0.2])
    cost = binary_match_cost([target], [confident, unsure])
    assert np.argmin(cost[0]) == 0


def test_binary_cost_class_term_only():
    target = Target(label=1, box=[0.2, 0.2, 0.1, 0.1])
    lo = _pred(np.zeros(2), -2.0, [0.8, 0.8, 0.1, 0.1])
    hi = _pred(np.zeros(2), 2.0, [0.9, 0.9, 0.1, 0.1])
    cost = binary_match_cost([target], [lo, hi], CostWeights(w_l1=0.0, w_giou=0.0))
    assert cost[0, 1] < cost[0, 0]


def test_identical_predictions_tie_breaks_to_first_column():
    target = Target(label=1, box=[0.5, 0.5, 0.2, 0.2])
    pred = _pred(np.zeros(2), 0.0, [0.4, 0.4, 0.2, 0.2])
    twin = _pred(np.zeros(2), 0.0, [0.4, 0.4, 0.2, 0.2])
    cost = binary_match_cost([target], [pred, twin])
    assert np.allclose(cost[0, 0], cost[0, 1])
    out = hungarian_solve(cost)
    assert out.pairs == [(0, 0)]


def test_dual_match_shapes_and_optimality():
    rng = np.random.default_rng(41)
    targets = [Target(label=int(rng.integers(1, 4)), box=rng.uniform(0.2, 0.6, 4))
               for _ in range(3)]
    preds = [_pred(rng.normal(size=4), float(rng.normal()), rng.uniform(0.1, 0.9, 4))
             for _ in range(6)]
    sigma, sigma_star = dual_match(targets, preds)
    for a, costfn in ((sigma, class_match_cost), (sigma_star, binary_match_cost)):
        assert isinstance(a, Assignment)
        assert sorted(t for t, _ in a.pairs) == [0, 1, 2]
        best, optima = brute_force_assignment(costfn(targets, preds))
        assert abs(a.total_cost - best) < 1e-9
        assert frozenset(a.pairs) in optima


def test_dual_match_empty_targets():
    preds = [_pred(np.zeros(3), 0.0, [0.5, 0.5, 0.2, 0.2])]
    sigma, sigma_star = dual_match([], preds)
    assert sigma.pairs == [] and sigma_star.pairs == []


def test_dual_match_single_pair():
    targets = [Target(label=1, box=[0.5, 0.5, 0.2, 0.2])]
    preds = [_pred(np.zeros(2), 0.0, [0.5, 0.5, 0.2, 0.2])]
    sigma, sigma_star = dual_match(targets, preds)
    assert sigma.pairs == [(0, 0)] and sigma_star.pairs == [(0, 0)]


def test_label_out_of_range_rejected():
    target = Target(label=5, box=[0.5, 0.5, 0.2, 0.2])
    pred = _pred(np.zeros(3), 0.0, [0.5, 0.5, 0.2, 0.2])
    with pytest.raises(ValueError):
        class_match_cost([target], [pred])
