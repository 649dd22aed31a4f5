"""Pairwise matching costs and optimal bipartite assignment.

Two cost matrices drive supervision: a class-specific one built from the
per-class logits, and a class-agnostic one built from the single
objectness logit. Both share the box terms. The solver is a
Jonker-Volgenant style shortest-augmenting-path routine on rectangular
matrices (rows = targets, columns = predictions, rows <= columns).
"""

import math
from dataclasses import dataclass

import numpy as np

from .geometry import cxcywh_to_xyxy, giou_matrix
from .structures import sigmoid_np

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
_EPS = 1e-12


@dataclass
class CostWeights:
    w_cls: float = 2.0
    w_l1: float = 5.0
    w_giou: float = 2.0


@dataclass
class Assignment:
    pairs: list  # (target index, prediction index)
    total_cost: float

    def pred_for_target(self):
        return {t: p for t, p in self.pairs}


def _focal_match_terms(prob):
    """Probability-space matching cost pieces: positive and negative parts."""
    p = np.clip(prob, _EPS, 1.0 - _EPS)
    pos = FOCAL_ALPHA * (1.0 - p) ** FOCAL_GAMMA * (-np.log(p))
    neg = (1.0 - FOCAL_ALPHA) * p ** FOCAL_GAMMA * (-np.log(1.0 - p))
    return pos, neg


def _box_cost_terms(targets, preds):
    tboxes = np.stack([t.box for t in targets])
    pboxes = np.stack([p.box for p in preds])
    l1 = np.abs(tboxes[:, None, :] - pboxes[None, :, :]).sum(axis=-1)
    g = giou_matrix(cxcywh_to_xyxy(tboxes), cxcywh_to_xyxy(pboxes))
    return l1, 1.0 - g


def class_match_cost(targets, preds, weights=None):
    """(T, N) cost from per-class logits plus box distance.

    Entry (i, j) pays the focal-style cost of prediction j claiming target
    i's label (positive part minus the negative part it would otherwise
    pay), plus weighted L1 and GIoU box terms.
    """
    w = weights or CostWeights()
    if not targets:
        return np.zeros((0, len(preds)))
    logits = np.stack([p.class_logits for p in preds])
    prob = sigmoid_np(logits)
    pos, neg = _focal_match_terms(prob)
    cols = np.array([t.label - 1 for t in targets], dtype=np.intp)
    if cols.min() < 0 or cols.max() >= logits.shape[1]:
        raise ValueError("target label outside class-head width")
    cls_cost = (pos - neg)[:, cols].T
    l1, giou_cost = _box_cost_terms(targets, preds)
    return w.w_cls * cls_cost + w.w_l1 * l1 + w.w_giou * giou_cost


def binary_match_cost(binary_targets, preds, weights=None):
    """(T, N) cost from the objectness logit plus box distance.

    Rows are foreground targets; the class term is identical for every row
    since foreground is the only positive.
    """
    w = weights or CostWeights()
    if not binary_targets:
        return np.zeros((0, len(preds)))
    obj = np.array([p.objectness for p in preds])
    pos, neg = _focal_match_terms(obj)
    cls_cost = np.broadcast_to(pos - neg, (len(binary_targets), len(preds)))
    l1, giou_cost = _box_cost_terms(binary_targets, preds)
    return w.w_cls * cls_cost + w.w_l1 * l1 + w.w_giou * giou_cost


def hungarian_solve(cost):
    """Minimum-cost injective row-to-column assignment.

    Shortest augmenting path with dual potentials; ties during the path
    search resolve to the lowest column index, which makes the returned
    assignment deterministic among equal-cost optima.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be 2-D")
    n, m = cost.shape
    if n == 0:
        return Assignment(pairs=[], total_cost=0.0)
    if n > m:
        raise ValueError(f"more rows than columns: {n} > {m}")
    if not np.isfinite(cost).all():
        raise ValueError("non-finite cost entries")

    # 1-indexed arrays; p[j] is the row matched to column j, 0 when free.
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [math.inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = math.inf
            j1 = 0
            row = cost[i0 - 1]
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    pairs = sorted((p[j] - 1, j - 1) for j in range(1, m + 1) if p[j])
    total = float(sum(cost[r, c] for r, c in pairs))
    return Assignment(pairs=pairs, total_cost=total)


def dual_match(targets, preds, weights=None):
    """Independent assignments from the class cost and the binary cost."""
    sigma = hungarian_solve(class_match_cost(targets, preds, weights))
    sigma_star = hungarian_solve(binary_match_cost(targets, preds, weights))
    return sigma, sigma_star
