"""Optimal bipartite matching between ground-truth targets and predictions."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import kernels
from .intervals import TimeSpan, spans_to_array


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class CostMatrix:
    """K x N grid; entry (i, j) is the cost of giving target i prediction j."""

    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise DimensionError(f"cost matrix must be 2D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("cost matrix has non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...]
    total_cost: float

    @property
    def pred_indices(self) -> np.ndarray:
        return np.asarray([j for _, j in self.pairs], dtype=np.int64)

    @property
    def target_indices(self) -> np.ndarray:
        return np.asarray([i for i, _ in self.pairs], dtype=np.int64)


def build_cost_matrix(targets, pred_spans, correspondence, weights=(1.0, 1.0)) -> CostMatrix:
    """Matching cost ``-p_j(q_i) + w_l1 * L1(t_i, t_j) + w_iou * (1 - gIoU(t_i, t_j))``.

    ``targets`` is a sequence of ``(TimeSpan, query_index)``; ``correspondence``
    is the N x K probability grid of the predictions.
    """
    w_l1, w_iou = float(weights[0]), float(weights[1])
    pred = spans_to_array(pred_spans)
    corr = np.asarray(correspondence, dtype=np.float64)
    if corr.ndim != 2 or corr.shape[0] != pred.shape[0]:
        raise DimensionError(
            f"correspondence shape {corr.shape} does not match {pred.shape[0]} predictions"
        )
    tgt = spans_to_array([t for t, _ in targets])
    q = np.asarray([int(qi) for _, qi in targets], dtype=np.int64)
    if q.size and (q.min() < 0 or q.max() >= corr.shape[1]):
        raise DimensionError(
            f"query index out of range for correspondence with {corr.shape[1]} queries"
        )
    if not np.allclose(corr.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("correspondence rows must be probability vectors")
    return CostMatrix(kernels.match_costs(tgt, q, pred, corr, w_l1, w_iou))


def _as_matrix(m) -> np.ndarray:
    return m.values if isinstance(m, CostMatrix) else CostMatrix(m).values


def hungarian(m) -> Assignment:
    """Globally optimal assignment of every target (row) to a distinct prediction.

    Among equal-cost optima the lexicographically smallest pair list wins.
    """
    c = _as_matrix(m)
    k, n = c.shape
    if k > n:
        raise DimensionError(f"more targets than predictions ({k} > {n})")
    cols, total = kernels.hungarian_lexmin(c)
    return Assignment(tuple((i, int(j)) for i, j in enumerate(cols)), float(total))


def brute_force_assign(m) -> Assignment:
    """Exhaustive minimum over injective maps; test oracle for ``hungarian``."""
    c = _as_matrix(m)
    k, n = c.shape
    if n > 9:
        raise DimensionError(f"brute force limited to N <= 9, got {n}")
    if k > n:
        raise DimensionError(f"more targets than predictions ({k} > {n})")
    rows = c.tolist()
    best_perm: tuple[int, ...] = ()
    best = float("inf")
    # permutations() yields in lexicographic order, so strict < keeps the smallest
    for perm in itertools.permutations(range(n), k):
        total = 0.0
        for i, j in enumerate(perm):
            total += rows[i][j]
        if total < best:
            best, best_perm = total, perm
    if k == 0:
        best = 0.0
    return Assignment(tuple(enumerate(best_perm)), best)


def match_sample(tgt_spans: np.ndarray, tgt_queries: np.ndarray, pred_spans: np.ndarray,
                 corr: np.ndarray, w_l1: float, w_iou: float) -> tuple[np.ndarray, float]:
    """Array-level fast path used by the training loss: returns (pred index per target, cost)."""
    cost = kernels.match_costs(tgt_spans, tgt_queries, pred_spans, corr, w_l1, w_iou)
    return kernels.hungarian_lexmin(cost)


__all__ = [
    "Assignment",
    "CostMatrix",
    "DimensionError",
    "TimeSpan",
    "brute_force_assign",
    "build_cost_matrix",
    "hungarian",
    "match_sample",
]
