"""Normalized 1D interval arithmetic on [0, 1].

Scalar functions operate on :class:`TimeSpan`; the ``pairwise_*`` helpers
take arrays of shape (M, 2) and (N, 2) and return (M, N) grids, which is
what the matcher and the metrics use.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, order=True)
class TimeSpan:
    """A normalized interval ``(s, e)`` with ``0 <= s <= e <= 1``."""

    s: float
    e: float

    def __post_init__(self):
        s, e = float(self.s), float(self.e)
        if not (np.isfinite(s) and np.isfinite(e)):
            raise ValueError(f"non-finite span endpoints ({s}, {e})")
        if not 0.0 <= s <= e <= 1.0:
            raise ValueError(f"invalid span ({s}, {e}): need 0 <= s <= e <= 1")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "e", e)

    @property
    def length(self) -> float:
        return self.e - self.s

    @property
    def center(self) -> float:
        return 0.5 * (self.s + self.e)

    def as_tuple(self) -> tuple[float, float]:
        return (self.s, self.e)


def intersection_len(a: TimeSpan, b: TimeSpan) -> float:
    return max(0.0, min(a.e, b.e) - max(a.s, b.s))


def union_len(a: TimeSpan, b: TimeSpan) -> float:
    return a.length + b.length - intersection_len(a, b)


def hull(a: TimeSpan, b: TimeSpan) -> TimeSpan:
    return TimeSpan(min(a.s, b.s), max(a.e, b.e))


def iou(a: TimeSpan, b: TimeSpan) -> float:
    u = union_len(a, b)
    if u <= 0.0:
        return 0.0
    return intersection_len(a, b) / u


def giou(a: TimeSpan, b: TimeSpan) -> float:
    h = max(a.e, b.e) - min(a.s, b.s)
    if h <= 0.0:
        return 0.0
    u = union_len(a, b)
    base = intersection_len(a, b) / u if u > 0.0 else 0.0
    # the part of the hull outside the union is the gap between the spans;
    # measuring it directly keeps giou <= iou where h - u would round negative
    gap = max(0.0, max(a.s, b.s) - min(a.e, b.e))
    return base - gap / h


def span_l1(a: TimeSpan, b: TimeSpan) -> float:
    return abs(a.s - b.s) + abs(a.e - b.e)


def spans_to_array(spans) -> np.ndarray:
    """Stack TimeSpans (or (s, e) pairs) into an (M, 2) float array."""
    rows = [sp.as_tuple() if isinstance(sp, TimeSpan) else tuple(sp) for sp in spans]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 2)


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    inter = np.clip(
        np.minimum(a[:, None, 1], b[None, :, 1]) - np.maximum(a[:, None, 0], b[None, :, 0]),
        0.0,
        None,
    )
    union = (a[:, 1] - a[:, 0])[:, None] + (b[:, 1] - b[:, 0])[None, :] - inter
    out = np.zeros_like(union)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    raw = np.minimum(a[:, None, 1], b[None, :, 1]) - np.maximum(a[:, None, 0], b[None, :, 0])
    inter = np.maximum(raw, 0.0)
    union = (a[:, 1] - a[:, 0])[:, None] + (b[:, 1] - b[:, 0])[None, :] - inter
    h = np.maximum(a[:, None, 1], b[None, :, 1]) - np.minimum(a[:, None, 0], b[None, :, 0])
    base = np.zeros_like(union)
    np.divide(inter, union, out=base, where=union > 0)
    penalty = np.zeros_like(h)
    np.divide(np.maximum(-raw, 0.0), h, out=penalty, where=h > 0)
    return np.where(h > 0, base - penalty, 0.0)


def pairwise_l1(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    return np.abs(a[:, None, 0] - b[None, :, 0]) + np.abs(a[:, None, 1] - b[None, :, 1])
