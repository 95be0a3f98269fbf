"""Pure-Python reference kernels (fallback when the compiled core is absent).

``hungarian_lexmin`` and ``match_costs`` here define the semantics the
compiled versions in ``_ckernels.pyx`` must reproduce.
"""
from __future__ import annotations

import numpy as np

BACKEND = "python"

_INF = float("inf")


def _potentials(rows: list[list[float]], k: int, n: int):
    """Shortest-augmenting-path Hungarian on a k x n matrix (k <= n), 1-indexed."""
    u = [0.0] * (k + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)
    way = [0] * (n + 1)
    for i in range(1, k + 1):
        p[0] = i
        j0 = 0
        minv = [_INF] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = rows[i0 - 1]
            ui0 = u[i0]
            delta = _INF
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    cols = [0] * k
    for j in range(1, n + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1
    return u, v, cols


def hungarian_lexmin(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """Optimal injective row->column map, lexicographically smallest among optima.

    Returns ``(cols, total)`` where ``cols[i]`` is the column of row ``i``.
    Optimal maps are exactly the row-perfect matchings on tight edges that
    use every column with a negative dual, so a lexicographic depth-first
    walk of that subgraph yields the smallest one.
    """
    c = np.asarray(cost, dtype=np.float64)
    k, n = c.shape
    if k == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    if k > n:
        raise ValueError(f"more rows than columns ({k} > {n})")
    if not np.isfinite(c).all():
        raise ValueError("cost matrix has non-finite entries")
    rows = c.tolist()
    u, v, cols = _potentials(rows, k, n)
    # slack for rounding in the duals; no floor, so tiny costs are not lumped together
    tol = 1e-12 * max(abs(x) for r in rows for x in r)
    tight = [
        [j for j in range(n) if rows[i][j] - u[i + 1] - v[j + 1] <= tol]
        for i in range(k)
    ]
    required = [v[j + 1] < -tol for j in range(n)]
    n_required = sum(required)
    used = [False] * n
    chosen = [0] * k

    def walk(i: int, req_left: int) -> bool:
        if i == k:
            return req_left == 0
        for j in tight[i]:
            if used[j]:
                continue
            left = req_left - required[j]
            if left > k - i - 1:
                continue
            used[j] = True
            chosen[i] = j
            if walk(i + 1, left):
                return True
            used[j] = False
        return False

    total = _row_sum(rows, cols)
    if walk(0, n_required):
        lex_total = _row_sum(rows, chosen)
        # near-ties inside the slack are only accepted when truly no worse
        if lex_total <= total:
            cols, total = chosen, lex_total
    return np.asarray(cols, dtype=np.int64), total


def _row_sum(rows, cols) -> float:
    total = 0.0
    for i, j in enumerate(cols):
        total += rows[i][j]
    return total


def match_costs(
    tgt_spans: np.ndarray,
    tgt_queries: np.ndarray,
    pred_spans: np.ndarray,
    corr: np.ndarray,
    w_l1: float,
    w_iou: float,
) -> np.ndarray:
    """K x N matching cost: -p + w_l1 * L1 + w_iou * (1 - gIoU)."""
    t = np.asarray(tgt_spans, dtype=np.float64).reshape(-1, 2)
    p = np.asarray(pred_spans, dtype=np.float64).reshape(-1, 2)
    q = np.asarray(tgt_queries, dtype=np.int64)
    ts, te = t[:, None, 0], t[:, None, 1]
    ps, pe = p[None, :, 0], p[None, :, 1]
    l1 = np.abs(ts - ps) + np.abs(te - pe)
    raw = np.minimum(te, pe) - np.maximum(ts, ps)
    inter = np.maximum(raw, 0.0)
    union = (te - ts) + (pe - ps) - inter
    hull = np.maximum(te, pe) - np.minimum(ts, ps)
    base = np.zeros_like(union)
    np.divide(inter, union, out=base, where=union > 0)
    pen = np.zeros_like(hull)
    np.divide(np.maximum(-raw, 0.0), hull, out=pen, where=hull > 0)
    g = np.where(hull > 0, base - pen, 0.0)
    prob = np.asarray(corr, dtype=np.float64)[:, q].T
    return -prob + w_l1 * l1 + w_iou * (1.0 - g)


# ------------------------------------------------------------------ dense kernels
# Shapes: 2D arrays are (rows, width); softmax inputs are (groups, rows, width)
# with a (groups, width) mask where nonzero marks excluded entries.

def layer_norm_fwd(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, xhat, inv[:, 0]


def layer_norm_bwd(g: np.ndarray, xhat: np.ndarray, inv: np.ndarray, gain: np.ndarray):
    gh = g * gain
    gx = inv[:, None] * (gh - gh.mean(axis=1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=1, keepdims=True))
    return gx, (g * xhat).sum(axis=0), g.sum(axis=0)


def softmax_fwd(x: np.ndarray, mask: np.ndarray | None, scale: float) -> np.ndarray:
    z = x * scale
    if mask is not None:
        z = np.where(mask[:, None, :].astype(bool), -np.inf, z)
    z = z - z.max(axis=2, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=2, keepdims=True)


def softmax_bwd(g: np.ndarray, out: np.ndarray, scale: float) -> np.ndarray:
    return scale * out * (g - (g * out).sum(axis=2, keepdims=True))


def adamw_update(p: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray, lr: float,
                 wd: float, b1: float, b2: float, c1: float, c2: float, eps: float) -> None:
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    p -= lr * ((m / c1) / (np.sqrt(v / c2) + eps) + wd * p)


def dropout_fwd(x: np.ndarray, bits: np.ndarray, threshold: int, scale: float):
    """Keep entries whose 16-bit draw is >= threshold, rescaled; returns (out, keep)."""
    keep = bits >= threshold
    return np.where(keep, x * scale, 0.0), keep


def dropout_bwd(g: np.ndarray, keep: np.ndarray, scale: float) -> np.ndarray:
    return np.where(keep, g * scale, 0.0)
