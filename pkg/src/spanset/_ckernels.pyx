# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled counterparts of ``_kernels_py``; same signatures, same results."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, INFINITY

cnp.import_array()

BACKEND = "cython"


cdef bint _walk(int i, int k, int n, int req_left,
                const unsigned char[:, ::1] tight,
                const unsigned char[::1] required,
                unsigned char[::1] used, long[::1] chosen):
    cdef int j, left
    if i == k:
        return req_left == 0
    for j in range(n):
        if not tight[i, j] or used[j]:
            continue
        left = req_left - required[j]
        if left > k - i - 1:
            continue
        used[j] = 1
        chosen[i] = j
        if _walk(i + 1, k, n, left, tight, required, used, chosen):
            return True
        used[j] = 0
    return False


def hungarian_lexmin(cost):
    cdef double[:, ::1] c = np.ascontiguousarray(cost, dtype=np.float64)
    cdef int k = c.shape[0]
    cdef int n = c.shape[1]
    if k == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    if k > n:
        raise ValueError(f"more rows than columns ({k} > {n})")
    if not np.isfinite(np.asarray(c)).all():
        raise ValueError("cost matrix has non-finite entries")

    cdef double[::1] u = np.zeros(k + 1)
    cdef double[::1] v = np.zeros(n + 1)
    cdef long[::1] p = np.zeros(n + 1, dtype=np.int64)
    cdef long[::1] way = np.zeros(n + 1, dtype=np.int64)
    cdef double[::1] minv = np.empty(n + 1)
    cdef unsigned char[::1] used = np.zeros(n + 1, dtype=np.uint8)
    cdef int i, j, j0, j1, i0
    cdef double delta, cur, ui0, scale, tol

    for i in range(1, k + 1):
        p[0] = i
        j0 = 0
        for j in range(n + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            ui0 = u[i0]
            delta = INFINITY
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = c[i0 - 1, j - 1] - ui0 - v[j]
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

    cols_np = np.zeros(k, dtype=np.int64)
    cdef long[::1] cols = cols_np
    for j in range(1, n + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1

    scale = 0.0
    for i in range(k):
        for j in range(n):
            if fabs(c[i, j]) > scale:
                scale = fabs(c[i, j])
    tol = 1e-12 * scale

    tight_np = np.zeros((k, n), dtype=np.uint8)
    cdef unsigned char[:, ::1] tight = tight_np
    required_np = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] required = required_np
    cdef int n_required = 0
    for i in range(k):
        for j in range(n):
            if c[i, j] - u[i + 1] - v[j + 1] <= tol:
                tight[i, j] = 1
    for j in range(n):
        if v[j + 1] < -tol:
            required[j] = 1
            n_required += 1

    walk_used_np = np.zeros(n, dtype=np.uint8)
    chosen_np = np.zeros(k, dtype=np.int64)
    cdef long[::1] chosen = chosen_np
    cdef double total = 0.0, lex_total = 0.0
    for i in range(k):
        total += c[i, cols[i]]
    if _walk(0, k, n, n_required, tight, required, walk_used_np, chosen):
        for i in range(k):
            lex_total += c[i, chosen[i]]
        if lex_total <= total:
            cols_np = chosen_np
            total = lex_total
    return cols_np, total


def match_costs(tgt_spans, tgt_queries, pred_spans, corr, double w_l1, double w_iou):
    cdef double[:, ::1] t = np.ascontiguousarray(tgt_spans, dtype=np.float64).reshape(-1, 2)
    cdef double[:, ::1] pr = np.ascontiguousarray(pred_spans, dtype=np.float64).reshape(-1, 2)
    cdef long[::1] q = np.ascontiguousarray(tgt_queries, dtype=np.int64)
    cdef double[:, ::1] pc = np.ascontiguousarray(corr, dtype=np.float64)
    cdef int k = t.shape[0]
    cdef int n = pr.shape[0]
    out_np = np.empty((k, n), dtype=np.float64)
    cdef double[:, ::1] out = out_np
    cdef int i, j
    cdef double ts, te, ps, pe, l1, raw, inter, union, hull, base, pen, g
    for i in range(k):
        ts = t[i, 0]
        te = t[i, 1]
        for j in range(n):
            ps = pr[j, 0]
            pe = pr[j, 1]
            l1 = fabs(ts - ps) + fabs(te - pe)
            raw = (te if te < pe else pe) - (ts if ts > ps else ps)
            inter = raw if raw > 0.0 else 0.0
            union = (te - ts) + (pe - ps) - inter
            hull = (te if te > pe else pe) - (ts if ts < ps else ps)
            base = inter / union if union > 0.0 else 0.0
            # uncovered part of the hull is the gap itself; hull - union can round below 0
            pen = (-raw if raw < 0.0 else 0.0) / hull if hull > 0.0 else 0.0
            g = base - pen if hull > 0.0 else 0.0
            out[i, j] = -pc[j, q[i]] + w_l1 * l1 + w_iou * (1.0 - g)
    return out_np


from libc.math cimport sqrt, exp


def layer_norm_fwd(x_in, gain_in, bias_in, double eps):
    cdef double[:, ::1] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef const double[::1] gain = np.ascontiguousarray(gain_in, dtype=np.float64)
    cdef const double[::1] bias = np.ascontiguousarray(bias_in, dtype=np.float64)
    cdef Py_ssize_t R = x.shape[0], D = x.shape[1], r, d
    out_np = np.empty((R, D))
    xhat_np = np.empty((R, D))
    inv_np = np.empty(R)
    cdef double[:, ::1] out = out_np
    cdef double[:, ::1] xhat = xhat_np
    cdef double[::1] inv = inv_np
    cdef double mu, var, t, iv
    for r in range(R):
        mu = 0.0
        for d in range(D):
            mu += x[r, d]
        mu /= D
        var = 0.0
        for d in range(D):
            t = x[r, d] - mu
            var += t * t
        var /= D
        iv = 1.0 / sqrt(var + eps)
        inv[r] = iv
        for d in range(D):
            t = (x[r, d] - mu) * iv
            xhat[r, d] = t
            out[r, d] = t * gain[d] + bias[d]
    return out_np, xhat_np, inv_np


def layer_norm_bwd(g_in, xhat_in, inv_in, gain_in):
    cdef double[:, ::1] g = np.ascontiguousarray(g_in, dtype=np.float64)
    cdef const double[:, ::1] xhat = xhat_in
    cdef const double[::1] inv = inv_in
    cdef const double[::1] gain = np.ascontiguousarray(gain_in, dtype=np.float64)
    cdef Py_ssize_t R = g.shape[0], D = g.shape[1], r, d
    gx_np = np.empty((R, D))
    gg_np = np.zeros(D)
    gb_np = np.zeros(D)
    cdef double[:, ::1] gx = gx_np
    cdef double[::1] gg = gg_np
    cdef double[::1] gb = gb_np
    cdef double s1, s2, gh
    for r in range(R):
        s1 = 0.0
        s2 = 0.0
        for d in range(D):
            gh = g[r, d] * gain[d]
            s1 += gh
            s2 += gh * xhat[r, d]
            gg[d] += g[r, d] * xhat[r, d]
            gb[d] += g[r, d]
        s1 /= D
        s2 /= D
        for d in range(D):
            gx[r, d] = inv[r] * (g[r, d] * gain[d] - s1 - xhat[r, d] * s2)
    return gx_np, gg_np, gb_np


def softmax_fwd(x_in, mask_in, double scale):
    cdef double[:, :, ::1] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef Py_ssize_t G = x.shape[0], R = x.shape[1], L = x.shape[2], a, r, l
    cdef const unsigned char[:, ::1] mask
    cdef bint has_mask = mask_in is not None
    if has_mask:
        mask = np.ascontiguousarray(mask_in, dtype=np.uint8)
    out_np = np.empty((G, R, L))
    cdef double[:, :, ::1] out = out_np
    cdef double mx, s, t
    for a in range(G):
        for r in range(R):
            mx = -INFINITY
            for l in range(L):
                if has_mask and mask[a, l]:
                    continue
                t = x[a, r, l] * scale
                if t > mx:
                    mx = t
            s = 0.0
            for l in range(L):
                if has_mask and mask[a, l]:
                    out[a, r, l] = 0.0
                else:
                    t = exp(x[a, r, l] * scale - mx)
                    out[a, r, l] = t
                    s += t
            for l in range(L):
                out[a, r, l] /= s
    return out_np


def softmax_bwd(g_in, out_in, double scale):
    cdef double[:, :, ::1] g = np.ascontiguousarray(g_in, dtype=np.float64)
    cdef const double[:, :, ::1] out = out_in
    cdef Py_ssize_t G = g.shape[0], R = g.shape[1], L = g.shape[2], a, r, l
    gx_np = np.empty((G, R, L))
    cdef double[:, :, ::1] gx = gx_np
    cdef double s
    for a in range(G):
        for r in range(R):
            s = 0.0
            for l in range(L):
                s += g[a, r, l] * out[a, r, l]
            for l in range(L):
                gx[a, r, l] = scale * out[a, r, l] * (g[a, r, l] - s)
    return gx_np


def adamw_update(p_in, g_in, m_in, v_in, double lr, double wd, double b1, double b2,
                 double c1, double c2, double eps):
    cdef double[::1] p = p_in.reshape(-1)
    cdef const double[::1] g = np.ascontiguousarray(g_in, dtype=np.float64).reshape(-1)
    cdef double[::1] m = m_in.reshape(-1)
    cdef double[::1] v = v_in.reshape(-1)
    cdef Py_ssize_t n = p.shape[0], i
    cdef double gi
    for i in range(n):
        gi = g[i]
        m[i] = b1 * m[i] + (1.0 - b1) * gi
        v[i] = b2 * v[i] + (1.0 - b2) * (gi * gi)
        p[i] -= lr * ((m[i] / c1) / (sqrt(v[i] / c2) + eps) + wd * p[i])


def dropout_fwd(x_in, bits_in, int threshold, double scale):
    shape = x_in.shape
    cdef const double[::1] x = np.ascontiguousarray(x_in, dtype=np.float64).reshape(-1)
    cdef const unsigned short[::1] bits = np.ascontiguousarray(bits_in).reshape(-1)
    cdef Py_ssize_t n = x.shape[0], i
    out_np = np.empty(n)
    keep_np = np.empty(n, dtype=np.bool_)
    cdef double[::1] out = out_np
    cdef unsigned char[::1] keep = keep_np.view(np.uint8)
    for i in range(n):
        if bits[i] >= threshold:
            keep[i] = 1
            out[i] = x[i] * scale
        else:
            keep[i] = 0
            out[i] = 0.0
    return out_np.reshape(shape), keep_np.reshape(shape)


def dropout_bwd(g_in, keep_in, double scale):
    shape = g_in.shape
    cdef const double[::1] g = np.ascontiguousarray(g_in, dtype=np.float64).reshape(-1)
    cdef const unsigned char[::1] keep = np.ascontiguousarray(keep_in).reshape(-1).view(np.uint8)
    cdef Py_ssize_t n = g.shape[0], i
    out_np = np.empty(n)
    cdef double[::1] out = out_np
    for i in range(n):
        out[i] = g[i] * scale if keep[i] else 0.0
    return out_np.reshape(shape)
