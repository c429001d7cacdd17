# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, nonecheck=False
"""Compiled hot kernels. Semantics match ``_pykernels`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport isnan, INFINITY
from libc.stdlib cimport malloc, free

cnp.import_array()

NAME = "cython"


def scan_splits(const double[:, ::1] Xc, const long[::1] sorted_idx, const long[::1] col_ptr,
                const long[::1] cols, const long[::1] node_of_row,
                const double[::1] g, const double[::1] h,
                const double[::1] node_G, const double[::1] node_H,
                double lam, double gamma, double min_child_weight):
    cdef Py_ssize_t m = node_G.shape[0]
    cdef Py_ssize_t nc = cols.shape[0]
    best_gain_a = np.zeros(m)
    best_col_a = np.full(m, -1, dtype=np.int64)
    best_thr_a = np.full(m, np.nan)
    best_left_a = np.zeros(m, dtype=np.uint8)
    cdef double[::1] best_gain = best_gain_a
    cdef long[::1] best_col = best_col_a
    cdef double[::1] best_thr = best_thr_a
    cdef unsigned char[::1] best_left = best_left_a

    gp_a = np.zeros(m)
    hp_a = np.zeros(m)
    gl_a = np.zeros(m)
    hl_a = np.zeros(m)
    last_a = np.zeros(m)
    seen_a = np.zeros(m, dtype=np.uint8)
    parent_a = np.empty(m)
    count_a = np.zeros(m, dtype=np.int64)
    present_a = np.zeros(m, dtype=np.int64)
    cdef long[::1] count = count_a
    cdef long[::1] present = present_a
    cdef double[::1] Gp = gp_a
    cdef double[::1] Hp = hp_a
    cdef double[::1] GLs = gl_a
    cdef double[::1] HLs = hl_a
    cdef double[::1] last = last_a
    cdef unsigned char[::1] seen = seen_a
    cdef double[::1] parent = parent_a

    cdef Py_ssize_t ci, p, nd, i, c
    cdef double v, thr, G, H, Gn, Hn, GL, HL, gl, hl, gr, hr, gain
    for nd in range(m):
        parent[nd] = node_G[nd] * node_G[nd] / (node_H[nd] + lam)

    with nogil:
        for i in range(node_of_row.shape[0]):
            if node_of_row[i] >= 0:
                count[node_of_row[i]] += 1
        for ci in range(nc):
            c = cols[ci]
            for nd in range(m):
                Gp[nd] = 0.0
                Hp[nd] = 0.0
                GLs[nd] = 0.0
                HLs[nd] = 0.0
                seen[nd] = 0
                present[nd] = 0
            for p in range(col_ptr[c], col_ptr[c + 1]):
                i = sorted_idx[p]
                nd = node_of_row[i]
                if nd < 0:
                    continue
                Gp[nd] += g[i]
                Hp[nd] += h[i]
                present[nd] += 1
            for p in range(col_ptr[c], col_ptr[c + 1]):
                i = sorted_idx[p]
                nd = node_of_row[i]
                if nd < 0:
                    continue
                v = Xc[c, i]
                if seen[nd] and v != last[nd]:
                    G = node_G[nd]
                    H = node_H[nd]
                    if present[nd] == count[nd]:
                        # no Null rows: both defaults are the same partition, so they must tie exactly
                        Gn = 0.0
                        Hn = 0.0
                    else:
                        Gn = G - Gp[nd]
                        Hn = H - Hp[nd]
                    GL = GLs[nd]
                    HL = HLs[nd]
                    thr = (last[nd] + v) * 0.5
                    if thr <= last[nd]:
                        thr = v
                    # missing values to the left
                    gl = GL + Gn
                    hl = HL + Hn
                    gr = G - gl
                    hr = H - hl
                    if hl >= min_child_weight and hr >= min_child_weight:
                        gain = 0.5 * (gl * gl / (hl + lam) + gr * gr / (hr + lam) - parent[nd]) - gamma
                        if gain > best_gain[nd]:
                            best_gain[nd] = gain
                            best_col[nd] = c
                            best_thr[nd] = thr
                            best_left[nd] = 1
                    # missing values to the right
                    gr = G - GL
                    hr = H - HL
                    if HL >= min_child_weight and hr >= min_child_weight:
                        gain = 0.5 * (GL * GL / (HL + lam) + gr * gr / (hr + lam) - parent[nd]) - gamma
                        if gain > best_gain[nd]:
                            best_gain[nd] = gain
                            best_col[nd] = c
                            best_thr[nd] = thr
                            best_left[nd] = 0
                GLs[nd] += g[i]
                HLs[nd] += h[i]
                last[nd] = v
                seen[nd] = 1
    return best_gain_a, best_col_a, best_thr_a, best_left_a.astype(bool)


cdef inline long _leaf_of(const double[:, ::1] X, Py_ssize_t r, long node,
                          const int[::1] feature, const double[::1] threshold,
                          const unsigned char[::1] default_left,
                          const int[::1] left, const int[::1] right) noexcept nogil:
    cdef double x
    while feature[node] >= 0:
        x = X[r, feature[node]]
        if isnan(x):
            node = left[node] if default_left[node] else right[node]
        elif x < threshold[node]:
            node = left[node]
        else:
            node = right[node]
    return node


def predict_margin(const double[:, ::1] X, const int[::1] feature, const double[::1] threshold,
                   const unsigned char[::1] default_left, const int[::1] left, const int[::1] right,
                   const double[::1] value, const long[::1] roots, double base):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t nt = roots.shape[0]
    out_a = np.empty(n)
    cdef double[::1] out = out_a
    cdef Py_ssize_t r, t
    cdef double acc
    with nogil:
        for r in range(n):
            acc = base
            for t in range(nt):
                acc += value[_leaf_of(X, r, roots[t], feature, threshold, default_left, left, right)]
            out[r] = acc
    return out_a


# --- path-dependent TreeSHAP ---------------------------------------------------

cdef struct PathElem:
    long feat
    double zero
    double one
    double pweight


cdef inline void _extend(PathElem* path, long depth, double zero, double one, long feat) noexcept nogil:
    cdef long i
    path[depth].feat = feat
    path[depth].zero = zero
    path[depth].one = one
    path[depth].pweight = 1.0 if depth == 0 else 0.0
    i = depth - 1
    while i >= 0:
        path[i + 1].pweight += one * path[i].pweight * (i + 1) / (depth + 1)
        path[i].pweight = zero * path[i].pweight * (depth - i) / (depth + 1)
        i -= 1


cdef inline void _unwind(PathElem* path, long depth, long k) noexcept nogil:
    cdef double one = path[k].one
    cdef double zero = path[k].zero
    cdef double nxt = path[depth].pweight
    cdef double tmp
    cdef long i = depth - 1
    while i >= 0:
        if one != 0.0:
            tmp = path[i].pweight
            path[i].pweight = nxt * (depth + 1) / ((i + 1) * one)
            nxt = tmp - path[i].pweight * zero * (depth - i) / (depth + 1)
        else:
            path[i].pweight = path[i].pweight * (depth + 1) / (zero * (depth - i))
        i -= 1
    for i in range(k, depth):
        path[i].feat = path[i + 1].feat
        path[i].zero = path[i + 1].zero
        path[i].one = path[i + 1].one


cdef inline double _unwound_sum(PathElem* path, long depth, long k) noexcept nogil:
    cdef double one = path[k].one
    cdef double zero = path[k].zero
    cdef double nxt = path[depth].pweight
    cdef double total = 0.0
    cdef double tmp
    cdef long i = depth - 1
    while i >= 0:
        if one != 0.0:
            tmp = nxt * (depth + 1) / ((i + 1) * one)
            total += tmp
            nxt = path[i].pweight - tmp * zero * ((depth - i) / <double>(depth + 1))
        else:
            total += (path[i].pweight / zero) / ((depth - i) / <double>(depth + 1))
        i -= 1
    return total


cdef void _recurse(const double* x, double* phi,
                   const int[::1] feature, const double[::1] threshold,
                   const unsigned char[::1] default_left, const int[::1] left, const int[::1] right,
                   const double[::1] value, const double[::1] cover,
                   long node, long depth, PathElem* parent_path,
                   double zero, double one, long feat) noexcept nogil:
    cdef PathElem* path = parent_path + depth + 1
    cdef long i, k, f, hot, cold
    cdef double w, xv, hz, cz, inz, ino, c
    for i in range(depth):
        path[i] = parent_path[i]
    _extend(path, depth, zero, one, feat)
    f = feature[node]
    if f < 0:
        for i in range(1, depth + 1):
            w = _unwound_sum(path, depth, i)
            phi[path[i].feat] += w * (path[i].one - path[i].zero) * value[node]
        return
    xv = x[f]
    if isnan(xv):
        if default_left[node]:
            hot = left[node]
            cold = right[node]
        else:
            hot = right[node]
            cold = left[node]
    elif xv < threshold[node]:
        hot = left[node]
        cold = right[node]
    else:
        hot = right[node]
        cold = left[node]
    c = cover[node]
    if c > 0:
        hz = cover[hot] / c
        cz = cover[cold] / c
    else:
        hz = 0.5
        cz = 0.5
    inz = 1.0
    ino = 1.0
    k = 0
    while k <= depth:
        if path[k].feat == f:
            break
        k += 1
    if k != depth + 1:
        inz = path[k].zero
        ino = path[k].one
        _unwind(path, depth, k)
        depth -= 1
    _recurse(x, phi, feature, threshold, default_left, left, right, value, cover,
             hot, depth + 1, path, hz * inz, ino, f)
    _recurse(x, phi, feature, threshold, default_left, left, right, value, cover,
             cold, depth + 1, path, cz * inz, 0.0, f)


def tree_shap(const double[:, ::1] X, const int[::1] feature, const double[::1] threshold,
              const unsigned char[::1] default_left, const int[::1] left, const int[::1] right,
              const double[::1] value, const double[::1] cover, const long[::1] roots,
              long n_features, long max_depth=64):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t nt = roots.shape[0]
    phi_a = np.zeros((n, n_features))
    cdef double[:, ::1] phi = phi_a
    cdef long size = (max_depth + 2) * (max_depth + 3) // 2
    cdef PathElem* path = <PathElem*> malloc(size * sizeof(PathElem))
    if path == NULL:
        raise MemoryError()
    cdef Py_ssize_t r, t
    try:
        with nogil:
            for r in range(n):
                for t in range(nt):
                    _recurse(&X[r, 0], &phi[r, 0], feature, threshold, default_left, left, right,
                             value, cover, roots[t], 0, path, 1.0, 1.0, -1)
    finally:
        free(path)
    return phi_a


def window_aggregate(const int[::1] days, const long[::1] ekey, const long[::1] row_lo,
                     const long[::1] row_hi, const long[::1] key_ptr, const long[::1] key_concepts,
                     long n_concepts):
    cdef Py_ssize_t n = row_lo.shape[0]
    counts_a = np.zeros((n, n_concepts), dtype=np.int32)
    first_a = np.zeros((n, n_concepts), dtype=np.int32)
    last_a = np.zeros((n, n_concepts), dtype=np.int32)
    cdef int[:, ::1] counts = counts_a
    cdef int[:, ::1] first = first_a
    cdef int[:, ::1] last = last_a
    cdef Py_ssize_t r, e, j
    cdef long key, c
    with nogil:
        for r in range(n):
            for e in range(row_lo[r], row_hi[r]):
                key = ekey[e]
                for j in range(key_ptr[key], key_ptr[key + 1]):
                    c = key_concepts[j]
                    if counts[r, c] == 0:
                        first[r, c] = days[e]
                    counts[r, c] += 1
                    last[r, c] = days[e]
    return counts_a, first_a, last_a
