"""Pure-Python/numpy implementations of the hot kernels.

Each function mirrors the compiled version in ``_ckernels.pyx`` operation
for operation (same summation order, same tie handling), so both backends
produce bit-identical models.
"""
from __future__ import annotations

import numpy as np

NAME = "python"


def scan_splits(Xc, sorted_idx, col_ptr, cols, node_of_row, g, h, node_G, node_H,
                lam, gamma, min_child_weight):
    m = len(node_G)
    best_gain = np.zeros(m)
    best_col = np.full(m, -1, dtype=np.int64)
    best_thr = np.full(m, np.nan)
    best_left = np.zeros(m, dtype=bool)
    parent = node_G * node_G / (node_H + lam)
    count = np.bincount(node_of_row[node_of_row >= 0], minlength=m)
    for c in cols:
        c = int(c)
        idx = sorted_idx[col_ptr[c]:col_ptr[c + 1]]
        nd = node_of_row[idx]
        sel = nd >= 0
        idx, nd = idx[sel], nd[sel]
        if len(idx) < 2:
            continue
        order = np.argsort(nd, kind="stable")
        idx, nd = idx[order], nd[order]
        bounds = np.searchsorted(nd, np.arange(m + 1))
        for node in range(m):
            seg = idx[bounds[node]:bounds[node + 1]]
            if len(seg) < 2:
                continue
            v = Xc[c, seg]
            pos = np.flatnonzero(v[1:] != v[:-1])
            if len(pos) == 0:
                continue
            cg = np.cumsum(g[seg])
            ch = np.cumsum(h[seg])
            G, H = node_G[node], node_H[node]
            if len(seg) == count[node]:
                Gn = Hn = 0.0  # no Null rows: both defaults tie exactly
            else:
                Gn = G - cg[-1]
                Hn = H - ch[-1]
            GL, HL = cg[pos], ch[pos]
            lo, hi = v[pos], v[pos + 1]
            thr = (lo + hi) * 0.5
            thr = np.where(thr <= lo, hi, thr)

            gl_l = GL + Gn
            hl_l = HL + Hn
            gr_l = G - gl_l
            hr_l = H - hl_l
            gain_l = 0.5 * (gl_l * gl_l / (hl_l + lam) + gr_l * gr_l / (hr_l + lam) - parent[node]) - gamma
            ok_l = (hl_l >= min_child_weight) & (hr_l >= min_child_weight)

            gr_r = G - GL
            hr_r = H - HL
            gain_r = 0.5 * (GL * GL / (HL + lam) + gr_r * gr_r / (hr_r + lam) - parent[node]) - gamma
            ok_r = (HL >= min_child_weight) & (hr_r >= min_child_weight)

            gains = np.stack([np.where(ok_l, gain_l, -np.inf), np.where(ok_r, gain_r, -np.inf)], axis=1).ravel()
            j = int(np.argmax(gains))
            if gains[j] > best_gain[node]:
                best_gain[node] = gains[j]
                best_col[node] = c
                best_thr[node] = thr[j // 2]
                best_left[node] = j % 2 == 0
    return best_gain, best_col, best_thr, best_left


def predict_margin(X, feature, threshold, default_left, left, right, value, roots, base):
    n = X.shape[0]
    out = np.full(n, float(base))
    rows = np.arange(n)
    for root in roots:
        node = np.full(n, int(root), dtype=np.int64)
        active = feature[node] >= 0
        while np.any(active):
            r = rows[active]
            nd = node[active]
            x = X[r, feature[nd]]
            go_left = np.where(np.isnan(x), default_left[nd].astype(bool), x < threshold[nd])
            node[active] = np.where(go_left, left[nd], right[nd])
            active = feature[node] >= 0
        out += value[node]
    return out


# --- path-dependent TreeSHAP ---------------------------------------------------

def _extend(fi, zf, of, pw, depth, zero, one, feat):
    fi[depth] = feat
    zf[depth] = zero
    of[depth] = one
    pw[depth] = 1.0 if depth == 0 else 0.0
    for i in range(depth - 1, -1, -1):
        pw[i + 1] += one * pw[i] * (i + 1) / (depth + 1)
        pw[i] = zero * pw[i] * (depth - i) / (depth + 1)


def _unwind(fi, zf, of, pw, depth, k):
    one = of[k]
    zero = zf[k]
    nxt = pw[depth]
    for i in range(depth - 1, -1, -1):
        if one != 0.0:
            tmp = pw[i]
            pw[i] = nxt * (depth + 1) / ((i + 1) * one)
            nxt = tmp - pw[i] * zero * (depth - i) / (depth + 1)
        else:
            pw[i] = pw[i] * (depth + 1) / (zero * (depth - i))
    for i in range(k, depth):
        fi[i] = fi[i + 1]
        zf[i] = zf[i + 1]
        of[i] = of[i + 1]


def _unwound_sum(zf, of, pw, depth, k):
    one = of[k]
    zero = zf[k]
    nxt = pw[depth]
    total = 0.0
    for i in range(depth - 1, -1, -1):
        if one != 0.0:
            tmp = nxt * (depth + 1) / ((i + 1) * one)
            total += tmp
            nxt = pw[i] - tmp * zero * ((depth - i) / (depth + 1))
        else:
            total += (pw[i] / zero) / ((depth - i) / (depth + 1))
    return total


def _child_ratio(cover, child, node):
    c = cover[node]
    return cover[child] / c if c > 0 else 0.5


def _shap_recurse(x, phi, feature, threshold, default_left, left, right, value, cover,
                  node, depth, pfi, pzf, pof, ppw, zero, one, feat):
    fi = list(pfi[:depth]) + [0] * 2
    zf = list(pzf[:depth]) + [0.0] * 2
    of = list(pof[:depth]) + [0.0] * 2
    pw = list(ppw[:depth]) + [0.0] * 2
    _extend(fi, zf, of, pw, depth, zero, one, feat)
    f = feature[node]
    if f < 0:
        for i in range(1, depth + 1):
            w = _unwound_sum(zf, of, pw, depth, i)
            phi[fi[i]] += w * (of[i] - zf[i]) * value[node]
        return
    xv = x[f]
    if xv != xv:
        hot_left = bool(default_left[node])
    else:
        hot_left = xv < threshold[node]
    hot, cold = (left[node], right[node]) if hot_left else (right[node], left[node])
    hz = _child_ratio(cover, hot, node)
    cz = _child_ratio(cover, cold, node)
    inz, ino = 1.0, 1.0
    k = 0
    while k <= depth:
        if fi[k] == f:
            break
        k += 1
    if k != depth + 1:
        inz, ino = zf[k], of[k]
        _unwind(fi, zf, of, pw, depth, k)
        depth -= 1
    _shap_recurse(x, phi, feature, threshold, default_left, left, right, value, cover,
                  hot, depth + 1, fi, zf, of, pw, hz * inz, ino, f)
    _shap_recurse(x, phi, feature, threshold, default_left, left, right, value, cover,
                  cold, depth + 1, fi, zf, of, pw, cz * inz, 0.0, f)


def tree_shap(X, feature, threshold, default_left, left, right, value, cover, roots, n_features):
    n = X.shape[0]
    phi = np.zeros((n, n_features))
    feature = feature.tolist()
    threshold = threshold.tolist()
    default_left = default_left.tolist()
    left = left.tolist()
    right = right.tolist()
    value = value.tolist()
    cover = cover.tolist()
    for r in range(n):
        x = X[r].tolist()
        row = [0.0] * n_features
        for root in roots:
            _shap_recurse(x, row, feature, threshold, default_left, left, right, value, cover,
                          int(root), 0, [], [], [], [], 1.0, 1.0, -1)
        phi[r] = row
    return phi


def window_aggregate(days, ekey, row_lo, row_hi, key_ptr, key_concepts, n_concepts):
    n = len(row_lo)
    counts = np.zeros((n, n_concepts), dtype=np.int32)
    first = np.zeros((n, n_concepts), dtype=np.int32)
    last = np.zeros((n, n_concepts), dtype=np.int32)
    n_per_key = np.diff(key_ptr)
    for r in range(n):
        lo, hi = int(row_lo[r]), int(row_hi[r])
        if hi <= lo:
            continue
        keys = ekey[lo:hi]
        reps = n_per_key[keys]
        if reps.sum() == 0:
            continue
        ev = np.repeat(np.arange(lo, hi), reps)
        starts = np.repeat(key_ptr[keys], reps)
        offs = np.arange(len(ev)) - np.repeat(np.cumsum(reps) - reps, reps)
        conc = key_concepts[starts + offs]
        d = days[ev]
        counts[r] = np.bincount(conc, minlength=n_concepts)
        present = counts[r] > 0
        # events are date-sorted, so the first/last hit per concept is min/max
        f = np.full(n_concepts, np.iinfo(np.int32).max, dtype=np.int64)
        np.minimum.at(f, conc, d)
        l = np.zeros(n_concepts, dtype=np.int64)
        np.maximum.at(l, conc, d)
        first[r, present] = f[present]
        last[r, present] = l[present]
    return counts, first, last
