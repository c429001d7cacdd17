"""Exact greedy, level-wise gradient boosting with a logistic objective.

Null cells never enter the sorted column scans; each candidate split tries
sending all Null rows left and then right, which gives every internal node
its learned default direction.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import _kernels
from ..evaluate import average_precision
from ..features import FeatureMatrix
from .model import Ensemble, ModelError, SchemaMismatch, Tree, TrainConfig, sigmoid


@dataclass(frozen=True)
class Split:
    column: int
    threshold: float
    default_left: bool
    gain: float


class Presorted:
    """Column-major copy of X plus, per column, present rows sorted by value then row."""

    def __init__(self, X: np.ndarray):
        X = np.asarray(X, dtype=np.float64)
        self.n_rows, self.n_cols = X.shape
        self.X = np.ascontiguousarray(X)
        self.Xc = np.ascontiguousarray(X.T)
        cols_of, rows_of = np.nonzero(~np.isnan(self.Xc))
        vals = self.Xc[cols_of, rows_of]
        order = np.lexsort((rows_of, vals, cols_of))
        self.sorted_idx = np.ascontiguousarray(rows_of[order], dtype=np.int64)
        self.col_ptr = np.zeros(self.n_cols + 1, dtype=np.int64)
        np.cumsum(np.bincount(cols_of, minlength=self.n_cols), out=self.col_ptr[1:])


def _merge(results, m: int):
    gain = np.zeros(m)
    col = np.full(m, -1, dtype=np.int64)
    thr = np.full(m, np.nan)
    left = np.zeros(m, dtype=bool)
    for bg, bc, bt, bl in results:
        better = bg > gain
        gain = np.where(better, bg, gain)
        col = np.where(better, bc, col)
        thr = np.where(better, bt, thr)
        left = np.where(better, bl, left)
    return gain, col, thr, left


def scan(pre: Presorted, cols: np.ndarray, node_of_row: np.ndarray, g: np.ndarray, h: np.ndarray,
         node_G: np.ndarray, node_H: np.ndarray, cfg: TrainConfig, pool: ThreadPoolExecutor | None = None,
         n_chunks: int = 1):
    """Best split per frontier node. Chunks are merged in column order, so the
    result does not depend on how many threads did the work."""
    kern = _kernels.backend()
    m = len(node_G)
    args = (float(cfg.reg_lambda), float(cfg.gamma), float(cfg.min_child_weight))

    def run(chunk):
        return kern.scan_splits(pre.Xc, pre.sorted_idx, pre.col_ptr, np.ascontiguousarray(chunk, dtype=np.int64),
                                node_of_row, g, h, node_G, node_H, *args)

    if pool is None or n_chunks <= 1 or len(cols) < 2:
        return _merge([run(cols)], m)
    chunks = [c for c in np.array_split(cols, min(n_chunks, len(cols))) if len(c)]
    return _merge(list(pool.map(run, chunks)), m)


def find_best_split(X, g, h, rows, column: int, *, reg_lambda: float = 1.0, gamma: float = 0.0,
                    min_child_weight: float = 0.0) -> Split | None:
    """Best split of ``rows`` on one column; ``None`` means NoSplit."""
    rows = np.asarray(rows, dtype=np.int64)
    if len(rows) == 0:
        raise ModelError("find_best_split needs at least one row")
    X = np.asarray(X, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    h = np.ascontiguousarray(h, dtype=np.float64)
    pre = Presorted(X[:, [column]])
    node = np.full(X.shape[0], -1, dtype=np.int64)
    node[rows] = 0
    zeros = np.zeros(len(rows), np.int64)
    G = np.bincount(zeros, weights=g[rows], minlength=1)
    H = np.bincount(zeros, weights=h[rows], minlength=1)
    cfg = TrainConfig(reg_lambda=reg_lambda, gamma=gamma, min_child_weight=min_child_weight)
    gain, col, thr, left = scan(pre, np.array([0]), node, g, h, G, H, cfg)
    if col[0] < 0:
        return None
    return Split(column, float(thr[0]), bool(left[0]), float(gain[0]))


def _leaf_weight(G: float, H: float, cfg: TrainConfig) -> float:
    denom = H + cfg.reg_lambda
    if denom <= 0.0:
        return 0.0
    return -G / denom * cfg.learning_rate


def grow_tree(pre: Presorted, g: np.ndarray, h: np.ndarray, cfg: TrainConfig, cols: np.ndarray,
              pool: ThreadPoolExecutor | None = None, n_chunks: int = 1) -> tuple[Tree, np.ndarray]:
    """One level-wise tree. Returns the tree and each row's leaf id."""
    n = pre.n_rows
    feature, threshold, default_left, left, right, value, cover, gain = ([] for _ in range(8))

    def new_node():
        for lst, v in ((feature, -1), (threshold, np.nan), (default_left, 0), (left, -1), (right, -1),
                       (value, 0.0), (cover, 0.0), (gain, 0.0)):
            lst.append(v)
        return len(feature) - 1

    frontier = [new_node()]
    node_of_row = np.zeros(n, dtype=np.int64)
    row_leaf = np.full(n, -1, dtype=np.int64)
    for depth in range(cfg.max_depth + 1):
        m = len(frontier)
        active = node_of_row >= 0
        nodes_active = node_of_row[active]
        node_G = np.bincount(nodes_active, weights=g[active], minlength=m)
        node_H = np.bincount(nodes_active, weights=h[active], minlength=m)
        if depth < cfg.max_depth and len(cols):
            b_gain, b_col, b_thr, b_left = scan(pre, cols, node_of_row, g, h, node_G, node_H, cfg, pool, n_chunks)
        else:
            b_col = np.full(m, -1)
        next_frontier = []
        child_base = np.full(m, -1, dtype=np.int64)
        for nd, gid in enumerate(frontier):
            cover[gid] = float(node_H[nd])
            if b_col[nd] < 0:
                value[gid] = _leaf_weight(float(node_G[nd]), float(node_H[nd]), cfg)
                continue
            l_id, r_id = new_node(), new_node()
            feature[gid] = int(b_col[nd])
            threshold[gid] = float(b_thr[nd])
            default_left[gid] = int(bool(b_left[nd]))
            left[gid], right[gid] = l_id, r_id
            gain[gid] = float(b_gain[nd])
            child_base[nd] = len(next_frontier)
            next_frontier.extend((l_id, r_id))

        frontier_arr = np.asarray(frontier, dtype=np.int64)
        rows = np.flatnonzero(active)
        nd = node_of_row[rows]
        is_split = child_base[nd] >= 0
        leaf_rows = rows[~is_split]
        row_leaf[leaf_rows] = frontier_arr[nd[~is_split]]
        node_of_row[leaf_rows] = -1
        srows, snd = rows[is_split], nd[is_split]
        if len(srows):
            col = b_col[snd]
            x = pre.X[srows, col]
            go_left = np.where(np.isnan(x), b_left[snd], x < b_thr[snd])
            node_of_row[srows] = child_base[snd] + np.where(go_left, 0, 1)
        frontier = next_frontier
        if not frontier:
            break
    tree = Tree(
        np.asarray(feature, dtype=np.int32), np.asarray(threshold, dtype=np.float64),
        np.asarray(default_left, dtype=np.uint8), np.asarray(left, dtype=np.int32),
        np.asarray(right, dtype=np.int32), np.asarray(value, dtype=np.float64),
        np.asarray(cover, dtype=np.float64), np.asarray(gain, dtype=np.float64),
    )
    return tree, row_leaf


def _as_xy(data) -> tuple[np.ndarray, np.ndarray, str, tuple[str, ...]]:
    if isinstance(data, FeatureMatrix):
        return data.to_dense(), data.y.astype(np.float64), data.schema.fingerprint, tuple(data.schema.names)
    X, y = data
    X = np.asarray(X, dtype=np.float64)
    return X, np.asarray(y, dtype=np.float64), "", tuple(f"x{j}" for j in range(X.shape[1]))


def _tree_margin(tree: Tree, X: np.ndarray) -> np.ndarray:
    return _kernels.backend().predict_margin(
        X, tree.feature, tree.threshold, tree.default_left, tree.left, tree.right, tree.value,
        np.zeros(1, dtype=np.int64), 0.0,
    )


def train(data, config: TrainConfig, validation=None, *, columns: Sequence[int] | None = None,
          threads: int = 1, callback=None) -> Ensemble:
    """Fit an ensemble. ``data``/``validation`` are FeatureMatrix objects or (X, y) pairs."""
    X, y, fp, names = _as_xy(data)
    n, p = X.shape
    if n == 0 or y.min() == y.max():
        raise ModelError("training data must contain both classes")
    if validation is not None:
        Xv, yv, fpv, _ = _as_xy(validation)
        if fpv != fp or Xv.shape[1] != p:
            raise SchemaMismatch("validation matrix schema differs from training schema")
        if yv.min() == yv.max():
            raise ModelError("validation data must contain both classes")
        Xv = np.ascontiguousarray(Xv)
    cols = np.arange(p, dtype=np.int64) if columns is None else np.array(sorted(set(columns)), dtype=np.int64)
    if len(cols) and (cols[0] < 0 or cols[-1] >= p):
        raise ModelError("column subset out of range")

    base = config.base_score
    if config.base_score_from_prevalence:
        prev = float(y.mean())
        base = math.log(prev / (1.0 - prev))
    pre = Presorted(X)
    margin = np.full(n, base)
    val_margin = np.full(len(Xv), base) if validation is not None else None
    trees: list[Tree] = []
    history: list[float] = []
    best_round, best_ap = 0, -math.inf
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for rnd in range(config.n_rounds):
            prob = sigmoid(margin)
            g = np.ascontiguousarray(prob - y)
            h = np.ascontiguousarray(prob * (1.0 - prob))
            tree, leaves = grow_tree(pre, g, h, config, cols, pool, threads)
            trees.append(tree)
            margin = margin + tree.value[leaves]
            if callback is not None:
                callback(rnd, margin)
            if validation is None:
                continue
            val_margin = val_margin + _tree_margin(tree, Xv)
            ap = average_precision(val_margin, yv)
            history.append(ap)
            if ap > best_ap:
                best_ap, best_round = ap, rnd + 1
            elif config.early_stopping_rounds is not None and rnd + 1 - best_round >= config.early_stopping_rounds:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    stopped = validation is not None and config.early_stopping_rounds is not None
    if stopped:
        trees = trees[:best_round]
    return Ensemble(tuple(trees), float(base), float(config.learning_rate), fp, p, names, config,
                    best_round if stopped else None, tuple(history))
