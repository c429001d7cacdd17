"""Path-dependent TreeSHAP attributions and concept-level importance."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .features import FeatureMatrix, FeatureSchema
from .gbt.model import Ensemble, SchemaMismatch, Tree, _dense


@dataclass(frozen=True)
class AttributionRow:
    phi: np.ndarray  # margin units, one per column
    base_value: float

    @property
    def margin(self) -> float:
        return self.base_value + float(self.phi.sum())


@dataclass(frozen=True)
class Attributions:
    phi: np.ndarray  # rows x columns
    base_value: float

    def __getitem__(self, i: int) -> AttributionRow:
        return AttributionRow(self.phi[i], self.base_value)

    def __len__(self) -> int:
        return self.phi.shape[0]


def tree_expectation(tree: Tree, node: int = 0) -> float:
    """Cover-weighted mean leaf value, using the same child weights as the recursion."""
    if tree.feature[node] < 0:
        return float(tree.value[node])
    l, r = int(tree.left[node]), int(tree.right[node])
    c = tree.cover[node]
    wl, wr = (tree.cover[l] / c, tree.cover[r] / c) if c > 0 else (0.5, 0.5)
    return wl * tree_expectation(tree, l) + wr * tree_expectation(tree, r)


def expected_value(ens: Ensemble) -> float:
    return float(ens.base_score + sum(tree_expectation(t) for t in ens.trees))


def tree_shap(ens: Ensemble, X, background: FeatureMatrix | None = None) -> Attributions:
    """Attributions for every row of ``X``.

    The path-dependent game needs only the stored covers, so ``background``
    is checked for schema conformance and otherwise unused.
    """
    if isinstance(X, FeatureMatrix):
        ens.check(X)
    if background is not None:
        ens.check(background)
    X = _dense(X)
    if X.shape[1] != ens.n_features:
        raise SchemaMismatch(f"expected {ens.n_features} columns, got {X.shape[1]}")
    base = expected_value(ens)
    if ens.n_trees == 0 or ens.n_features == 0:
        return Attributions(np.zeros((X.shape[0], ens.n_features)), base)
    f = ens.flat
    max_depth = max(t.depth for t in ens.trees)
    kern = _kernels.backend()
    args = (X, f.feature, f.threshold, f.default_left, f.left, f.right, f.value, f.cover, f.roots, ens.n_features)
    phi = kern.tree_shap(*args, max_depth) if kern.NAME == "cython" else kern.tree_shap(*args)
    return Attributions(phi, base)


def explain_row(ens: Ensemble, row) -> AttributionRow:
    return tree_shap(ens, np.asarray(row, dtype=float)[None, :])[0]


@dataclass(frozen=True)
class ImportanceEntry:
    concept: str
    attribute: str
    mean_abs_shap: float
    percent_of_total: float


@dataclass(frozen=True)
class FeatureImportanceReport:
    concepts: tuple[ImportanceEntry, ...]  # attribute == "Total", sorted descending
    attributes: tuple[ImportanceEntry, ...]
    n_rows: int

    @property
    def ranking(self) -> list[str]:
        return [e.concept for e in self.concepts]

    def to_json(self) -> dict:
        return {
            "n_rows": self.n_rows,
            "concepts": [{"concept": e.concept, "mean_abs_shap": e.mean_abs_shap,
                          "percent_of_total": e.percent_of_total} for e in self.concepts],
        }


def aggregate_importance(phi, schema: FeatureSchema | Sequence) -> FeatureImportanceReport:
    """Mean |phi| per column, summed per concept and expressed as percent of the total."""
    phi = phi.phi if isinstance(phi, Attributions) else np.asarray(phi, dtype=float)
    if phi.ndim != 2 or phi.shape[0] == 0:
        raise ValueError("need at least one attribution row")
    cols = schema.columns if isinstance(schema, FeatureSchema) else tuple(schema)
    if len(cols) != phi.shape[1]:
        raise SchemaMismatch("attribution width differs from schema")
    mean_abs = np.abs(phi).mean(axis=0)
    total = float(mean_abs.sum())
    per_concept: dict[str, float] = {}
    attrs = []
    for j, col in enumerate(cols):
        per_concept[col.group] = per_concept.get(col.group, 0.0) + float(mean_abs[j])
        attrs.append((col.group, col.attribute.value, float(mean_abs[j])))

    def pct(v):
        return 100.0 * v / total if total > 0 else 0.0

    order = sorted(per_concept, key=lambda c: (-per_concept[c], c))
    rank = {c: i for i, c in enumerate(order)}
    concepts = tuple(ImportanceEntry(c, "Total", per_concept[c], pct(per_concept[c])) for c in order)
    attributes = tuple(
        ImportanceEntry(c, a, v, pct(v)) for c, a, v in sorted(attrs, key=lambda t: (rank[t[0]], -t[2], t[1]))
    )
    return FeatureImportanceReport(concepts, attributes, int(phi.shape[0]))


def write_importance(report: FeatureImportanceReport, path: str | Path) -> None:
    by_concept: dict[str, list[ImportanceEntry]] = {}
    for e in report.attributes:
        by_concept.setdefault(e.concept, []).append(e)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["concept", "attribute", "mean_abs_shap", "percent_of_total"])
        for c in report.concepts:
            w.writerow((c.concept, c.attribute, repr(c.mean_abs_shap), repr(c.percent_of_total)))
            for e in by_concept.get(c.concept, []):
                w.writerow((e.concept, e.attribute, repr(e.mean_abs_shap), repr(e.percent_of_total)))
