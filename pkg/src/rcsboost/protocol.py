"""Train/validate regimes with a structural leakage guard.

Every artifact that feeds a model (feature schema, tuning result, the model
itself) carries the set of cross-section ids it consumed. Regimes refuse to
run when any of those sets reaches a test cross-section, and ``audit.json``
records them.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cohort import CrossSectionCounts
from .evaluate import EvalReport, RankedPredictions, evaluate_predictions
from .features import FeatureMatrix, FeatureSchema, LeakageError
from .gbt import (Ensemble, GridCell, GridResult, RFEResult, RFEStep, TrainConfig, grid_search, predict_proba, rfe,
                  train)
from .rcs import SplitAssignment


class RegimeName(str, Enum):
    HOLDOUT = "HoldoutRegime"
    PROSPECTIVE = "ProspectiveRegime"
    STABILITY = "StabilityRegime"

    @property
    def slug(self) -> str:
        return {"HoldoutRegime": "holdout", "ProspectiveRegime": "prospective", "StabilityRegime": "stability"}[self.value]

    @classmethod
    def parse(cls, s: str) -> "RegimeName":
        for r in cls:
            if s in (r.value, r.slug):
                return r
        raise ValueError(f"unknown regime {s!r}")


@dataclass(frozen=True)
class Regime:
    name: RegimeName
    train_ids: frozenset
    test_ids: tuple[int, ...]
    schema_ids: frozenset

    @classmethod
    def of(cls, name: RegimeName | str, split: SplitAssignment) -> "Regime":
        name = RegimeName.parse(name) if isinstance(name, str) else name
        if name is RegimeName.HOLDOUT:
            return cls(name, split.train_ids, (split.holdout_id,), split.train_ids)
        if name is RegimeName.PROSPECTIVE:
            return cls(name, split.prospective_train_ids, (split.scoring_id,), split.train_ids)
        return cls(name, split.train_ids, (split.holdout_id, split.scoring_id), split.train_ids)

    @property
    def upstream_ids(self) -> frozenset:
        return self.train_ids | self.schema_ids


@dataclass(frozen=True)
class Provenance:
    stage: str
    cs_ids: frozenset

    def to_json(self) -> dict:
        return {"stage": self.stage, "cs_ids": sorted(self.cs_ids)}


def assert_no_leak(stage: str, consumed: Iterable[int], allowed: Iterable[int]) -> Provenance:
    consumed, allowed = frozenset(consumed), frozenset(allowed)
    bad = consumed - allowed
    if bad:
        raise LeakageError(f"{stage} consumed cross-sections {sorted(bad)} outside {sorted(allowed)}")
    return Provenance(stage, consumed)


@dataclass(frozen=True)
class TuningResult:
    config: TrainConfig
    n_rounds: int
    columns: tuple[str, ...]
    grid: GridResult
    rfe: RFEResult | None
    provenance: frozenset
    schema_fingerprint: str

    def to_json(self, names: Sequence[str]) -> dict:
        return {
            "version": 1,
            "schema_fingerprint": self.schema_fingerprint,
            "provenance_cs_ids": sorted(self.provenance),
            "config": self.config.to_json(),
            "n_rounds": self.n_rounds,
            "columns": list(self.columns),
            "grid": self.grid.to_json(),
            "rfe": self.rfe.to_json(names) if self.rfe else None,
        }

    @classmethod
    def from_json(cls, d: Mapping, names: Sequence[str]) -> "TuningResult":
        if d.get("version") != 1:
            raise ValueError(f"unsupported tuning version {d.get('version')!r}")
        idx = {n: j for j, n in enumerate(names)}
        g = d["grid"]
        table = tuple(GridCell(c["index"], TrainConfig.from_json(c["config"]), c["auprc"], c["n_trees"], c["error"])
                      for c in g["table"])
        grid = GridResult(TrainConfig.from_json(g["best"]), g["best_index"], g["best_n_trees"], table)
        r = None
        if d.get("rfe"):
            steps = tuple(RFEStep(s["n_features"], tuple(idx[n] for n in s["columns"]), s["auprc"], s["n_trees"])
                          for s in d["rfe"]["trajectory"])
            r = RFEResult(tuple(idx[n] for n in d["rfe"]["selected"]), steps)
        return cls(TrainConfig.from_json(d["config"]), int(d["n_rounds"]), tuple(d["columns"]), grid, r,
                   frozenset(d["provenance_cs_ids"]), d["schema_fingerprint"])


def validation_fold(patient_id: str, seed: int, n_folds: int = 5) -> int:
    h = hashlib.blake2b(f"{seed}:{patient_id}".encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") % n_folds


def tuning_split(m: FeatureMatrix, seed: int) -> tuple[FeatureMatrix, FeatureMatrix]:
    """Patient-grouped 80/20 split; a patient's rows never straddle the two parts."""
    fold = np.array([validation_fold(pid, seed) for _, pid in m.row_keys])
    return m.take(np.flatnonzero(fold != 0)), m.take(np.flatnonzero(fold == 0))


def protected_columns(schema: FeatureSchema) -> list[int]:
    return [j for j, c in enumerate(schema.columns) if c.concept is None]


def tune(train_matrix: FeatureMatrix, split: SplitAssignment, grid: Sequence[TrainConfig], *, seed: int,
         use_rfe: bool = True, drop_fraction: float = 0.2, min_features: int = 8, threads: int = 1) -> TuningResult:
    consumed = frozenset(train_matrix.cs_ids.tolist())
    assert_no_leak("tuning", consumed, split.train_ids)
    assert_no_leak("schema", train_matrix.schema.provenance, split.train_ids)
    fit, val = tuning_split(train_matrix, seed)
    gres = grid_search(fit, val, grid, threads=threads)
    names = train_matrix.schema.names
    cfg = gres.best
    if use_rfe:
        rres = rfe(fit, val, cfg, drop_fraction, min_features, protected=protected_columns(train_matrix.schema),
                   threads=threads)
        best = next(s for s in rres.trajectory if s.columns == rres.columns)
        cols, n_rounds = rres.columns, best.n_trees
    else:
        rres = None
        cols, n_rounds = tuple(range(len(names))), gres.best_n_trees
    return TuningResult(cfg, max(n_rounds, 1), tuple(names[j] for j in cols), gres, rres, consumed,
                        train_matrix.schema.fingerprint)


@dataclass
class RegimeResult:
    regime: Regime
    model: Ensemble
    reports: dict[int, EvalReport]
    audit: dict = field(default_factory=dict)


def final_config(t: TuningResult) -> TrainConfig:
    return t.config.replace(n_rounds=t.n_rounds, early_stopping_rounds=None)


def train_regime(matrix: FeatureMatrix, regime: Regime, split: SplitAssignment, tuning: TuningResult, *,
                 threads: int = 1) -> tuple[Ensemble, dict]:
    schema = matrix.schema
    assert_no_leak("schema", schema.provenance, regime.schema_ids)
    assert_no_leak("tuning", tuning.provenance, regime.schema_ids)
    if tuning.schema_fingerprint != schema.fingerprint:
        raise LeakageError("tuning result was produced for a different feature schema")
    train_m = matrix.for_cross_sections(regime.train_ids)
    missing = set(regime.train_ids) - set(train_m.cs_ids.tolist())
    if missing:
        raise ValueError(f"feature matrix lacks training cross-sections {sorted(missing)}")
    model_prov = assert_no_leak("model", train_m.cs_ids.tolist(), regime.train_ids)
    cols = [schema.index(n) for n in tuning.columns]
    model = train(train_m, final_config(tuning), columns=cols, threads=threads)
    audit = audit_record(regime, [
        Provenance("schema", schema.provenance),
        Provenance("tuning", tuning.provenance),
        model_prov,
    ])
    return model, audit


def audit_record(regime: Regime, trail: Sequence[Provenance]) -> dict:
    test = set(regime.test_ids)
    for p in trail:
        leaked = test & set(p.cs_ids)
        if leaked:
            raise LeakageError(f"{p.stage} consumed test cross-sections {sorted(leaked)}")
    return {
        "version": 1,
        "regime": regime.name.value,
        "train_cs_ids": sorted(regime.train_ids),
        "test_cs_ids": list(regime.test_ids),
        "upstream": [p.to_json() for p in trail],
        "schema_and_tuning_cs_ids": sorted(set().union(*(p.cs_ids for p in trail if p.stage in ("schema", "tuning")))),
        "passed": True,
    }


def evaluate_regime(model: Ensemble, matrix: FeatureMatrix, regime: Regime, counts: Mapping[int, CrossSectionCounts],
                    benchmark_flags: Mapping[str, np.ndarray] | None = None, level: float = 0.95) -> dict[int, EvalReport]:
    """One report per test cross-section. ``benchmark_flags`` align with ``matrix`` rows."""
    out = {}
    cs_ids = matrix.cs_ids
    for cid in regime.test_ids:
        rows = np.flatnonzero(cs_ids == cid)
        m = matrix.take(rows)
        c = counts[cid]
        preds = RankedPredictions(predict_proba(model, m), m.y, c.n_controls_full, c.n_controls_sampled)
        flags = {k: np.asarray(v)[rows] for k, v in (benchmark_flags or {}).items()}
        out[cid] = evaluate_predictions(preds, cs_id=cid, benchmark_flags=flags, level=level)
    return out


def run_regime(matrix: FeatureMatrix, regime: Regime, split: SplitAssignment, tuning: TuningResult,
               counts: Mapping[int, CrossSectionCounts], benchmark_flags: Mapping[str, np.ndarray] | None = None, *,
               threads: int = 1) -> RegimeResult:
    model, audit = train_regime(matrix, regime, split, tuning, threads=threads)
    reports = evaluate_regime(model, matrix, regime, counts, benchmark_flags)
    return RegimeResult(regime, model, reports, audit)
