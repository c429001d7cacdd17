"""Sparse (concept x attribute) features over cross-section lookbacks.

Frequency cells default to 0 and date-difference cells default to Null
(NaN), so a row only stores cells for concepts that actually occur in its
lookback plus the two demographic cells.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import _kernels
from .claims import KIND_INDEX, KINDS, Kind, PatientRecord, Population, Sex
from .cohort import _KEY_STRIDE, Label, LabeledCrossSection
from .rcs import CrossSection, SplitAssignment

NULL_TOKEN = "NA"


class SchemaError(ValueError):
    pass


class LeakageError(RuntimeError):
    """A schema, tuning result or model consumed rows it must not see."""


class Origin(str, Enum):
    KD = "KD"
    DD = "DD"


class Attribute(str, Enum):
    FREQUENCY = "Frequency"
    DAYS_INDEX_TO_FIRST = "DaysIndexToFirst"
    DAYS_INDEX_TO_LAST = "DaysIndexToLast"
    DAYS_FIRST_TO_LAST = "DaysFirstToLast"
    AGE_AT_INDEX = "AgeAtIndex"
    SEX_IS_FEMALE = "SexIsFemale"
    VALUE = "Value"  # generic numeric column for externally built matrices


CONCEPT_ATTRIBUTES = (
    Attribute.FREQUENCY,
    Attribute.DAYS_INDEX_TO_FIRST,
    Attribute.DAYS_INDEX_TO_LAST,
    Attribute.DAYS_FIRST_TO_LAST,
)
DEMOGRAPHIC_ATTRIBUTES = (Attribute.AGE_AT_INDEX, Attribute.SEX_IS_FEMALE)
_ATTR_ORDER = {a: i for i, a in enumerate(Attribute)}
_ORIGIN_ORDER = {Origin.KD: 0, Origin.DD: 1}
DEMOGRAPHIC_CONCEPTS = {Attribute.AGE_AT_INDEX: "Age", Attribute.SEX_IS_FEMALE: "Sex"}


@dataclass(frozen=True)
class ConceptDef:
    name: str
    kind: Kind
    codes: frozenset
    origin: Origin = Origin.KD

    def __post_init__(self):
        if not self.codes:
            raise SchemaError(f"concept {self.name!r} has no codes")
        object.__setattr__(self, "codes", frozenset(self.codes))
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "origin", Origin(self.origin))

    @property
    def key(self) -> str:
        return f"{self.origin.value}:{self.name}"

    def to_json(self) -> dict:
        return {"name": self.name, "kind": self.kind.value, "codes": sorted(self.codes), "origin": self.origin.value}

    @classmethod
    def from_json(cls, d: Mapping) -> "ConceptDef":
        return cls(d["name"], Kind(d["kind"]), frozenset(d["codes"]), Origin(d.get("origin", "KD")))


@dataclass(frozen=True)
class FeatureColumn:
    concept: ConceptDef | None
    attribute: Attribute

    @property
    def name(self) -> str:
        if self.concept is None:
            return self.attribute.value
        return f"{self.concept.key}:{self.attribute.value}"

    @property
    def group(self) -> str:
        """Concept label used when aggregating attributions."""
        if self.concept is None:
            return DEMOGRAPHIC_CONCEPTS.get(self.attribute, self.attribute.value)
        return self.concept.key

    @property
    def default(self) -> float:
        return 0.0 if self.attribute is Attribute.FREQUENCY else np.nan

    def sort_key(self):
        if self.concept is None:
            return (2, "", _ATTR_ORDER[self.attribute])
        return (_ORIGIN_ORDER[self.concept.origin], self.concept.name, _ATTR_ORDER[self.attribute])


@dataclass(frozen=True)
class FeatureSchema:
    columns: tuple[FeatureColumn, ...]
    provenance: frozenset = frozenset()

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate column names")
        seen: dict = {}
        for c in self.columns:
            if c.concept is not None:
                prev = seen.setdefault((c.concept.name, c.concept.origin), c.concept)
                if prev != c.concept:
                    raise SchemaError(f"conflicting definitions of concept {c.concept.key}")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.columns]

    @property
    def concepts(self) -> list[ConceptDef]:
        out, seen = [], set()
        for c in self.columns:
            if c.concept is not None and c.concept.key not in seen:
                seen.add(c.concept.key)
                out.append(c.concept)
        return out

    @property
    def fingerprint(self) -> str:
        payload = json.dumps(
            [[c.name, sorted(c.concept.codes) if c.concept else None] for c in self.columns],
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    @property
    def defaults(self) -> np.ndarray:
        return np.array([c.default for c in self.columns], dtype=float)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def columns_of(self, concept_key: str) -> list[int]:
        return [i for i, c in enumerate(self.columns) if c.group == concept_key]

    def validate_for_extraction(self) -> None:
        demo = [c.attribute for c in self.columns if c.concept is None]
        if sorted(demo, key=_ATTR_ORDER.get) != list(DEMOGRAPHIC_ATTRIBUTES):
            raise SchemaError("schema must carry AgeAtIndex and SexIsFemale exactly once")
        by_concept: dict[str, set] = {}
        for c in self.columns:
            if c.concept is not None:
                by_concept.setdefault(c.concept.key, set()).add(c.attribute)
        for key, attrs in by_concept.items():
            if attrs != set(CONCEPT_ATTRIBUTES):
                raise SchemaError(f"schema references concept {key} without its attribute set")

    def to_json(self) -> dict:
        return {
            "version": 1,
            "fingerprint": self.fingerprint,
            "provenance_cs_ids": sorted(self.provenance),
            "concepts": [c.to_json() for c in self.concepts],
            "columns": [
                {"name": c.name, "concept": c.concept.key if c.concept else None, "attribute": c.attribute.value}
                for c in self.columns
            ],
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "FeatureSchema":
        if d.get("version") != 1:
            raise SchemaError(f"unsupported schema version {d.get('version')!r}")
        concepts = {}
        for cj in d["concepts"]:
            c = ConceptDef.from_json(cj)
            concepts[c.key] = c
        cols = []
        for col in d["columns"]:
            key = col["concept"]
            if key is not None and key not in concepts:
                raise SchemaError(f"column {col['name']} references unknown concept {key}")
            cols.append(FeatureColumn(concepts[key] if key else None, Attribute(col["attribute"])))
        schema = cls(tuple(cols), frozenset(d.get("provenance_cs_ids", ())))
        if d.get("fingerprint") not in (None, schema.fingerprint):
            raise SchemaError("schema fingerprint mismatch")
        return schema


def build_schema(kd: Iterable[ConceptDef], dd: Iterable[ConceptDef], provenance: Iterable[int] = ()) -> FeatureSchema:
    cols = []
    for c in list(kd) + list(dd):
        cols.extend(FeatureColumn(c, a) for a in CONCEPT_ATTRIBUTES)
    cols.extend(FeatureColumn(None, a) for a in DEMOGRAPHIC_ATTRIBUTES)
    cols.sort(key=FeatureColumn.sort_key)
    schema = FeatureSchema(tuple(cols), frozenset(provenance))
    schema.validate_for_extraction()
    return schema


def load_concepts(path: str | Path) -> list[ConceptDef]:
    """KD concept file: ``{"version": 1, "concepts": [{"name", "kind", "codes"}]}``."""
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    unknown = set(raw) - {"version", "concepts"}
    if unknown:
        raise SchemaError(f"unknown keys in concept file: {sorted(unknown)}")
    out = []
    for c in raw["concepts"]:
        extra = set(c) - {"name", "kind", "codes"}
        if extra:
            raise SchemaError(f"unknown keys in concept {c.get('name')!r}: {sorted(extra)}")
        out.append(ConceptDef(c["name"], Kind(c["kind"]), frozenset(c["codes"]), Origin.KD))
    names = [c.name for c in out]
    if len(set(names)) != len(names):
        raise SchemaError("duplicate KD concept names")
    return out


# --- matrix ---------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    schema: FeatureSchema
    row_keys: tuple  # (cs_id, patient_id) per row
    labels: tuple  # Label or None per row
    y: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    @property
    def n_rows(self) -> int:
        return len(self.row_keys)

    @property
    def n_cols(self) -> int:
        return len(self.schema.columns)

    @property
    def n_stored(self) -> int:
        return int(self.indptr[-1])

    @property
    def cs_ids(self) -> np.ndarray:
        return np.array([k[0] for k in self.row_keys], dtype=np.int64)

    def to_dense(self) -> np.ndarray:
        X = np.tile(self.schema.defaults, (self.n_rows, 1))
        rows = np.repeat(np.arange(self.n_rows), np.diff(self.indptr))
        X[rows, self.indices] = self.data
        return X

    def row(self, i: int) -> dict[int, float]:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return dict(zip(self.indices[lo:hi].tolist(), self.data[lo:hi].tolist()))

    def take(self, rows: Sequence[int] | np.ndarray) -> "FeatureMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        counts = np.diff(self.indptr)[rows]
        indptr = np.zeros(len(rows) + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        sel = np.concatenate([np.arange(self.indptr[r], self.indptr[r + 1]) for r in rows]) \
            if len(rows) else np.zeros(0, dtype=np.int64)
        return FeatureMatrix(
            self.schema,
            tuple(self.row_keys[r] for r in rows),
            tuple(self.labels[r] for r in rows),
            self.y[rows],
            indptr,
            self.indices[sel],
            self.data[sel],
        )

    def for_cross_sections(self, cs_ids: Iterable[int]) -> "FeatureMatrix":
        ids = np.array(sorted(set(cs_ids)))
        return self.take(np.flatnonzero(np.isin(self.cs_ids, ids)))

    def equals(self, other: "FeatureMatrix") -> bool:
        return (
            self.schema.fingerprint == other.schema.fingerprint
            and self.row_keys == other.row_keys
            and self.labels == other.labels
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.data, other.data, equal_nan=True)
        )

    @classmethod
    def from_dense(cls, X, y, names: Sequence[str] | None = None, row_keys=None) -> "FeatureMatrix":
        """Wrap a dense array (NaN = Null) with a generic one-column-per-feature schema."""
        X = np.asarray(X, dtype=float)
        n, p = X.shape
        names = list(names) if names is not None else [f"x{j}" for j in range(p)]
        cols = tuple(
            FeatureColumn(ConceptDef(nm, Kind.DIAGNOSIS, frozenset([nm])), Attribute.VALUE) for nm in names
        )
        schema = FeatureSchema(cols)
        y = np.asarray(y).astype(np.int8)
        keys = tuple(row_keys) if row_keys is not None else tuple((0, f"r{i}") for i in range(n))
        return cls(
            schema, keys, tuple(None for _ in range(n)), y,
            np.arange(0, n * p + 1, p, dtype=np.int64) if p else np.zeros(n + 1, np.int64),
            np.tile(np.arange(p, dtype=np.int64), n),
            X.ravel().copy(),
        )


def _lookback_ranges(pop: Population, patients: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    keys = pop.event_patient * _KEY_STRIDE + pop.days.astype(np.int64)
    a = np.searchsorted(keys, patients * _KEY_STRIDE + lo, side="left")
    b = np.searchsorted(keys, patients * _KEY_STRIDE + hi, side="right")
    return a.astype(np.int64), b.astype(np.int64)


def _concept_key_table(pop: Population, concepts: Sequence[ConceptDef]):
    """CSR map from event key to the concept indices it contributes to."""
    n_keys = len(KINDS) * max(len(pop.vocab), 1)
    lists: list[list[int]] = [[] for _ in range(n_keys)]
    for ci, c in enumerate(concepts):
        for code in sorted(c.codes):
            key = pop.key_of(c.kind, code)
            if key is not None:
                lists[key].append(ci)
    ptr = np.zeros(n_keys + 1, dtype=np.int64)
    np.cumsum([len(x) for x in lists], out=ptr[1:])
    flat = np.array([c for x in lists for c in x], dtype=np.int64)
    return ptr, flat


def extract_row(patient: PatientRecord, cs: CrossSection, schema: FeatureSchema) -> dict[int, float]:
    """Stored cells of one row, computed directly from the patient's events."""
    lb_lo, idx = cs.lookback_bounds
    events = [
        (int(d), KINDS[k], patient.vocab[c])
        for d, k, c in zip(patient.days, patient.kind, patient.code)
        if lb_lo <= d <= idx
    ]
    out: dict[int, float] = {}
    for j, col in enumerate(schema.columns):
        if col.concept is None:
            if col.attribute is Attribute.AGE_AT_INDEX:
                out[j] = float(cs.index_date.year - patient.birth_year)
            elif col.attribute is Attribute.SEX_IS_FEMALE:
                out[j] = 1.0 if patient.sex is Sex.F else 0.0
            continue
        hits = [d for d, k, c in events if k is col.concept.kind and c in col.concept.codes]
        if not hits:
            continue
        first, last = min(hits), max(hits)
        value = {
            Attribute.FREQUENCY: len(hits),
            Attribute.DAYS_INDEX_TO_FIRST: idx - first,
            Attribute.DAYS_INDEX_TO_LAST: idx - last,
            Attribute.DAYS_FIRST_TO_LAST: last - first,
        }[col.attribute]
        out[j] = float(value)
    return out


def build_matrix(rows: Sequence[LabeledCrossSection], schema: FeatureSchema, pop: Population,
                 cross_sections: Iterable[CrossSection]) -> FeatureMatrix:
    schema.validate_for_extraction()
    by_id = {cs.id: cs for cs in cross_sections}
    rows = sorted(rows)
    n = len(rows)
    concepts = schema.concepts
    ckey = {c.key: i for i, c in enumerate(concepts)}
    col_of = np.full((len(concepts), len(CONCEPT_ATTRIBUTES)), -1, dtype=np.int64)
    age_col = sex_col = -1
    for j, col in enumerate(schema.columns):
        if col.concept is None:
            if col.attribute is Attribute.AGE_AT_INDEX:
                age_col = j
            else:
                sex_col = j
        else:
            col_of[ckey[col.concept.key], CONCEPT_ATTRIBUTES.index(col.attribute)] = j

    try:
        pidx = np.array([pop.index_of(r.patient_id) for r in rows], dtype=np.int64)
        css = [by_id[r.cs_id] for r in rows]
    except KeyError as exc:
        raise SchemaError(f"row references unknown patient or cross-section: {exc}") from None
    idx = np.array([cs.index_date.toordinal() for cs in css], dtype=np.int64)
    lbl = np.array([cs.lookback_start.toordinal() for cs in css], dtype=np.int64)
    lo, hi = _lookback_ranges(pop, pidx, lbl, idx) if n else (np.zeros(0, np.int64),) * 2
    ptr, flat = _concept_key_table(pop, concepts)
    counts, first, last = _kernels.backend().window_aggregate(
        np.ascontiguousarray(pop.days, dtype=np.int32), np.ascontiguousarray(pop.event_keys(), dtype=np.int64),
        lo, hi, ptr, flat, len(concepts),
    )

    r_i, c_i = np.nonzero(counts)
    freq = counts[r_i, c_i].astype(float)
    f = first[r_i, c_i].astype(np.int64)
    l = last[r_i, c_i].astype(np.int64)
    ix = idx[r_i]
    vals = np.stack([freq, ix - f, ix - l, l - f], axis=1).astype(float)
    cols = col_of[c_i]
    rr = np.repeat(r_i, len(CONCEPT_ATTRIBUTES))
    cc = cols.ravel()
    vv = vals.ravel()
    years = np.array([cs.index_date.year for cs in css], dtype=np.int64)
    ages = (years - pop.birth_years[pidx]).astype(float) if n else np.zeros(0)
    female = (pop.sexes[pidx] == 0).astype(float) if n else np.zeros(0)
    rr = np.concatenate([rr, np.arange(n), np.arange(n)])
    cc = np.concatenate([cc, np.full(n, age_col), np.full(n, sex_col)])
    vv = np.concatenate([vv, ages, female])
    order = np.lexsort((cc, rr))
    rr, cc, vv = rr[order], cc[order], vv[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rr, minlength=n), out=indptr[1:])
    return FeatureMatrix(
        schema,
        tuple((r.cs_id, r.patient_id) for r in rows),
        tuple(r.label for r in rows),
        np.array([1 if r.positive else 0 for r in rows], dtype=np.int8),
        indptr,
        cc.astype(np.int64),
        vv,
    )


# --- data-driven selection ------------------------------------------------------------

@dataclass(frozen=True)
class CodeScore:
    kind: Kind
    code: str
    prevalence_pos: float
    prevalence_ctl: float

    @property
    def score(self) -> float:
        return abs(self.prevalence_pos - self.prevalence_ctl)


@dataclass(frozen=True)
class DDSelection:
    concepts: tuple[ConceptDef, ...]
    scores: tuple[CodeScore, ...]  # ranked, all kinds
    provenance: frozenset


def check_training_rows(rows: Iterable[LabeledCrossSection], split: SplitAssignment, stage: str) -> frozenset:
    ids = frozenset(r.cs_id for r in rows)
    bad = ids - split.train_ids
    if bad:
        raise LeakageError(f"{stage} consumed non-training cross-sections {sorted(bad)}")
    return ids


def code_prevalence(train_rows: Sequence[LabeledCrossSection], pop: Population,
                    cross_sections: Iterable[CrossSection]):
    """Per event key: number of positive and control rows whose lookback contains it."""
    by_id = {cs.id: cs for cs in cross_sections}
    rows = list(train_rows)
    n_keys = len(KINDS) * max(len(pop.vocab), 1)
    pos = np.zeros(n_keys, dtype=np.int64)
    ctl = np.zeros(n_keys, dtype=np.int64)
    if not rows:
        return pos, ctl, 0, 0
    pidx = np.array([pop.index_of(r.patient_id) for r in rows], dtype=np.int64)
    idx = np.array([by_id[r.cs_id].index_date.toordinal() for r in rows], dtype=np.int64)
    lbl = np.array([by_id[r.cs_id].lookback_start.toordinal() for r in rows], dtype=np.int64)
    lo, hi = _lookback_ranges(pop, pidx, lbl, idx)
    lengths = hi - lo
    ev = np.concatenate([np.arange(a, b) for a, b in zip(lo, hi)]) if lengths.sum() else np.zeros(0, np.int64)
    row_of = np.repeat(np.arange(len(rows)), lengths)
    keys = pop.event_keys()[ev]
    pairs = np.unique(row_of * n_keys + keys)
    prow = pairs // n_keys
    pkey = pairs % n_keys
    is_pos = np.array([r.positive for r in rows], dtype=bool)
    pos = np.bincount(pkey[is_pos[prow]], minlength=n_keys)
    ctl = np.bincount(pkey[~is_pos[prow]], minlength=n_keys)
    return pos, ctl, int(is_pos.sum()), int((~is_pos).sum())


def dd_select(train_rows: Sequence[LabeledCrossSection], pop: Population, cross_sections: Iterable[CrossSection],
              split: SplitAssignment, top_k_per_kind: int = 50, *,
              exclude: Iterable[tuple[Kind, str]] = ()) -> DDSelection:
    """Top codes per kind by |prevalence_pos - prevalence_ctl| over training rows.

    Codes in ``exclude`` (typically those already inside KD concepts) stay in
    the score table but are not turned into DD concepts.
    """
    provenance = check_training_rows(train_rows, split, "DD selection")
    pos, ctl, P, C = code_prevalence(train_rows, pop, cross_sections)
    if P == 0:
        raise SchemaError("DD selection needs at least one positive training row")
    nv = len(pop.vocab)
    scores = []
    for key in np.flatnonzero((pos + ctl) > 0):
        kind = KINDS[key // nv]
        code = pop.vocab[key % nv]
        scores.append(CodeScore(kind, code, pos[key] / P, ctl[key] / C if C else 0.0))
    scores.sort(key=lambda s: (KIND_INDEX[s.kind], -s.score, s.code))
    skip = {(Kind(k), c) for k, c in exclude}
    chosen = []
    for kind in KINDS:
        ranked = [s for s in scores if s.kind is kind and (kind, s.code) not in skip][:top_k_per_kind]
        chosen.extend(ConceptDef(f"{kind.value}:{s.code}", kind, frozenset([s.code]), Origin.DD) for s in ranked)
    return DDSelection(tuple(chosen), tuple(scores), provenance)


# --- persistence -------------------------------------------------------------------

def write_matrix(m: FeatureMatrix, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "schema.json", "w", encoding="utf-8") as f:
        json.dump(m.schema.to_json(), f, indent=2, sort_keys=True)
        f.write("\n")
    with open(d / "matrix.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["row", "col", "value"])
        rows = np.repeat(np.arange(m.n_rows), np.diff(m.indptr))
        for r, c, v in zip(rows.tolist(), m.indices.tolist(), m.data.tolist()):
            w.writerow((r, c, NULL_TOKEN if v != v else repr(v)))
    with open(d / "rows.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["row", "cs_id", "patient_id", "label", "y"])
        for i, ((cs_id, pid), lab, y) in enumerate(zip(m.row_keys, m.labels, m.y.tolist())):
            w.writerow((i, cs_id, pid, lab.value if lab is not None else "", y))


def read_matrix(directory: str | Path) -> FeatureMatrix:
    d = Path(directory)
    with open(d / "schema.json", encoding="utf-8") as f:
        schema = FeatureSchema.from_json(json.load(f))
    keys, labels, ys = [], [], []
    with open(d / "rows.csv", newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        next(reader)
        for i, cs_id, pid, lab, y in reader:
            keys.append((int(cs_id), pid))
            labels.append(Label(lab) if lab else None)
            ys.append(int(y))
    rr, cc, vv = [], [], []
    with open(d / "matrix.csv", newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        next(reader)
        for r, c, v in reader:
            rr.append(int(r))
            cc.append(int(c))
            vv.append(np.nan if v == NULL_TOKEN else float(v))
    n = len(keys)
    rr = np.asarray(rr, dtype=np.int64)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(rr, minlength=n), out=indptr[1:])
    return FeatureMatrix(schema, tuple(keys), tuple(labels), np.asarray(ys, dtype=np.int8), indptr,
                         np.asarray(cc, dtype=np.int64), np.asarray(vv, dtype=float))


def write_dd_scores(sel: DDSelection, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["kind", "code", "prevalence_pos", "prevalence_ctl", "abs_difference"])
        for s in sel.scores:
            w.writerow((s.kind.value, s.code, repr(s.prevalence_pos), repr(s.prevalence_ctl), repr(s.score)))
