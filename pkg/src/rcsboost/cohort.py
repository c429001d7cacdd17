"""Eligibility, probable-case labeling and downsampled control pools.

Two implementations of the per-(patient, cross-section) rules live here:
the scalar functions :func:`eligible` and :func:`label`, which read a single
:class:`PatientRecord`, and :class:`CohortEngine`, which evaluates the same
rules for every patient at once using masks over the flat event arrays.
The scalar path is the reference the vectorized one is tested against.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import date
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .claims import KINDS, Kind, PatientRecord, Population, Sex, SEXES, Source, age_at, observation_span_months
from .months import add_months, from_ordinal
from .rcs import CrossSection

MIN_AGE, MAX_AGE = 18, 85
MIN_SPAN_MONTHS = 24
PROXY_NAFL_BEFORE_MONTHS = 24
PROXY_NAFL_AFTER_MONTHS = 6

CodeSet = frozenset  # of (Kind, code) pairs


class CodeSetError(ValueError):
    pass


class Label(str, Enum):
    NASH_DX = "NashDx"
    NASH_PROXY = "NashProxy"
    CONTROL = "Control"

    @property
    def positive(self) -> bool:
        return self is not Label.CONTROL


class CohortMode(str, Enum):
    NAFL_INCLUSIVE = "NaflInclusive"
    NON_NAFL = "NonNafl"

    @property
    def slug(self) -> str:
        return "nafl_inclusive" if self is CohortMode.NAFL_INCLUSIVE else "non_nafl"


def _parse_set(name: str, raw) -> frozenset:
    if not isinstance(raw, list):
        raise CodeSetError(f"code set {name!r} must be a list of [kind, code] pairs")
    out = set()
    for item in raw:
        if not (isinstance(item, (list, tuple)) and len(item) == 2):
            raise CodeSetError(f"code set {name!r}: bad entry {item!r}")
        kind, code = item
        try:
            k = Kind(kind)
        except ValueError:
            raise CodeSetError(f"code set {name!r}: unknown kind {kind!r}") from None
        if not code:
            raise CodeSetError(f"code set {name!r}: empty code")
        out.add((k, str(code)))
    return frozenset(out)


_FLAT_SETS = ("nash_dx", "fibrosis_cirrhosis", "nafl", "other_liver_dx", "legacy_nash_dx")
_NAMED_SETS = ("at_risk_inclusion", "exclusion", "benchmarks")


@dataclass(frozen=True)
class CodeSetConfig:
    at_risk_inclusion: Mapping[str, frozenset]
    exclusion: Mapping[str, frozenset]
    nash_dx: frozenset
    fibrosis_cirrhosis: frozenset
    nafl: frozenset
    other_liver_dx: frozenset
    legacy_nash_dx: frozenset
    benchmarks: Mapping[str, frozenset] = field(default_factory=dict)

    def __post_init__(self):
        for name in _FLAT_SETS:
            if not getattr(self, name):
                raise CodeSetError(f"code set {name!r} is empty")
        for name in ("at_risk_inclusion", "exclusion"):
            groups = getattr(self, name)
            if not groups:
                raise CodeSetError(f"{name!r} has no named sets")
            for sub, codes in groups.items():
                if not codes:
                    raise CodeSetError(f"{name}.{sub} is empty")
        for sub, codes in self.benchmarks.items():
            if not codes:
                raise CodeSetError(f"benchmarks.{sub} is empty")
        overlap = self.nash_dx & self.nafl
        if overlap:
            raise CodeSetError(f"nash_dx and nafl overlap: {sorted(c for _, c in overlap)}")

    @property
    def inclusion(self) -> frozenset:
        return frozenset().union(*self.at_risk_inclusion.values())

    @property
    def exclusion_all(self) -> frozenset:
        return frozenset().union(*self.exclusion.values())

    def benchmark(self, name: str) -> frozenset:
        try:
            return self.benchmarks[name]
        except KeyError:
            raise CodeSetError(f"unknown benchmark rule set {name!r}") from None

    @classmethod
    def from_dict(cls, raw: Mapping) -> "CodeSetConfig":
        allowed = {"version", *_FLAT_SETS, *_NAMED_SETS}
        unknown = set(raw) - allowed
        if unknown:
            raise CodeSetError(f"unknown code-set keys: {sorted(unknown)}")
        if raw.get("version", 1) != 1:
            raise CodeSetError(f"unsupported code-set version {raw.get('version')!r}")
        missing = [k for k in (*_FLAT_SETS, "at_risk_inclusion", "exclusion") if k not in raw]
        if missing:
            raise CodeSetError(f"missing code sets: {missing}")
        kw = {k: _parse_set(k, raw[k]) for k in _FLAT_SETS}
        for k in _NAMED_SETS:
            groups = raw.get(k, {})
            if not isinstance(groups, dict):
                raise CodeSetError(f"{k!r} must map names to code lists")
            kw[k] = {n: _parse_set(f"{k}.{n}", v) for n, v in groups.items()}
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path) -> "CodeSetConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


@dataclass(frozen=True, order=True)
class LabeledCrossSection:
    cs_id: int
    patient_id: str
    label: Label = field(compare=False)
    nafl_in_lookback: bool = field(compare=False, default=False)

    @property
    def positive(self) -> bool:
        return self.label.positive


# --- scalar reference rules --------------------------------------------------

def _matches(patient: PatientRecord, codes: frozenset) -> np.ndarray:
    if len(patient) == 0:
        return np.zeros(0, dtype=bool)
    pairs = {(KINDS.index(k), c) for k, c in codes}
    return np.array(
        [(int(k), patient.vocab[c]) in pairs for k, c in zip(patient.kind, patient.code)],
        dtype=bool,
    )


def eligible(patient: PatientRecord, cs: CrossSection, config: CodeSetConfig, *, study_start: date) -> bool:
    lb_lo, idx = cs.lookback_bounds
    d = patient.days
    in_lb = (d >= lb_lo) & (d <= idx)
    if not np.any(in_lb & _matches(patient, config.inclusion)):
        return False
    if np.any(in_lb & _matches(patient, config.exclusion_all)):
        return False
    if not MIN_AGE <= age_at(patient, cs.index_date) <= MAX_AGE:
        return False
    if observation_span_months(patient, Source.RX) < MIN_SPAN_MONTHS:
        return False
    if observation_span_months(patient, Source.DX) < MIN_SPAN_MONTHS:
        return False
    if patient.sex not in (Sex.F, Sex.M):
        return False
    if np.any((d < study_start.toordinal()) & _matches(patient, config.legacy_nash_dx)):
        return False
    return True


def _proxy_event_ok(patient: PatientRecord, t: int, nafl: np.ndarray) -> bool:
    td = from_ordinal(t)
    lo = add_months(td, -PROXY_NAFL_BEFORE_MONTHS).toordinal()
    hi = add_months(td, PROXY_NAFL_AFTER_MONTHS).toordinal()
    return bool(np.any(nafl & (patient.days >= lo) & (patient.days <= hi)))


def label(patient: PatientRecord, cs: CrossSection, config: CodeSetConfig, *, outcome_months: int = 6) -> Label | None:
    """Label an eligible patient cross-section; ``None`` means not labelable.

    Any NASH evidence at or before the index date (diagnosis, legacy
    diagnosis, or a qualifying fibrosis/NAFL cluster) makes the row
    unlabelable, so positives are always first occurrences.
    """
    d = patient.days
    idx = cs.index_date.toordinal()
    oc_lo, oc_hi = cs.outcome_bounds
    nash = _matches(patient, config.nash_dx)
    legacy = _matches(patient, config.legacy_nash_dx)
    fib = _matches(patient, config.fibrosis_cirrhosis)
    nafl = _matches(patient, config.nafl)
    other = _matches(patient, config.other_liver_dx)
    in_oc = (d >= oc_lo) & (d <= oc_hi)

    for i in np.flatnonzero(d <= idx):
        if nash[i] or legacy[i]:
            return None
        if fib[i] and _proxy_event_ok(patient, int(d[i]), nafl):
            td = from_ordinal(int(d[i]))
            glo = add_months(td, -outcome_months).toordinal()
            ghi = add_months(td, outcome_months).toordinal()
            if not np.any(other & (d >= glo) & (d <= ghi)):
                return None
    if np.any(nash & in_oc):
        return Label.NASH_DX
    if not np.any(other & in_oc):
        for i in np.flatnonzero(fib & in_oc):
            if _proxy_event_ok(patient, int(d[i]), nafl):
                return Label.NASH_PROXY
    return Label.CONTROL


def nafl_in_lookback(patient: PatientRecord, cs: CrossSection, config: CodeSetConfig) -> bool:
    lb_lo, idx = cs.lookback_bounds
    d = patient.days
    return bool(np.any((d >= lb_lo) & (d <= idx) & _matches(patient, config.nafl)))


# --- vectorized engine -------------------------------------------------------

LABEL_NONE, LABEL_CONTROL, LABEL_DX, LABEL_PROXY = -1, 0, 1, 2
_LABEL_FROM_CODE = {LABEL_CONTROL: Label.CONTROL, LABEL_DX: Label.NASH_DX, LABEL_PROXY: Label.NASH_PROXY}

_KEY_STRIDE = 10_000_000  # > any date ordinal


def key_mask(pop: Population, codes: Iterable[tuple[Kind, str]]) -> np.ndarray:
    """Boolean per-event mask of membership in a (kind, code) set."""
    table = np.zeros(len(KINDS) * max(len(pop.vocab), 1), dtype=bool)
    for kind, code in codes:
        key = pop.key_of(kind, code)
        if key is not None:
            table[key] = True
    return table[pop.event_keys()] if pop.n_events else np.zeros(0, dtype=bool)


def _month_shift_ordinals(days: np.ndarray, months: int) -> np.ndarray:
    cache: dict[int, int] = {}
    out = np.empty(len(days), dtype=np.int64)
    for i, d in enumerate(days.tolist()):
        v = cache.get(d)
        if v is None:
            v = cache[d] = add_months(from_ordinal(d), months).toordinal()
        out[i] = v
    return out


def _any_in_range(ep: np.ndarray, days: np.ndarray, mask: np.ndarray,
                  q_patient: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """For each query, whether the patient has a masked event dated in [lo, hi]."""
    keys = ep[mask] * _KEY_STRIDE + days[mask]  # sorted: events sorted by (patient, day)
    a = np.searchsorted(keys, q_patient * _KEY_STRIDE + lo, side="left")
    b = np.searchsorted(keys, q_patient * _KEY_STRIDE + hi, side="right")
    return b > a


class CohortEngine:
    """Evaluates eligibility and labels for all patients of one cross-section at a time."""

    def __init__(self, pop: Population, config: CodeSetConfig, *, study_start: date, outcome_months: int = 6):
        self.pop = pop
        self.config = config
        n = len(pop)
        ep = pop.event_patient
        days = pop.days.astype(np.int64)
        self._ep, self._days = ep, days
        self.inclusion = key_mask(pop, config.inclusion)
        self.exclusion = key_mask(pop, config.exclusion_all)
        self.nash = key_mask(pop, config.nash_dx)
        self.legacy = key_mask(pop, config.legacy_nash_dx)
        self.fib = key_mask(pop, config.fibrosis_cirrhosis)
        self.nafl = key_mask(pop, config.nafl)
        self.other = key_mask(pop, config.other_liver_dx)

        self.sex_ok = np.isin(pop.sexes, [SEXES.index(Sex.F), SEXES.index(Sex.M)])
        self.span_ok = np.ones(n, dtype=bool)
        for src in (Source.RX, Source.DX):
            spans = np.array([observation_span_months(pop.record(i), src) for i in range(n)], dtype=np.int64)
            self.span_ok &= spans >= MIN_SPAN_MONTHS
        self.legacy_prestudy = self._any(self.legacy & (days < study_start.toordinal()))

        # Proxy qualification of each fibrosis/cirrhosis event is window independent.
        fib_idx = np.flatnonzero(self.fib)
        fd = days[fib_idx]
        fp = ep[fib_idx]
        near = _any_in_range(ep, days, self.nafl, fp,
                             _month_shift_ordinals(fd, -PROXY_NAFL_BEFORE_MONTHS),
                             _month_shift_ordinals(fd, PROXY_NAFL_AFTER_MONTHS))
        guard = _any_in_range(ep, days, self.other, fp,
                              _month_shift_ordinals(fd, -outcome_months),
                              _month_shift_ordinals(fd, outcome_months))
        self.proxy_core = np.zeros(pop.n_events, dtype=bool)
        self.proxy_core[fib_idx[near]] = True
        self.proxy_prior = np.zeros(pop.n_events, dtype=bool)
        self.proxy_prior[fib_idx[near & ~guard]] = True
        self.evidence = self.nash | self.legacy | self.proxy_prior

    def _any(self, mask: np.ndarray) -> np.ndarray:
        out = np.zeros(len(self.pop), dtype=bool)
        out[self._ep[mask]] = True
        return out

    def in_lookback(self, cs: CrossSection) -> np.ndarray:
        lo, hi = cs.lookback_bounds
        return (self._days >= lo) & (self._days <= hi)

    def in_outcome(self, cs: CrossSection) -> np.ndarray:
        lo, hi = cs.outcome_bounds
        return (self._days >= lo) & (self._days <= hi)

    def eligible(self, cs: CrossSection) -> np.ndarray:
        lb = self.in_lookback(cs)
        ages = cs.index_date.year - self.pop.birth_years
        return (
            self._any(lb & self.inclusion)
            & ~self._any(lb & self.exclusion)
            & (ages >= MIN_AGE) & (ages <= MAX_AGE)
            & self.span_ok
            & self.sex_ok
            & ~self.legacy_prestudy
        )

    def labels(self, cs: CrossSection) -> np.ndarray:
        """Label codes for every patient (ignores eligibility)."""
        idx = cs.index_date.toordinal()
        oc = self.in_outcome(cs)
        prior = self._any(self.evidence & (self._days <= idx))
        nash_oc = self._any(self.nash & oc)
        proxy_oc = self._any(self.proxy_core & oc) & ~self._any(self.other & oc)
        out = np.full(len(self.pop), LABEL_CONTROL, dtype=np.int8)
        out[proxy_oc] = LABEL_PROXY
        out[nash_oc] = LABEL_DX
        out[prior] = LABEL_NONE
        return out

    def nafl_in_lookback(self, cs: CrossSection) -> np.ndarray:
        return self._any(self.in_lookback(cs) & self.nafl)


# --- cohort construction -------------------------------------------------------

@dataclass(frozen=True)
class CrossSectionCounts:
    cs_id: int
    n_positive: int
    n_controls_full: int
    n_controls_sampled: int
    short_pool: bool

    @property
    def downsampling_factor(self) -> float:
        if self.n_controls_sampled == 0:
            return 1.0
        return self.n_controls_full / self.n_controls_sampled

    @property
    def incidence(self) -> float:
        denom = self.n_positive + self.n_controls_full
        return self.n_positive / denom if denom else 0.0


@dataclass(frozen=True)
class CohortResult:
    mode: CohortMode
    rows: tuple[LabeledCrossSection, ...]
    counts: Mapping[int, CrossSectionCounts]
    control_ratio: int
    seed: int

    def rows_for(self, cs_ids: Iterable[int]) -> list[LabeledCrossSection]:
        ids = set(cs_ids)
        return [r for r in self.rows if r.cs_id in ids]

    @property
    def n_patients(self) -> int:
        return len({r.patient_id for r in self.rows})


def build_cohort(
    pop: Population,
    cross_sections: Sequence[CrossSection],
    config: CodeSetConfig,
    mode: CohortMode,
    control_ratio: int,
    seed: int,
    *,
    study_start: date,
    outcome_months: int = 6,
    engine: CohortEngine | None = None,
) -> CohortResult:
    if control_ratio < 1:
        raise ValueError("control_ratio must be >= 1")
    mode = CohortMode(mode)
    engine = engine or CohortEngine(pop, config, study_start=study_start, outcome_months=outcome_months)
    rows: list[LabeledCrossSection] = []
    counts = {}
    for cs in cross_sections:
        elig = engine.eligible(cs)
        lab = engine.labels(cs)
        nafl = engine.nafl_in_lookback(cs)
        keep = elig & (lab != LABEL_NONE)
        if mode is CohortMode.NON_NAFL:
            keep &= ~nafl
        pos = np.flatnonzero(keep & (lab > 0))
        ctl = np.flatnonzero(keep & (lab == LABEL_CONTROL))  # ascending = patient_id order
        target = control_ratio * len(pos)
        short = len(ctl) < target
        if short:
            chosen = ctl
        else:
            rng = np.random.default_rng([seed, cs.id])
            chosen = ctl[np.sort(rng.choice(len(ctl), size=target, replace=False))]
        counts[cs.id] = CrossSectionCounts(cs.id, len(pos), len(ctl), len(chosen), bool(short))
        for i in np.concatenate([pos, chosen]):
            rows.append(LabeledCrossSection(cs.id, pop.patient_ids[i], _LABEL_FROM_CODE[int(lab[i])], bool(nafl[i])))
    rows.sort()
    return CohortResult(mode, tuple(rows), counts, control_ratio, seed)


# --- persistence -----------------------------------------------------------------

COHORT_HEADER = ["patient_id", "cs_id", "label", "nafl_in_lookback"]


def write_cohort(result: CohortResult, csv_path: str | Path, meta_path: str | Path) -> None:
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(COHORT_HEADER)
        for r in result.rows:
            w.writerow((r.patient_id, r.cs_id, r.label.value, int(r.nafl_in_lookback)))
    meta = {
        "mode": result.mode.value,
        "control_ratio": result.control_ratio,
        "seed": result.seed,
        "cross_sections": [
            {
                "cs_id": c.cs_id,
                "n_positive": c.n_positive,
                "n_controls_full": c.n_controls_full,
                "n_controls_sampled": c.n_controls_sampled,
                "short_pool": c.short_pool,
            }
            for c in result.counts.values()
        ],
    }
    with open(meta_path, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def read_cohort(csv_path: str | Path, meta_path: str | Path) -> CohortResult:
    with open(meta_path, encoding="utf-8") as f:
        meta = json.load(f)
    rows = []
    with open(csv_path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != COHORT_HEADER:
            raise ValueError(f"{csv_path}: unexpected header {header}")
        for pid, cs_id, lab, nafl in reader:
            rows.append(LabeledCrossSection(int(cs_id), pid, Label(lab), nafl == "1"))
    counts = {
        c["cs_id"]: CrossSectionCounts(c["cs_id"], c["n_positive"], c["n_controls_full"],
                                       c["n_controls_sampled"], c["short_pool"])
        for c in meta["cross_sections"]
    }
    return CohortResult(CohortMode(meta["mode"]), tuple(sorted(rows)), counts, meta["control_ratio"], meta["seed"])
