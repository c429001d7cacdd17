"""Claims timelines: event model, columnar population store, CSV ingestion.

A :class:`Population` keeps every event of every patient in flat, sorted
numpy arrays (days as proleptic ordinals, small-int enums, interned codes).
:class:`PatientRecord` is a cheap view onto one patient's slice.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from datetime import date
from enum import Enum
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

import numpy as np

from .months import from_ordinal, months_between

CLAIMS_HEADER = ["patient_id", "date", "source", "kind", "code"]
DEMOGRAPHICS_HEADER = ["patient_id", "birth_year", "sex"]


class ClaimsFormatError(ValueError):
    """Malformed claims or demographics input."""


class Source(str, Enum):
    DX = "Dx"
    RX = "Rx"


class Kind(str, Enum):
    DIAGNOSIS = "Diagnosis"
    DRUG = "Drug"
    PROCEDURE = "Procedure"
    SPECIALTY_VISIT = "SpecialtyVisit"


class Sex(str, Enum):
    F = "F"
    M = "M"
    UNKNOWN = "U"


# Enum integer codes follow the lexicographic order of the tokens, so sorting
# on the integers reproduces the (source, kind, code) string order.
SOURCES: tuple[Source, ...] = tuple(sorted(Source, key=lambda s: s.value))
KINDS: tuple[Kind, ...] = tuple(sorted(Kind, key=lambda k: k.value))
SEXES: tuple[Sex, ...] = (Sex.F, Sex.M, Sex.UNKNOWN)
SOURCE_INDEX = {s: i for i, s in enumerate(SOURCES)}
KIND_INDEX = {k: i for i, k in enumerate(KINDS)}
SEX_INDEX = {s: i for i, s in enumerate(SEXES)}
_SOURCE_TOKENS = {s.value: i for i, s in enumerate(SOURCES)}
_KIND_TOKENS = {k.value: i for i, k in enumerate(KINDS)}
_SEX_TOKENS = {s.value: i for i, s in enumerate(SEXES)}


@dataclass(frozen=True, order=True)
class ClaimEvent:
    patient_id: str
    date: date
    source: Source
    kind: Kind
    code: str

    def sort_key(self):
        return (self.date, self.source.value, self.kind.value, self.code)


@dataclass(frozen=True, eq=False)
class PatientRecord:
    """One patient's demographics and date-sorted event arrays."""

    patient_id: str
    birth_year: int
    sex: Sex
    days: np.ndarray
    source: np.ndarray
    kind: np.ndarray
    code: np.ndarray
    vocab: Sequence[str]

    def __len__(self) -> int:
        return len(self.days)

    @property
    def events(self) -> tuple[ClaimEvent, ...]:
        return tuple(
            ClaimEvent(
                self.patient_id,
                from_ordinal(d),
                SOURCES[s],
                KINDS[k],
                self.vocab[c],
            )
            for d, s, k, c in zip(self.days, self.source, self.kind, self.code)
        )

    def codes(self) -> list[str]:
        return [self.vocab[c] for c in self.code]


class Population:
    """Immutable collection of patient timelines keyed by patient id."""

    def __init__(
        self,
        patient_ids: Sequence[str],
        birth_years: np.ndarray,
        sexes: np.ndarray,
        indptr: np.ndarray,
        days: np.ndarray,
        source: np.ndarray,
        kind: np.ndarray,
        code: np.ndarray,
        vocab: Sequence[str],
    ):
        self.patient_ids = tuple(patient_ids)
        self.birth_years = np.asarray(birth_years, dtype=np.int32)
        self.sexes = np.asarray(sexes, dtype=np.int8)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.days = np.asarray(days, dtype=np.int32)
        self.source = np.asarray(source, dtype=np.int8)
        self.kind = np.asarray(kind, dtype=np.int8)
        self.code = np.asarray(code, dtype=np.int32)
        self.vocab = tuple(vocab)
        self._index = {pid: i for i, pid in enumerate(self.patient_ids)}
        if len(self._index) != len(self.patient_ids):
            raise ClaimsFormatError("duplicate patient ids")
        self._code_index = {c: i for i, c in enumerate(self.vocab)}
        for arr in (self.days, self.source, self.kind, self.code,
                    self.birth_years, self.sexes, self.indptr):
            arr.setflags(write=False)

    # construction -------------------------------------------------------
    @classmethod
    def from_arrays(
        cls,
        patient_ids: Sequence[str],
        birth_years: Sequence[int],
        sexes: Sequence[int],
        event_patient: np.ndarray,
        days: np.ndarray,
        source: np.ndarray,
        kind: np.ndarray,
        code: np.ndarray,
        vocab: Sequence[str],
    ) -> "Population":
        """Build from unsorted event arrays; ``event_patient`` indexes ``patient_ids``."""
        n = len(patient_ids)
        order_p = sorted(range(n), key=lambda i: patient_ids[i])
        rank = np.empty(n, dtype=np.int64)
        rank[order_p] = np.arange(n)
        code = np.asarray(code, dtype=np.int64)
        used = np.unique(code) if len(code) else np.zeros(0, dtype=np.int64)
        new_vocab = sorted(vocab[i] for i in used)
        remap = np.zeros(len(vocab), dtype=np.int32)
        pos = {c: i for i, c in enumerate(new_vocab)}
        for i in used:
            remap[i] = pos[vocab[i]]
        code_new = remap[code] if len(code) else np.zeros(0, dtype=np.int32)
        ep = rank[np.asarray(event_patient, dtype=np.int64)] if len(code) else np.zeros(0, np.int64)
        days = np.asarray(days, dtype=np.int64)
        source = np.asarray(source, dtype=np.int64)
        kind = np.asarray(kind, dtype=np.int64)
        order = np.lexsort((code_new, kind, source, days, ep))
        counts = np.bincount(ep, minlength=n) if n else np.zeros(0, np.int64)
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        return cls(
            [patient_ids[i] for i in order_p],
            np.asarray(birth_years, dtype=np.int32)[order_p] if n else np.zeros(0, np.int32),
            np.asarray(sexes, dtype=np.int8)[order_p] if n else np.zeros(0, np.int8),
            indptr,
            days[order],
            source[order],
            kind[order],
            code_new[order],
            new_vocab,
        )

    @classmethod
    def from_events(
        cls,
        demographics: Iterable[tuple[str, int, Sex]],
        events: Iterable[ClaimEvent],
    ) -> "Population":
        demo = list(demographics)
        pids = [d[0] for d in demo]
        index = {p: i for i, p in enumerate(pids)}
        vocab: dict[str, int] = {}
        ep, days, src, knd, cds = [], [], [], [], []
        for ev in events:
            if ev.patient_id not in index:
                raise ClaimsFormatError(f"event references unknown patient {ev.patient_id!r}")
            ep.append(index[ev.patient_id])
            days.append(ev.date.toordinal())
            src.append(SOURCE_INDEX[Source(ev.source)])
            knd.append(KIND_INDEX[Kind(ev.kind)])
            cds.append(vocab.setdefault(ev.code, len(vocab)))
        return cls.from_arrays(
            pids,
            [d[1] for d in demo],
            [SEX_INDEX[Sex(d[2])] for d in demo],
            np.asarray(ep, dtype=np.int64),
            np.asarray(days, dtype=np.int64),
            np.asarray(src, dtype=np.int64),
            np.asarray(knd, dtype=np.int64),
            np.asarray(cds, dtype=np.int64),
            list(vocab),
        )

    # access --------------------------------------------------------------
    def __len__(self) -> int:
        return len(self.patient_ids)

    def __contains__(self, pid: str) -> bool:
        return pid in self._index

    def index_of(self, pid: str) -> int:
        return self._index[pid]

    def record(self, i: int) -> PatientRecord:
        lo, hi = self.indptr[i], self.indptr[i + 1]
        return PatientRecord(
            self.patient_ids[i],
            int(self.birth_years[i]),
            SEXES[self.sexes[i]],
            self.days[lo:hi],
            self.source[lo:hi],
            self.kind[lo:hi],
            self.code[lo:hi],
            self.vocab,
        )

    def __getitem__(self, pid: str) -> PatientRecord:
        return self.record(self._index[pid])

    def __iter__(self) -> Iterator[PatientRecord]:
        for i in range(len(self)):
            yield self.record(i)

    @property
    def n_events(self) -> int:
        return int(self.indptr[-1])

    @property
    def event_patient(self) -> np.ndarray:
        return np.repeat(np.arange(len(self), dtype=np.int64), np.diff(self.indptr))

    def code_id(self, code: str) -> int | None:
        return self._code_index.get(code)

    def event_keys(self) -> np.ndarray:
        """Per-event integer key ``kind * len(vocab) + code`` for (kind, code) lookups."""
        return self.kind.astype(np.int64) * len(self.vocab) + self.code

    def key_of(self, kind: Kind, code: str) -> int | None:
        cid = self._code_index.get(code)
        if cid is None:
            return None
        return KIND_INDEX[Kind(kind)] * len(self.vocab) + cid

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Population):
            return NotImplemented
        if self.patient_ids != other.patient_ids or self.n_events != other.n_events:
            return False
        sv = np.asarray(self.vocab, dtype=object)
        ov = np.asarray(other.vocab, dtype=object)
        return bool(
            np.array_equal(self.birth_years, other.birth_years)
            and np.array_equal(self.sexes, other.sexes)
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.days, other.days)
            and np.array_equal(self.source, other.source)
            and np.array_equal(self.kind, other.kind)
            and (self.n_events == 0 or np.array_equal(sv[self.code], ov[other.code]))
        )

    __hash__ = None  # type: ignore[assignment]


# --- demographics / spans ------------------------------------------------

def age_at(patient: PatientRecord, when: date) -> int:
    return when.year - patient.birth_year


def observation_span_months(patient: PatientRecord, source: Source) -> int:
    mask = patient.source == SOURCE_INDEX[Source(source)]
    if mask.sum() < 2:
        return 0
    d = patient.days[mask]
    return months_between(from_ordinal(d[0]), from_ordinal(d[-1]))


def validation_report(pop: Population) -> dict[str, int]:
    """Counts of soft inconsistencies; never raises."""
    drug = pop.kind == KIND_INDEX[Kind.DRUG]
    rx = pop.source == SOURCE_INDEX[Source.RX]
    return {
        "drug_events_from_dx": int(np.sum(drug & ~rx)),
        "non_drug_events_from_rx": int(np.sum(~drug & rx)),
        "patients_without_events": int(np.sum(np.diff(pop.indptr) == 0)),
    }


# --- CSV ingestion ----------------------------------------------------------

def _check_header(reader, expected: list[str], what: str) -> None:
    try:
        header = next(reader)
    except StopIteration:
        raise ClaimsFormatError(f"{what}: missing header") from None
    if [h.strip() for h in header] != expected:
        raise ClaimsFormatError(f"{what}: expected header {','.join(expected)}, got {','.join(header)}")


def parse_demographics(stream: IO[str]) -> list[tuple[str, int, Sex]]:
    reader = csv.reader(stream)
    _check_header(reader, DEMOGRAPHICS_HEADER, "demographics")
    out = []
    seen = set()
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        if len(row) != 3:
            raise ClaimsFormatError(f"demographics line {line}: expected 3 fields")
        pid, by, sex = row
        if not pid:
            raise ClaimsFormatError(f"demographics line {line}: empty patient_id")
        if pid in seen:
            raise ClaimsFormatError(f"demographics line {line}: duplicate patient {pid!r}")
        seen.add(pid)
        try:
            year = int(by)
        except ValueError:
            raise ClaimsFormatError(f"demographics line {line}: bad birth_year {by!r}") from None
        if sex not in _SEX_TOKENS:
            raise ClaimsFormatError(f"demographics line {line}: unknown sex {sex!r}")
        out.append((pid, year, Sex(sex)))
    return out


def parse_claims(claims: IO[str], demographics: IO[str]) -> Population:
    """Parse the claims CSV plus its companion demographics CSV."""
    demo = parse_demographics(demographics)
    pids = [d[0] for d in demo]
    index = {p: i for i, p in enumerate(pids)}
    reader = csv.reader(claims)
    _check_header(reader, CLAIMS_HEADER, "claims")
    date_cache: dict[str, int] = {}
    vocab: dict[str, int] = {}
    ep, days, src, knd, cds = [], [], [], [], []
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        if len(row) != 5:
            raise ClaimsFormatError(f"claims line {line}: expected 5 fields, got {len(row)}")
        pid, ds, s, k, c = row
        pi = index.get(pid)
        if pi is None:
            raise ClaimsFormatError(f"claims line {line}: patient {pid!r} absent from demographics")
        d = date_cache.get(ds)
        if d is None:
            try:
                d = date.fromisoformat(ds).toordinal()
            except ValueError:
                raise ClaimsFormatError(f"claims line {line}: malformed date {ds!r}") from None
            if len(ds) != 10:
                raise ClaimsFormatError(f"claims line {line}: malformed date {ds!r}")
            date_cache[ds] = d
        si = _SOURCE_TOKENS.get(s)
        if si is None:
            raise ClaimsFormatError(f"claims line {line}: unknown source {s!r}")
        ki = _KIND_TOKENS.get(k)
        if ki is None:
            raise ClaimsFormatError(f"claims line {line}: unknown kind {k!r}")
        if not c:
            raise ClaimsFormatError(f"claims line {line}: empty code")
        ep.append(pi)
        days.append(d)
        src.append(si)
        knd.append(ki)
        cid = vocab.get(c)
        if cid is None:
            cid = vocab[c] = len(vocab)
        cds.append(cid)
    return Population.from_arrays(
        pids,
        [d[1] for d in demo],
        [_SEX_TOKENS[d[2].value] for d in demo],
        np.asarray(ep, dtype=np.int64),
        np.asarray(days, dtype=np.int64),
        np.asarray(src, dtype=np.int64),
        np.asarray(knd, dtype=np.int64),
        np.asarray(cds, dtype=np.int64),
        list(vocab),
    )


def write_claims(pop: Population, stream: IO[str]) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(CLAIMS_HEADER)
    iso: dict[int, str] = {}
    ep = pop.event_patient
    for e in range(pop.n_events):
        d = int(pop.days[e])
        ds = iso.get(d)
        if ds is None:
            ds = iso[d] = from_ordinal(d).isoformat()
        w.writerow((
            pop.patient_ids[ep[e]],
            ds,
            SOURCES[pop.source[e]].value,
            KINDS[pop.kind[e]].value,
            pop.vocab[pop.code[e]],
        ))


def write_demographics(pop: Population, stream: IO[str]) -> None:
    w = csv.writer(stream, lineterminator="\n")
    w.writerow(DEMOGRAPHICS_HEADER)
    for pid, by, sx in zip(pop.patient_ids, pop.birth_years, pop.sexes):
        w.writerow((pid, int(by), SEXES[sx].value))


def read_population(claims_path: str | Path, demographics_path: str | Path) -> Population:
    with open(claims_path, newline="", encoding="utf-8") as c, \
            open(demographics_path, newline="", encoding="utf-8") as d:
        return parse_claims(c, d)


def write_population(pop: Population, claims_path: str | Path, demographics_path: str | Path) -> None:
    with open(claims_path, "w", newline="", encoding="utf-8") as f:
        write_claims(pop, f)
    with open(demographics_path, "w", newline="", encoding="utf-8") as f:
        write_demographics(pop, f)


def roundtrip(pop: Population) -> Population:
    """Serialize and re-parse in memory."""
    c, d = io.StringIO(), io.StringIO()
    write_claims(pop, c)
    write_demographics(pop, d)
    c.seek(0)
    d.seek(0)
    return parse_claims(c, d)
