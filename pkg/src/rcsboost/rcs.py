"""Rolling cross-sections: (lookback, outcome) window pairs and split assignment."""
from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import date, timedelta

import numpy as np

from .claims import PatientRecord
from .months import add_months


@dataclass(frozen=True)
class WindowSpec:
    study_start: date
    study_end: date
    lookback_months: int = 24
    outcome_months: int = 6
    shift_months: int = 3

    def __post_init__(self):
        for name in ("lookback_months", "outcome_months", "shift_months"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.study_end <= self.study_start:
            raise ValueError("study_end must be after study_start")


@dataclass(frozen=True)
class CrossSection:
    """Lookback is ``[lookback_start, index_date]``; outcome is ``(index_date, outcome_end]``."""

    id: int
    index_date: date
    lookback_start: date
    outcome_end: date

    @property
    def lookback_bounds(self) -> tuple[int, int]:
        return self.lookback_start.toordinal(), self.index_date.toordinal()

    @property
    def outcome_bounds(self) -> tuple[int, int]:
        """Ordinal bounds as an inclusive range ``[index + 1, outcome_end]``."""
        return self.index_date.toordinal() + 1, self.outcome_end.toordinal()


@dataclass(frozen=True)
class SplitAssignment:
    train_ids: frozenset[int]
    holdout_id: int
    scoring_id: int

    @property
    def prospective_train_ids(self) -> frozenset[int]:
        return frozenset(range(1, self.holdout_id + 1))


def enumerate_cross_sections(spec: WindowSpec) -> list[CrossSection]:
    out = []
    limit = spec.study_end + timedelta(days=1)
    k = 1
    while True:
        # Both ends are offsets from study_start so day clamping never drifts them out of the study.
        offset = (k - 1) * spec.shift_months
        index = add_months(spec.study_start, spec.lookback_months + offset)
        outcome_end = add_months(spec.study_start, spec.lookback_months + spec.outcome_months + offset)
        if outcome_end > limit:
            break
        out.append(CrossSection(k, index, add_months(spec.study_start, offset), outcome_end))
        k += 1
    return out


def slice_events(patient: PatientRecord, cs: CrossSection) -> tuple[np.ndarray, np.ndarray]:
    """Positions of the patient's lookback and outcome events (sorted dates)."""
    lo, hi = cs.lookback_bounds
    a = np.searchsorted(patient.days, lo, side="left")
    b = np.searchsorted(patient.days, hi, side="right")
    c = np.searchsorted(patient.days, cs.outcome_bounds[1], side="right")
    return np.arange(a, b), np.arange(b, c)


def slice(patient: PatientRecord, cs: CrossSection):  # noqa: A001 - public name per contract
    """Return ``(lookback_events, outcome_events)`` as ClaimEvent tuples."""
    events = patient.events
    lb, oc = slice_events(patient, cs)
    return tuple(events[i] for i in lb), tuple(events[i] for i in oc)


def split_gap(spec: WindowSpec | None = None) -> int:
    """Cross-sections between train end, holdout and scoring so outcome windows never overlap."""
    if spec is None:
        return 2
    return max(1, math.ceil(spec.outcome_months / spec.shift_months))


def default_splits(n_cross_sections: int, spec: WindowSpec | None = None) -> SplitAssignment:
    gap = split_gap(spec)
    n = n_cross_sections
    if n >= 6 + 2 * gap:
        return SplitAssignment(frozenset(range(1, 7)), 6 + gap, 6 + 2 * gap)
    last_train = n - 2 * gap
    if last_train < 1:
        raise ValueError(f"{n} cross-sections admit no leakage-free split (need >= {2 * gap + 1})")
    return SplitAssignment(frozenset(range(1, last_train + 1)), n - gap, n)
