"""Synthetic claims with a planted disease signal and known onset dates.

Each primary code with a ``carrier_prevalence`` defines a static carrier
trait. Carriers emit the code (and any ``follows`` codes) at elevated
monthly rates, and the 6-month disease hazard is logistic in the carrier
indicators. Every patient draws from its own stream, derived by hashing
``(seed, patient_id)``, so generation order never changes the output.
"""
from __future__ import annotations

import csv
import hashlib
import itertools
import math
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.optimize import brentq

from .claims import (KIND_INDEX, SOURCE_INDEX, Kind, Population, Source, write_claims,
                     write_demographics)
from .months import add_months, from_ordinal, months_between


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CodeSpec:
    code: str
    kind: Kind
    background_rate: float = 0.0
    carrier_prevalence: float | None = None  # makes this code a carrier trait
    carrier_rate: float = 0.0
    follows: str | None = None  # emitted at carrier_rate by carriers of another trait
    post_onset_rate: float = 0.0  # added monthly rate after disease onset

    @property
    def source(self) -> Source:
        return Source.RX if Kind(self.kind) is Kind.DRUG else Source.DX


@dataclass(frozen=True)
class DiseaseCodes:
    nash_dx: str = "K75.81"
    fibrosis: str = "K74.0"
    nafl: str = "K76.0"
    legacy: str = "571.8"


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int
    study_start: date
    study_end: date
    code_catalog: tuple[CodeSpec, ...]
    risk_codes: frozenset = frozenset()
    coefficients: Mapping[str, float] = field(default_factory=dict)
    intercept: float | None = None
    target_incidence: float = 0.004
    recording_probability: float = 0.5
    proxy_fraction: float = 0.25
    max_diagnosis_delay_months: int = 9
    followup_dx_rate: float = 0.3
    legacy_fraction: float = 0.01
    history_months: int = 12
    full_enrollment_fraction: float = 0.7
    rx_absent_fraction: float = 0.03
    age_mean: float = 52.0
    age_sd: float = 15.0
    age_min: int = 10
    age_max: int = 95
    sex_probabilities: tuple[float, float, float] = (0.52, 0.47, 0.01)
    disease: DiseaseCodes = DiseaseCodes()
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "code_catalog", tuple(self.code_catalog))
        object.__setattr__(self, "risk_codes", frozenset(self.risk_codes))
        object.__setattr__(self, "coefficients", dict(self.coefficients))
        self.validate()

    def validate(self) -> None:
        if self.n_patients < 0:
            raise SynthConfigError("n_patients must be non-negative")
        if self.study_end <= add_months(self.study_start, 30):
            raise SynthConfigError("study_end must be more than 30 months after study_start")
        if not (0.0 < self.target_incidence < 1.0):
            raise SynthConfigError("target_incidence must be in (0, 1)")
        for name in ("recording_probability", "proxy_fraction", "legacy_fraction", "full_enrollment_fraction",
                     "rx_absent_fraction"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise SynthConfigError(f"{name} must be in [0, 1]")
        if abs(sum(self.sex_probabilities) - 1.0) > 1e-9 or min(self.sex_probabilities) < 0:
            raise SynthConfigError("sex_probabilities must be a distribution")
        codes = [c.code for c in self.code_catalog]
        if len(set(codes)) != len(codes):
            raise SynthConfigError("duplicate codes in catalog")
        traits = {c.code for c in self.code_catalog if c.carrier_prevalence is not None}
        for c in self.code_catalog:
            for name in ("background_rate", "carrier_rate", "post_onset_rate"):
                v = getattr(c, name)
                if not (0.0 <= v <= 1.0):
                    raise SynthConfigError(f"{c.code}: {name} must be in [0, 1]")
            if c.carrier_prevalence is not None and not (0.0 <= c.carrier_prevalence <= 1.0):
                raise SynthConfigError(f"{c.code}: carrier_prevalence must be in [0, 1]")
            if c.follows is not None and c.follows not in traits:
                raise SynthConfigError(f"{c.code} follows unknown trait {c.follows!r}")
            if c.background_rate + c.carrier_rate + c.post_onset_rate > 1.0:
                raise SynthConfigError(f"{c.code}: combined monthly rate exceeds 1")
        for code in self.coefficients:
            if code not in traits:
                raise SynthConfigError(f"coefficient for {code!r}, which is not a carrier trait")
        unknown = self.risk_codes - set(codes)
        if unknown:
            raise SynthConfigError(f"risk codes not in catalog: {sorted(unknown)}")
        if self.max_diagnosis_delay_months < 0 or self.history_months < 0:
            raise SynthConfigError("delays and history must be non-negative")

    @property
    def traits(self) -> list[CodeSpec]:
        return [c for c in self.code_catalog if c.carrier_prevalence is not None]

    def replace(self, **kw) -> "SynthConfig":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return SynthConfig(**d)


@dataclass(frozen=True)
class GroundTruth:
    onset: Mapping[str, date | None]
    prevalent: frozenset  # patients diseased before the study (legacy-coded)
    intercept: float
    carriers: Mapping[str, frozenset] = field(default_factory=dict)  # trait codes per patient

    def diseased_by(self, pid: str, when: date) -> bool:
        o = self.onset.get(pid)
        return pid in self.prevalent or (o is not None and o <= when)

    def true_label(self, pid: str, cs) -> bool:
        """Disease onset inside the cross-section's outcome window."""
        o = self.onset.get(pid)
        return o is not None and cs.index_date < o <= cs.outcome_end

    def incidence(self, start: date, months: int = 6) -> float:
        end = add_months(start, months)
        at_risk = [p for p in self.onset if p not in self.prevalent and not self.diseased_by(p, start - timedelta(days=1))]
        if not at_risk:
            return 0.0
        hits = sum(1 for p in at_risk if self.onset[p] is not None and start <= self.onset[p] < end)
        return hits / len(at_risk)




def six_month_hazard(cfg: SynthConfig, intercept: float, carriers: np.ndarray) -> np.ndarray:
    beta = np.array([cfg.coefficients.get(t.code, 0.0) for t in cfg.traits])
    z = intercept + carriers @ beta
    return 1.0 / (1.0 + np.exp(-z))


def expected_incidence(cfg: SynthConfig, intercept: float) -> float:
    """Population-average 6-month hazard, summed exactly over carrier patterns."""
    traits = cfg.traits
    weighted = [i for i, t in enumerate(traits) if cfg.coefficients.get(t.code, 0.0) != 0.0]
    if not weighted:
        return float(1.0 / (1.0 + math.exp(-intercept)))
    total = 0.0
    for bits in itertools.product((0, 1), repeat=len(weighted)):
        w = 1.0
        z = intercept
        for b, i in zip(bits, weighted):
            p = traits[i].carrier_prevalence
            w *= p if b else 1.0 - p
            z += b * cfg.coefficients[traits[i].code]
        total += w / (1.0 + math.exp(-z))
    return total


def calibrate_intercept(cfg: SynthConfig) -> float:
    if cfg.intercept is not None:
        return float(cfg.intercept)
    return float(brentq(lambda b: expected_incidence(cfg, b) - cfg.target_incidence, -40.0, 40.0, xtol=1e-14))


def patient_stream(seed: int, pid: str) -> np.random.Generator:
    digest = hashlib.blake2b(f"{seed}:{pid}".encode(), digest_size=16).digest()
    return np.random.default_rng([int.from_bytes(digest[:8], "little"), int.from_bytes(digest[8:], "little")])


def patient_id(i: int, width: int = 6) -> str:
    return f"P{i:0{width}d}"


class _Plan:
    """Per-config constants shared by every patient."""

    def __init__(self, cfg: SynthConfig, intercept: float):
        self.cfg = cfg
        self.intercept = intercept
        self.hist_start = add_months(cfg.study_start, -cfg.history_months)
        self.n_months = months_between(self.hist_start, cfg.study_end) + 1
        self.study_month0 = cfg.history_months
        starts = [add_months(self.hist_start, m) for m in range(self.n_months + 1)]
        self.month_start = np.array([d.toordinal() for d in starts], dtype=np.int64)
        self.month_len = np.diff(self.month_start)
        self.month_len[-1] = min(self.month_len[-1], cfg.study_end.toordinal() - self.month_start[-2] + 1)
        cat = cfg.code_catalog
        self.codes = [c.code for c in cat] + [cfg.disease.nash_dx, cfg.disease.fibrosis, cfg.disease.legacy]
        if cfg.disease.nafl not in self.codes:
            self.codes.append(cfg.disease.nafl)
        self.codes = list(dict.fromkeys(self.codes))
        self.code_id = {c: i for i, c in enumerate(self.codes)}
        self.cat_ids = np.array([self.code_id[c.code] for c in cat], dtype=np.int64)
        self.cat_kind = np.array([KIND_INDEX[Kind(c.kind)] for c in cat], dtype=np.int64)
        self.cat_source = np.array([SOURCE_INDEX[c.source] for c in cat], dtype=np.int64)
        self.is_rx = np.array([Kind(c.kind) is Kind.DRUG for c in cat])
        self.base = np.array([c.background_rate for c in cat])
        self.post = np.array([c.post_onset_rate for c in cat])
        self.traits = cfg.traits
        trait_idx = {t.code: i for i, t in enumerate(self.traits)}
        self.trait_prev = np.array([t.carrier_prevalence for t in self.traits])
        # code x trait -> carrier rate
        self.carrier = np.zeros((len(cat), len(self.traits)))
        for j, c in enumerate(cat):
            owner = c.code if c.carrier_prevalence is not None else c.follows
            if owner is not None:
                self.carrier[j, trait_idx[owner]] = c.carrier_rate
        self.beta = np.array([cfg.coefficients.get(t.code, 0.0) for t in self.traits])
        self.n_study_months = self.n_months - self.study_month0
        dx = SOURCE_INDEX[Source.DX]
        diag = KIND_INDEX[Kind.DIAGNOSIS]
        self.disease_meta = (dx, diag)


def _simulate(plan: _Plan, pid: str):
    cfg = plan.cfg
    rng = patient_stream(cfg.seed, pid)
    M = plan.n_months
    age = int(np.clip(np.rint(rng.normal(cfg.age_mean, cfg.age_sd)), cfg.age_min, cfg.age_max))
    birth_year = cfg.study_start.year + 2 - age
    sex = int(rng.choice(3, p=cfg.sex_probabilities))

    if rng.random() < cfg.full_enrollment_fraction:
        m_lo, m_hi = 0, M - 1
    else:
        a, b = np.sort(rng.integers(0, M, size=2))
        m_lo, m_hi = int(a), int(b)
    rx_absent = rng.random() < cfg.rx_absent_fraction
    carriers = (rng.random(len(plan.traits)) < plan.trait_prev).astype(float)

    p6 = 1.0 / (1.0 + math.exp(-(plan.intercept + float(carriers @ plan.beta))))
    q = 1.0 - (1.0 - p6) ** (1.0 / 6.0)
    u_onset = rng.random()
    onset_month = None
    if q > 0.0:
        m = math.floor(math.log1p(-u_onset) / math.log1p(-q)) if q < 1.0 else 0
        if m < plan.n_study_months:
            onset_month = plan.study_month0 + m
    legacy = rng.random() < cfg.legacy_fraction

    rates = np.broadcast_to(plan.base + plan.carrier @ carriers, (M, len(plan.base))).copy()
    if onset_month is not None:
        rates[onset_month:] += plan.post
    rates[:m_lo] = 0.0
    rates[m_hi + 1:] = 0.0
    if rx_absent:
        rates[:, plan.is_rx] = 0.0
    hits = rng.random(rates.shape) < rates
    mm, cc = np.nonzero(hits)
    day_u = rng.random(len(mm))
    days = plan.month_start[mm] + np.floor(day_u * plan.month_len[mm]).astype(np.int64)
    code = plan.cat_ids[cc]
    kind = plan.cat_kind[cc]
    source = plan.cat_source[cc]

    extra = []  # (month, day_fraction, code)
    onset_day = None
    if onset_month is not None:
        od = int(plan.month_start[onset_month] + math.floor(rng.random() * plan.month_len[onset_month]))
        onset_day = od
        recorded = rng.random() < cfg.recording_probability
        proxy = rng.random() < cfg.proxy_fraction
        delay = int(rng.integers(0, cfg.max_diagnosis_delay_months + 1))
        dm = onset_month + delay
        if recorded and dm <= m_hi:
            first = dm
            if proxy:
                extra.append((first, rng.random(), cfg.disease.fibrosis))
                extra.append((first, rng.random(), cfg.disease.nafl))
            else:
                extra.append((first, rng.random(), cfg.disease.nash_dx))
            for m2 in range(first + 1, m_hi + 1):
                if rng.random() < cfg.followup_dx_rate:
                    extra.append((m2, rng.random(), cfg.disease.fibrosis if proxy else cfg.disease.nash_dx))
    if legacy and m_lo < plan.study_month0:
        lm = int(rng.integers(m_lo, plan.study_month0))
        extra.append((lm, rng.random(), cfg.disease.legacy))
        for m2 in range(plan.study_month0, m_hi + 1):
            if rng.random() < cfg.followup_dx_rate:
                extra.append((m2, rng.random(), cfg.disease.nash_dx))
    if extra:
        em = np.array([e[0] for e in extra], dtype=np.int64)
        ef = np.array([e[1] for e in extra])
        ed = plan.month_start[em] + np.floor(ef * plan.month_len[em]).astype(np.int64)
        if onset_day is not None:
            # a diagnosis in the onset month never precedes the onset itself
            ed = np.where((em == onset_month) & (ed < onset_day), onset_day, ed)
        days = np.concatenate([days, ed])
        code = np.concatenate([code, [plan.code_id[e[2]] for e in extra]])
        kind = np.concatenate([kind, np.full(len(extra), plan.disease_meta[1])])
        source = np.concatenate([source, np.full(len(extra), plan.disease_meta[0])])
    onset = from_ordinal(onset_day) if onset_day is not None else None
    traits = frozenset(t.code for t, b in zip(plan.traits, carriers) if b)
    return birth_year, sex, days, source, kind, code, onset, legacy and m_lo < plan.study_month0, traits


def generate(cfg: SynthConfig) -> tuple[Population, GroundTruth]:
    cfg.validate()
    intercept = calibrate_intercept(cfg)
    plan = _Plan(cfg, intercept)
    width = max(6, len(str(cfg.n_patients)))
    pids = [patient_id(i + 1, width) for i in range(cfg.n_patients)]
    births, sexes = [], []
    ev_p, ev_d, ev_s, ev_k, ev_c = [], [], [], [], []
    onset: dict[str, date | None] = {}
    prevalent = set()
    carriers = {}
    for i, pid in enumerate(pids):
        by, sx, d, s, k, c, o, prev, carriers[pid] = _simulate(plan, pid)
        births.append(by)
        sexes.append(sx)
        ev_p.append(np.full(len(d), i, dtype=np.int64))
        ev_d.append(d)
        ev_s.append(s)
        ev_k.append(k)
        ev_c.append(c)
        onset[pid] = o
        if prev:
            prevalent.add(pid)

    def cat(parts):
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    pop = Population.from_arrays(pids, births, sexes, cat(ev_p), cat(ev_d), cat(ev_s), cat(ev_k), cat(ev_c),
                                 plan.codes)
    return pop, GroundTruth(onset, frozenset(prevalent), intercept, carriers)


def write_ground_truth(gt: GroundTruth, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["patient_id", "onset_date"])
        for pid in sorted(gt.onset):
            o = gt.onset[pid]
            w.writerow((pid, o.isoformat() if o else ""))


def read_ground_truth(path: str | Path) -> dict[str, date | None]:
    out = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        for row in reader:
            out[row["patient_id"]] = date.fromisoformat(row["onset_date"]) if row["onset_date"] else None
    return out


def emit_fixture(pop: Population, gt: GroundTruth, directory: str | Path) -> dict[str, Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {"claims": d / "claims.csv", "demographics": d / "demographics.csv", "ground_truth": d / "ground_truth.csv"}
    with open(paths["claims"], "w", newline="", encoding="utf-8") as f:
        write_claims(pop, f)
    with open(paths["demographics"], "w", newline="", encoding="utf-8") as f:
        write_demographics(pop, f)
    write_ground_truth(gt, paths["ground_truth"])
    return paths


# --- shipped scenario ----------------------------------------------------------

def _c(code, kind, base=0.0, prev=None, rate=0.0, follows=None, post=0.0):
    return CodeSpec(code, Kind(kind), base, prev, rate, follows, post)


DX, RX, PR, SV = Kind.DIAGNOSIS, Kind.DRUG, Kind.PROCEDURE, Kind.SPECIALTY_VISIT

DEFAULT_CATALOG: tuple[CodeSpec, ...] = (
    # at-risk comorbidities (carrier traits)
    _c("K76.0", DX, 0.0, 0.15, 0.12),  # NAFL, strong planted code
    _c("E11.9", DX, 0.0, 0.20, 0.20),  # type 2 diabetes, weak planted code
    _c("R94.5", DX, 0.002, 0.08, 0.10, post=0.15),  # abnormal liver function, weak planted code
    _c("Gastroenterology", SV, 0.004, 0.07, 0.08, post=0.10),  # weak planted code
    _c("E66.9", DX, 0.0, 0.25, 0.10),  # obesity
    _c("E78.5", DX, 0.0, 0.30, 0.15),  # hyperlipidemia
    _c("I10", DX, 0.0, 0.35, 0.20),  # hypertension
    # exclusions
    _c("F10.20", DX, 0.0, 0.02, 0.10),  # alcohol dependence
    _c("B18.2", DX, 0.0, 0.01, 0.10),  # chronic hepatitis C
    _c("B20", DX, 0.0, 0.005, 0.10),  # HIV
    # other liver disease (blocks proxy labels)
    _c("K70.30", DX, 0.0005),
    _c("K75.4", DX, 0.0003),
    # drugs following traits
    _c("metformin", RX, 0.0, rate=0.6, follows="E11.9"),
    _c("atorvastatin", RX, 0.0, rate=0.5, follows="E78.5"),
    _c("lisinopril", RX, 0.0, rate=0.5, follows="I10"),
    _c("Endocrinology", SV, 0.004, rate=0.06, follows="E11.9"),
    _c("Cardiology", SV, 0.006, rate=0.04, follows="I10"),
    # footprint after onset
    _c("76700", PR, 0.002, post=0.12),  # abdominal ultrasound
    _c("R16.0", DX, 0.0005, post=0.06),  # hepatomegaly
    # background noise
    _c("Z00.00", DX, 0.06),
    _c("J06.9", DX, 0.03),
    _c("M54.5", DX, 0.025),
    _c("R10.9", DX, 0.015),
    _c("K21.9", DX, 0.015),
    _c("F32.9", DX, 0.012),
    _c("J45.909", DX, 0.01),
    _c("N39.0", DX, 0.01),
    _c("E03.9", DX, 0.01),
    _c("G43.909", DX, 0.006),
    _c("L40.0", DX, 0.004),
    _c("80053", PR, 0.05),  # metabolic panel
    _c("85025", PR, 0.05),  # blood count
    _c("93000", PR, 0.015),  # ECG
    _c("71046", PR, 0.008),  # chest x-ray
    _c("amoxicillin", RX, 0.03),
    _c("omeprazole", RX, 0.04),
    _c("sertraline", RX, 0.025),
    _c("levothyroxine", RX, 0.03),
    _c("albuterol", RX, 0.02),
    _c("ibuprofen", RX, 0.03),
    _c("prednisone", RX, 0.01),
    _c("Dermatology", SV, 0.006),
)

DEFAULT_COEFFICIENTS = {"K76.0": 4.5, "E11.9": 1.2, "R94.5": 1.2, "Gastroenterology": 1.2}
DEFAULT_RISK_CODES = frozenset({"K76.0", "E11.9", "E66.9", "E78.5", "I10"})


def default_config(**overrides) -> SynthConfig:
    kw = dict(
        n_patients=50_000,
        study_start=date(2015, 10, 1),
        study_end=date(2020, 6, 30),
        code_catalog=DEFAULT_CATALOG,
        risk_codes=DEFAULT_RISK_CODES,
        coefficients=DEFAULT_COEFFICIENTS,
        target_incidence=0.004,
        max_diagnosis_delay_months=18,
        seed=20200630,
    )
    kw.update(overrides)
    return SynthConfig(**kw)


def default_codesets() -> dict:
    """Code-set config matching the default scenario, in the cohort JSON layout."""
    d = lambda *codes: [["Diagnosis", c] for c in codes]
    return {
        "version": 1,
        "at_risk_inclusion": {
            "nafl": d("K76.0"),
            "t2dm": d("E11.9"),
            "obesity": d("E66.9"),
            "hyperlipidemia": d("E78.5"),
            "hypertension": d("I10"),
        },
        "exclusion": {
            "alcohol": d("F10.20"),
            "viral_hepatitis": d("B18.2"),
            "hiv": d("B20"),
        },
        "nash_dx": d("K75.81"),
        "fibrosis_cirrhosis": d("K74.0"),
        "nafl": d("K76.0"),
        "other_liver_dx": d("K70.30", "K75.4"),
        "legacy_nash_dx": d("571.8"),
        "benchmarks": {
            "nafl": d("K76.0"),
            "t2dm": d("E11.9"),
        },
    }


def default_concepts() -> dict:
    """Knowledge-driven concepts for the default scenario."""
    return {
        "version": 1,
        "concepts": [
            {"name": "NAFL", "kind": "Diagnosis", "codes": ["K76.0"]},
            {"name": "T2DM", "kind": "Diagnosis", "codes": ["E11.9"]},
            {"name": "Obesity", "kind": "Diagnosis", "codes": ["E66.9"]},
            {"name": "Hyperlipidemia", "kind": "Diagnosis", "codes": ["E78.5"]},
            {"name": "Hypertension", "kind": "Diagnosis", "codes": ["I10"]},
            {"name": "LiverFunctionAbnormal", "kind": "Diagnosis", "codes": ["R94.5", "R16.0"]},
            {"name": "LiverImaging", "kind": "Procedure", "codes": ["76700"]},
            {"name": "Antidiabetics", "kind": "Drug", "codes": ["metformin"]},
            {"name": "Statins", "kind": "Drug", "codes": ["atorvastatin"]},
            {"name": "GastroenterologyVisit", "kind": "SpecialtyVisit", "codes": ["Gastroenterology"]},
            {"name": "EndocrinologyVisit", "kind": "SpecialtyVisit", "codes": ["Endocrinology"]},
            {"name": "CardiologyVisit", "kind": "SpecialtyVisit", "codes": ["Cardiology"]},
        ],
    }
