"""Versioned pipeline configuration with strict key checking."""
from __future__ import annotations

import itertools
import json
from datetime import date
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .cohort import CohortMode
from .gbt import TrainConfig
from .protocol import RegimeName
from .rcs import WindowSpec, default_splits, enumerate_cross_sections


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PathsConfig(_Strict):
    codesets: str
    concepts: str
    claims: Optional[str] = None  # defaults to the synth stage output
    demographics: Optional[str] = None
    out: str = "out"


class SynthSection(_Strict):
    n_patients: int = Field(50_000, ge=0)
    study_start: date = date(2015, 10, 1)
    study_end: date = date(2020, 6, 30)
    target_incidence: float = Field(0.004, gt=0, lt=1)
    recording_probability: float = Field(0.5, ge=0, le=1)
    coefficients: Optional[dict[str, float]] = None


class WindowSection(_Strict):
    study_start: date
    study_end: date
    lookback_months: int = 24
    outcome_months: int = 6
    shift_months: int = 3

    def spec(self) -> WindowSpec:
        return WindowSpec(self.study_start, self.study_end, self.lookback_months, self.outcome_months,
                          self.shift_months)


class CohortSection(_Strict):
    modes: list[Literal["NaflInclusive", "NonNafl"]] = ["NaflInclusive", "NonNafl"]
    control_ratio: int = Field(5, ge=1)

    @property
    def mode_enums(self) -> list[CohortMode]:
        return [CohortMode(m) for m in self.modes]


class FeatureSection(_Strict):
    top_k_per_kind: int = Field(50, ge=0)
    skip_kd_codes: bool = True


class GridSection(_Strict):
    max_depth: list[int] = [3, 5, 7]
    learning_rate: list[float] = [0.05, 0.1, 0.3]
    reg_lambda: list[float] = [1.0, 10.0]
    gamma: float = 0.0
    min_child_weight: float = 1.0
    n_rounds: int = 200
    early_stopping_rounds: int = 20

    def configs(self, seed: int) -> list[TrainConfig]:
        return [
            TrainConfig(n_rounds=self.n_rounds, learning_rate=eta, max_depth=d, reg_lambda=lam, gamma=self.gamma,
                        min_child_weight=self.min_child_weight, early_stopping_rounds=self.early_stopping_rounds,
                        seed=seed)
            for d, eta, lam in itertools.product(self.max_depth, self.learning_rate, self.reg_lambda)
        ]


class RFESection(_Strict):
    enabled: bool = True
    drop_fraction: float = Field(0.2, gt=0, lt=1)
    min_features: int = Field(8, ge=1)


class TuningSection(_Strict):
    grid: GridSection = GridSection()
    rfe: RFESection = RFESection()


class EvaluationSection(_Strict):
    benchmarks: dict[Literal["NaflInclusive", "NonNafl"], list[str]] = {
        "NaflInclusive": ["nafl", "t2dm"], "NonNafl": ["t2dm"],
    }
    window_months: int = Field(24, ge=1)
    ci_level: float = Field(0.95, gt=0, lt=1)


class PipelineConfig(_Strict):
    version: Literal[1]
    seed: int
    paths: PathsConfig
    window: WindowSection
    synth: Optional[SynthSection] = None
    cohort: CohortSection = CohortSection()
    features: FeatureSection = FeatureSection()
    tuning: TuningSection = TuningSection()
    regimes: list[Literal["HoldoutRegime", "ProspectiveRegime", "StabilityRegime"]] = [
        "HoldoutRegime", "ProspectiveRegime", "StabilityRegime",
    ]
    evaluation: EvaluationSection = EvaluationSection()
    base_dir: str = Field(".", exclude=True)

    @field_validator("regimes")
    @classmethod
    def _unique_regimes(cls, v):
        if len(set(v)) != len(v):
            raise ValueError("duplicate regimes")
        return v

    @model_validator(mode="after")
    def _needs_input(self):
        if self.synth is None and (self.paths.claims is None or self.paths.demographics is None):
            raise ValueError("paths.claims and paths.demographics are required without a synth section")
        return self

    @property
    def regime_enums(self) -> list[RegimeName]:
        return [RegimeName(r) for r in self.regimes]

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path


def load_config(path: str | Path, *, seed: int | None = None) -> PipelineConfig:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if "base_dir" in raw:
        raise ConfigError("base_dir is not a config key")
    if seed is not None:
        raw["seed"] = seed
    raw["base_dir"] = str(path.resolve().parent)
    try:
        cfg = PipelineConfig.model_validate(raw)
    except ValidationError as exc:
        first = exc.errors()[0]
        loc = ".".join(str(x) for x in first["loc"])
        raise ConfigError(f"invalid config at {loc or '<root>'}: {first['msg']}") from None
    for key in ("codesets", "concepts"):
        p = cfg.resolve(getattr(cfg.paths, key))
        if not p.is_file():
            raise ConfigError(f"paths.{key} does not exist: {p}")
    try:
        spec = cfg.window.spec()
        default_splits(len(enumerate_cross_sections(spec)), spec)
    except ValueError as exc:
        raise ConfigError(f"invalid window: {exc}") from None
    return cfg
