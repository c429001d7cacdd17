"""Hyperparameter grid search and recursive feature elimination."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from ..evaluate import average_precision
from .model import Ensemble, TrainConfig, predict_margin
from .train import _as_xy, train


@dataclass(frozen=True)
class GridCell:
    index: int
    config: TrainConfig
    auprc: float | None
    n_trees: int | None
    error: str | None = None

    def to_json(self) -> dict:
        return {"index": self.index, "config": self.config.to_json(), "auprc": self.auprc,
                "n_trees": self.n_trees, "error": self.error}


@dataclass(frozen=True)
class GridResult:
    best: TrainConfig
    best_index: int
    best_n_trees: int
    table: tuple[GridCell, ...]

    def to_json(self) -> dict:
        return {"best_index": self.best_index, "best_n_trees": self.best_n_trees,
                "best": self.best.to_json(), "table": [c.to_json() for c in self.table]}


def default_grid(n_rounds: int = 200, early_stopping_rounds: int = 20, seed: int = 0) -> list[TrainConfig]:
    return [
        TrainConfig(n_rounds=n_rounds, learning_rate=eta, max_depth=d, reg_lambda=lam,
                    early_stopping_rounds=early_stopping_rounds, seed=seed)
        for d, eta, lam in itertools.product((3, 5, 7), (0.05, 0.1, 0.3), (1.0, 10.0))
    ]


def validation_auprc(model: Ensemble, validation) -> float:
    X, y, _, _ = _as_xy(validation)
    return average_precision(predict_margin(model, X), y)


def grid_search(train_data, validation, grid: Sequence[TrainConfig], *, columns=None, threads: int = 1) -> GridResult:
    if not grid:
        raise ValueError("grid must not be empty")
    cells = []
    for i, cfg in enumerate(grid):
        try:
            model = train(train_data, cfg, validation, columns=columns, threads=threads)
            cells.append(GridCell(i, cfg, validation_auprc(model, validation), model.n_trees))
        except (ValueError, ArithmeticError) as exc:
            cells.append(GridCell(i, cfg, None, None, f"{type(exc).__name__}: {exc}"))
    ok = [c for c in cells if c.auprc is not None]
    if not ok:
        raise ValueError("every grid cell failed: " + "; ".join(c.error or "" for c in cells))
    best = min(ok, key=lambda c: (-c.auprc, c.n_trees, c.index))
    return GridResult(best.config, best.index, best.n_trees, tuple(cells))


@dataclass(frozen=True)
class RFEStep:
    n_features: int
    columns: tuple[int, ...]
    auprc: float
    n_trees: int


@dataclass(frozen=True)
class RFEResult:
    columns: tuple[int, ...]
    trajectory: tuple[RFEStep, ...]

    def to_json(self, names: Sequence[str] | None = None) -> dict:
        name = (lambda j: names[j]) if names is not None else (lambda j: j)
        return {
            "selected": [name(j) for j in self.columns],
            "trajectory": [{"n_features": s.n_features, "auprc": s.auprc, "n_trees": s.n_trees,
                            "columns": [name(j) for j in s.columns]} for s in self.trajectory],
        }


def rfe(train_data, validation, config: TrainConfig, drop_fraction: float = 0.2, min_features: int = 8, *,
        protected: Iterable[int] = (), columns: Sequence[int] | None = None, threads: int = 1) -> RFEResult:
    """Drop the lowest total-gain columns each iteration; keep the best-scoring set.

    ``protected`` columns are never dropped and do not count toward the drop quota.
    """
    if not (0.0 < drop_fraction < 1.0):
        raise ValueError("drop_fraction must be in (0, 1)")
    X, _, _, _ = _as_xy(train_data)
    current = sorted(set(range(X.shape[1]) if columns is None else columns))
    protected = set(protected) & set(current)
    steps: list[RFEStep] = []
    while True:
        model = train(train_data, config, validation, columns=current, threads=threads)
        steps.append(RFEStep(len(current), tuple(current), validation_auprc(model, validation), model.n_trees))
        droppable = [c for c in current if c not in protected]
        n_drop = max(1, int(math.floor(drop_fraction * len(current))))
        n_drop = min(n_drop, len(current) - min_features, len(droppable))
        if n_drop <= 0:
            break
        imp = model.gain_importance()
        ranked = sorted(droppable, key=lambda c: (imp[c], -c))
        dropped = set(ranked[:n_drop])
        current = [c for c in current if c not in dropped]
    best = min(steps, key=lambda s: (-s.auprc, s.n_features))
    return RFEResult(best.columns, tuple(steps))
