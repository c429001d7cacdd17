"""Tree ensemble data model, prediction and JSON serialization."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .. import _kernels
from ..features import FeatureMatrix

MODEL_VERSION = 1


class ModelError(ValueError):
    pass


class SchemaMismatch(ModelError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    n_rounds: int = 200
    learning_rate: float = 0.1
    max_depth: int = 5
    reg_lambda: float = 1.0
    gamma: float = 0.0
    min_child_weight: float = 1.0
    base_score: float = 0.0
    base_score_from_prevalence: bool = False
    early_stopping_rounds: int | None = 20
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.learning_rate <= 1.0):
            raise ModelError(f"learning_rate must be in (0, 1], got {self.learning_rate}")
        if self.reg_lambda < 0 or self.gamma < 0 or self.min_child_weight < 0:
            raise ModelError("reg_lambda, gamma and min_child_weight must be non-negative")
        if self.max_depth < 1:
            raise ModelError("max_depth must be at least 1")
        if self.n_rounds < 0:
            raise ModelError("n_rounds must be non-negative")
        if self.early_stopping_rounds is not None and self.early_stopping_rounds < 1:
            raise ModelError("early_stopping_rounds must be positive or None")
        if not math.isfinite(self.base_score):
            raise ModelError("base_score must be finite")

    def replace(self, **kw) -> "TrainConfig":
        d = asdict(self)
        d.update(kw)
        return TrainConfig(**d)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ModelError(f"unknown TrainConfig keys: {sorted(extra)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class Tree:
    """Flat node arrays; node 0 is the root and ``feature < 0`` marks a leaf."""

    feature: np.ndarray  # int32
    threshold: np.ndarray
    default_left: np.ndarray  # uint8
    left: np.ndarray  # int32
    right: np.ndarray  # int32
    value: np.ndarray  # leaf weight, eta already folded in
    cover: np.ndarray  # hessian sum at the node
    gain: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature < 0

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max()) if self.n_nodes else 0

    def leaf_of(self, x: Sequence[float]) -> int:
        node = 0
        while self.feature[node] >= 0:
            v = x[self.feature[node]]
            if v != v:
                node = self.left[node] if self.default_left[node] else self.right[node]
            elif v < self.threshold[node]:
                node = self.left[node]
            else:
                node = self.right[node]
        return int(node)

    def to_nested(self, node: int = 0, names: Sequence[str] | None = None) -> dict:
        if self.feature[node] < 0:
            return {"id": node, "leaf": float(self.value[node]), "cover": float(self.cover[node])}
        f = int(self.feature[node])
        out = {
            "id": node,
            "feature": f,
            "threshold": float(self.threshold[node]),
            "default": "Left" if self.default_left[node] else "Right",
            "gain": float(self.gain[node]),
            "cover": float(self.cover[node]),
            "left": self.to_nested(int(self.left[node]), names),
            "right": self.to_nested(int(self.right[node]), names),
        }
        if names is not None:
            out["feature_name"] = names[f]
        return out

    @classmethod
    def from_nested(cls, root: Mapping) -> "Tree":
        nodes: dict[int, Mapping] = {}
        stack = [root]
        while stack:
            nd = stack.pop()
            nid = int(nd["id"])
            if nid in nodes:
                raise ModelError(f"duplicate node id {nid}")
            nodes[nid] = nd
            if "leaf" not in nd:
                stack.extend((nd["left"], nd["right"]))
        n = len(nodes)
        if sorted(nodes) != list(range(n)):
            raise ModelError("node ids must be 0..n-1")
        t = cls.empty(n)
        for nid, nd in nodes.items():
            t.cover[nid] = nd["cover"]
            if "leaf" in nd:
                t.value[nid] = nd["leaf"]
                continue
            if nd["default"] not in ("Left", "Right"):
                raise ModelError(f"bad default direction {nd['default']!r}")
            t.feature[nid] = nd["feature"]
            t.threshold[nid] = nd["threshold"]
            t.default_left[nid] = nd["default"] == "Left"
            t.left[nid] = nd["left"]["id"]
            t.right[nid] = nd["right"]["id"]
            t.gain[nid] = nd["gain"]
        return t

    @classmethod
    def empty(cls, n: int) -> "Tree":
        return cls(
            np.full(n, -1, dtype=np.int32), np.full(n, np.nan), np.zeros(n, dtype=np.uint8),
            np.full(n, -1, dtype=np.int32), np.full(n, -1, dtype=np.int32),
            np.zeros(n), np.zeros(n), np.zeros(n),
        )

    @classmethod
    def leaf(cls, value: float, cover: float = 0.0) -> "Tree":
        t = cls.empty(1)
        t.value[0] = value
        t.cover[0] = cover
        return t


@dataclass(frozen=True)
class FlatForest:
    feature: np.ndarray
    threshold: np.ndarray
    default_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray
    roots: np.ndarray


def flatten(trees: Sequence[Tree]) -> FlatForest:
    offsets = np.cumsum([0] + [t.n_nodes for t in trees])
    def cat(attr, dtype):
        parts = [getattr(t, attr) for t in trees]
        return np.ascontiguousarray(np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype))

    def child(attr):
        parts = [np.where(getattr(t, attr) >= 0, getattr(t, attr) + off, -1) for t, off in zip(trees, offsets)]
        return np.ascontiguousarray(np.concatenate(parts).astype(np.int32) if parts else np.zeros(0, np.int32))

    return FlatForest(
        cat("feature", np.int32), cat("threshold", np.float64), cat("default_left", np.uint8),
        child("left"), child("right"), cat("value", np.float64), cat("cover", np.float64),
        np.ascontiguousarray(offsets[:-1], dtype=np.int64),
    )


@dataclass(frozen=True, eq=False)
class Ensemble:
    trees: tuple[Tree, ...]
    base_score: float
    learning_rate: float
    schema_fingerprint: str
    n_features: int
    feature_names: tuple[str, ...] = ()
    config: TrainConfig | None = None
    best_round: int | None = None
    validation_history: tuple[float, ...] = ()
    _flat: list = field(default_factory=list, repr=False, compare=False)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def flat(self) -> FlatForest:
        if not self._flat:
            self._flat.append(flatten(self.trees))
        return self._flat[0]

    def truncated(self, n: int) -> "Ensemble":
        return Ensemble(self.trees[:n], self.base_score, self.learning_rate, self.schema_fingerprint,
                        self.n_features, self.feature_names, self.config, self.best_round,
                        self.validation_history)

    def check(self, m: FeatureMatrix | None = None, fingerprint: str | None = None) -> None:
        fp = fingerprint if fingerprint is not None else m.schema.fingerprint
        if fp != self.schema_fingerprint:
            raise SchemaMismatch(f"model schema {self.schema_fingerprint} does not match matrix schema {fp}")

    def gain_importance(self) -> np.ndarray:
        out = np.zeros(self.n_features)
        for t in self.trees:
            split = t.feature >= 0
            np.add.at(out, t.feature[split], t.gain[split])
        return out

    def to_json(self) -> dict:
        names = self.feature_names or None
        return {
            "version": MODEL_VERSION,
            "kind": "gbt-logistic",
            "schema_fingerprint": self.schema_fingerprint,
            "n_features": self.n_features,
            "feature_names": list(self.feature_names),
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "config": self.config.to_json() if self.config else None,
            "best_round": self.best_round,
            "validation_history": list(self.validation_history),
            "trees": [t.to_nested(0, names) for t in self.trees],
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "Ensemble":
        if d.get("version") != MODEL_VERSION:
            raise ModelError(f"unsupported model version {d.get('version')!r}")
        return cls(
            tuple(Tree.from_nested(t) for t in d["trees"]),
            float(d["base_score"]),
            float(d["learning_rate"]),
            d["schema_fingerprint"],
            int(d["n_features"]),
            tuple(d.get("feature_names", ())),
            TrainConfig.from_json(d["config"]) if d.get("config") else None,
            d.get("best_round"),
            tuple(d.get("validation_history", ())),
        )

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f, indent=1, sort_keys=True, allow_nan=False)
            f.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "Ensemble":
        with open(path, encoding="utf-8") as f:
            return cls.from_json(json.load(f))


def _dense(X) -> np.ndarray:
    if isinstance(X, FeatureMatrix):
        X = X.to_dense()
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    return X


def predict_margin(ens: Ensemble, X) -> np.ndarray:
    if isinstance(X, FeatureMatrix):
        ens.check(X)
    X = _dense(X)
    if X.shape[1] != ens.n_features:
        raise SchemaMismatch(f"expected {ens.n_features} columns, got {X.shape[1]}")
    if ens.n_trees == 0:
        return np.full(X.shape[0], float(ens.base_score))
    f = ens.flat
    return _kernels.backend().predict_margin(X, f.feature, f.threshold, f.default_left, f.left, f.right,
                                             f.value, f.roots, float(ens.base_score))


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def predict_proba(ens: Ensemble, X) -> np.ndarray:
    return sigmoid(predict_margin(ens, X))


def log_loss(y, margin) -> float:
    """Mean logistic loss, computed stably from margins."""
    y = np.asarray(y, dtype=float)
    z = np.asarray(margin, dtype=float)
    return float(np.mean(np.logaddexp(0.0, z) - y * z))
