"""Compare the compiled and pure-Python kernel backends.

    python3 benchmarks/bench_kernels.py [--rows 3000] [--cols 50] [--rounds 30]

Trains the same model under each backend, checks the serialized models are
identical, then times prediction and TreeSHAP on the trained ensemble.
"""
from __future__ import annotations

import argparse
import json
import time

import numpy as np

from rcsboost import _kernels
from rcsboost.explain import tree_shap
from rcsboost.gbt import TrainConfig, predict_margin, train


def make_data(n: int, p: int, seed: int):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    X[rng.random((n, p)) < 0.2] = np.nan
    z = np.nan_to_num(X[:, 0]) * 2 - np.nan_to_num(X[:, 1]) + rng.normal(size=n)
    return X, (z > 1.0).astype(np.int8)


def timed(fn, repeat: int = 1):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=3000)
    ap.add_argument("--cols", type=int, default=50)
    ap.add_argument("--rounds", type=int, default=30)
    ap.add_argument("--shap-rows", type=int, default=500)
    args = ap.parse_args()

    X, y = make_data(args.rows, args.cols, 0)
    cfg = TrainConfig(n_rounds=args.rounds, max_depth=5, early_stopping_rounds=None)
    backends = _kernels.available()
    results, models = {}, {}
    for name in backends:
        with _kernels.backend_scope(name):
            t_train, model = timed(lambda: train((X, y), cfg))
            t_pred, _ = timed(lambda: predict_margin(model, X), repeat=3)
            t_shap, _ = timed(lambda: tree_shap(model, X[: args.shap_rows]))
        models[name] = json.dumps(model.to_json(), sort_keys=True)
        results[name] = {"train": t_train, "predict": t_pred, "shap": t_shap}

    print(f"{args.rows} rows x {args.cols} columns, {args.rounds} rounds, SHAP on {args.shap_rows} rows")
    print(f"{'backend':<8} {'train s':>9} {'predict s':>10} {'shap s':>9}")
    for name, r in results.items():
        print(f"{name:<8} {r['train']:>9.3f} {r['predict']:>10.4f} {r['shap']:>9.3f}")
    if len(results) == 2:
        py, cy = results["python"], results["cython"]
        print("speedup  " + "  ".join(f"{k} {py[k] / cy[k]:.1f}x" for k in py))
        print("models identical:", models["python"] == models["cython"])
    else:
        print("compiled backend not built; only the fallback was timed")


if __name__ == "__main__":
    main()
