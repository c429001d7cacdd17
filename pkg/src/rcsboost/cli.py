"""Command-line pipeline: synth, cohort, featurize, tune, train, evaluate, explain, run-all."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from .claims import Population, read_population
from .cohort import CodeSetConfig, CohortMode, CohortResult, build_cohort, read_cohort, write_cohort
from .config import ConfigError, PipelineConfig, load_config
from .evaluate import MetricError, dump_json, rule_flags, write_curves
from .explain import aggregate_importance, tree_shap, write_importance
from .features import (FeatureMatrix, LeakageError, build_matrix, build_schema, dd_select, load_concepts, read_matrix,
                       write_dd_scores, write_matrix)
from .gbt import Ensemble
from .protocol import Regime, RegimeName, TuningResult, evaluate_regime, train_regime, tune
from .rcs import default_splits, enumerate_cross_sections
from .synth import default_config, emit_fixture, generate

log = logging.getLogger("rcsboost")


class MissingArtifact(RuntimeError):
    def __init__(self, path: Path, producer: str):
        super().__init__(f"missing {path}; run `{producer}` first")
        self.path = path
        self.producer = producer


class Layout:
    def __init__(self, out: Path):
        self.out = out

    def synth(self) -> Path:
        return self.out / "synth"

    def mode(self, mode: CohortMode) -> Path:
        return self.out / mode.slug

    def cohort_csv(self, mode):
        return self.mode(mode) / "cohort" / "cohort.csv"

    def cohort_meta(self, mode):
        return self.mode(mode) / "cohort" / "cohort_meta.json"

    def features(self, mode):
        return self.mode(mode) / "features"

    def tuning(self, mode):
        return self.mode(mode) / "tune" / "tuning.json"

    def regime(self, mode, regime: RegimeName):
        return self.mode(mode) / regime.slug


def _need(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifact(path, producer)
    return path


class Context:
    """Config plus in-memory caches so ``run-all`` parses each input once."""

    def __init__(self, cfg: PipelineConfig, out: Path, threads: int):
        self.cfg = cfg
        self.out = out
        self.layout = Layout(out)
        self.threads = threads
        self.spec = cfg.window.spec()
        self.cross_sections = enumerate_cross_sections(self.spec)
        self.split = default_splits(len(self.cross_sections), self.spec)
        self._pop: Population | None = None
        self._codes: CodeSetConfig | None = None

    def claims_paths(self) -> tuple[Path, Path]:
        p = self.cfg.paths
        if p.claims is not None:
            return self.cfg.resolve(p.claims), self.cfg.resolve(p.demographics)
        return self.layout.synth() / "claims.csv", self.layout.synth() / "demographics.csv"

    def population(self) -> Population:
        if self._pop is None:
            c, d = self.claims_paths()
            producer = "synth" if self.cfg.paths.claims is None else "an external extract"
            _need(c, producer)
            _need(d, producer)
            self._pop = read_population(c, d)
        return self._pop

    def codes(self) -> CodeSetConfig:
        if self._codes is None:
            self._codes = CodeSetConfig.load(self.cfg.resolve(self.cfg.paths.codesets))
        return self._codes

    def modes(self, only: str | None) -> list[CohortMode]:
        modes = self.cfg.cohort.mode_enums
        return [CohortMode(only)] if only else modes

    def regimes(self, only: str | None) -> list[RegimeName]:
        return [RegimeName.parse(only)] if only else self.cfg.regime_enums


# --- stages -----------------------------------------------------------------

def stage_synth(ctx: Context) -> None:
    s = ctx.cfg.synth
    if s is None:
        raise ConfigError("config has no synth section")
    kw = dict(n_patients=s.n_patients, study_start=s.study_start, study_end=s.study_end,
              target_incidence=s.target_incidence, recording_probability=s.recording_probability, seed=ctx.cfg.seed)
    if s.coefficients is not None:
        kw["coefficients"] = s.coefficients
    pop, gt = generate(default_config(**kw))
    emit_fixture(pop, gt, ctx.layout.synth())
    if ctx.cfg.paths.claims is None:
        ctx._pop = pop
    log.info("synth: %d patients, %d events", len(pop), pop.n_events)


def stage_cohort(ctx: Context, mode: CohortMode) -> CohortResult:
    res = build_cohort(ctx.population(), ctx.cross_sections, ctx.codes(), mode, ctx.cfg.cohort.control_ratio,
                       ctx.cfg.seed, study_start=ctx.spec.study_start, outcome_months=ctx.spec.outcome_months)
    csv_path = ctx.layout.cohort_csv(mode)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    write_cohort(res, csv_path, ctx.layout.cohort_meta(mode))
    log.info("cohort %s: %d rows", mode.value, len(res.rows))
    return res


def _load_cohort(ctx: Context, mode: CohortMode) -> CohortResult:
    return read_cohort(_need(ctx.layout.cohort_csv(mode), "cohort"), _need(ctx.layout.cohort_meta(mode), "cohort"))


def _benchmarks_for(ctx: Context, mode: CohortMode) -> list[str]:
    return ctx.cfg.evaluation.benchmarks.get(mode.value, [])


def stage_featurize(ctx: Context, mode: CohortMode) -> None:
    cohort = _load_cohort(ctx, mode)
    pop = ctx.population()
    kd = load_concepts(ctx.cfg.resolve(ctx.cfg.paths.concepts))
    train_rows = cohort.rows_for(ctx.split.train_ids)
    exclude = {(c.kind, code) for c in kd for code in c.codes} if ctx.cfg.features.skip_kd_codes else set()
    sel = dd_select(train_rows, pop, ctx.cross_sections, ctx.split, ctx.cfg.features.top_k_per_kind, exclude=exclude)
    schema = build_schema(kd, sel.concepts, sel.provenance)
    matrix = build_matrix(cohort.rows, schema, pop, ctx.cross_sections)
    d = ctx.layout.features(mode)
    write_matrix(matrix, d)
    write_dd_scores(sel, d / "dd_scores.csv")
    names = _benchmarks_for(ctx, mode)
    codes = ctx.codes()
    rows = sorted(cohort.rows)  # build_matrix row order
    if [(r.cs_id, r.patient_id) for r in rows] != list(matrix.row_keys):
        raise RuntimeError("cohort rows and feature matrix rows are out of order")
    flags = {n: rule_flags(pop, rows, ctx.cross_sections, codes.benchmark(n), ctx.cfg.evaluation.window_months)
             for n in names}
    with open(d / "benchmark_flags.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["row", *names])
        for i in range(matrix.n_rows):
            w.writerow([i, *(int(flags[n][i]) for n in names)])
    log.info("featurize %s: %d rows x %d columns, %d stored cells", mode.value, matrix.n_rows, matrix.n_cols,
             matrix.n_stored)


def _load_matrix(ctx: Context, mode: CohortMode) -> FeatureMatrix:
    d = ctx.layout.features(mode)
    for name in ("schema.json", "matrix.csv", "rows.csv"):
        _need(d / name, "featurize")
    return read_matrix(d)


def _load_flags(ctx: Context, mode: CohortMode, n_rows: int) -> dict[str, np.ndarray]:
    path = _need(ctx.layout.features(mode) / "benchmark_flags.csv", "featurize")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)[1:]
        data = np.array([[int(v) for v in row[1:]] for row in reader], dtype=bool).reshape(-1, len(header))
    if data.shape[0] != n_rows:
        raise ValueError(f"{path} has {data.shape[0]} rows, matrix has {n_rows}")
    return {name: data[:, j] for j, name in enumerate(header)}


def stage_tune(ctx: Context, mode: CohortMode) -> None:
    matrix = _load_matrix(ctx, mode)
    t = ctx.cfg.tuning
    res = tune(matrix.for_cross_sections(ctx.split.train_ids), ctx.split, t.grid.configs(ctx.cfg.seed),
               seed=ctx.cfg.seed, use_rfe=t.rfe.enabled, drop_fraction=t.rfe.drop_fraction,
               min_features=t.rfe.min_features, threads=ctx.threads)
    path = ctx.layout.tuning(mode)
    path.parent.mkdir(parents=True, exist_ok=True)
    dump_json(res.to_json(matrix.schema.names), path)
    log.info("tune %s: grid cell %d, %d rounds, %d columns", mode.value, res.grid.best_index, res.n_rounds,
             len(res.columns))


def _load_tuning(ctx: Context, mode: CohortMode, names) -> TuningResult:
    with open(_need(ctx.layout.tuning(mode), "tune"), encoding="utf-8") as f:
        return TuningResult.from_json(json.load(f), names)


def stage_train(ctx: Context, mode: CohortMode, regime_name: RegimeName) -> None:
    matrix = _load_matrix(ctx, mode)
    tuning = _load_tuning(ctx, mode, matrix.schema.names)
    regime = Regime.of(regime_name, ctx.split)
    model, audit = train_regime(matrix, regime, ctx.split, tuning, threads=ctx.threads)
    d = ctx.layout.regime(mode, regime_name)
    d.mkdir(parents=True, exist_ok=True)
    model.save(d / "model.json")
    dump_json(audit, d / "audit.json")
    log.info("train %s/%s: %d trees", mode.value, regime_name.slug, model.n_trees)


def _roles(ctx: Context, regime: Regime) -> list[tuple[str, int]]:
    out = []
    for cid in regime.test_ids:
        out.append(("holdout" if cid == ctx.split.holdout_id else "scoring", cid))
    return out


def _load_model(ctx, mode, regime_name) -> tuple[Ensemble, dict, Path]:
    d = ctx.layout.regime(mode, regime_name)
    model = Ensemble.load(_need(d / "model.json", "train"))
    with open(_need(d / "audit.json", "train"), encoding="utf-8") as f:
        audit = json.load(f)
    return model, audit, d


def stage_evaluate(ctx: Context, mode: CohortMode, regime_name: RegimeName) -> None:
    model, audit, d = _load_model(ctx, mode, regime_name)
    matrix = _load_matrix(ctx, mode)
    cohort_meta = _load_cohort(ctx, mode).counts
    flags = _load_flags(ctx, mode, matrix.n_rows)
    regime = Regime.of(regime_name, ctx.split)
    upstream = set().union(*(set(p["cs_ids"]) for p in audit["upstream"]))
    if upstream & set(regime.test_ids):
        raise LeakageError(f"audit shows test cross-sections {sorted(upstream & set(regime.test_ids))} upstream")
    out: dict = {"version": 1, "regime": regime_name.value, "mode": mode.value}
    aurocs = {}
    roles = _roles(ctx, regime)
    for k, (role, cid) in enumerate(roles):
        single = Regime(regime.name, regime.train_ids, (cid,), regime.schema_ids)
        suffix = "" if k == 0 else f"_{role}"
        try:
            rep = evaluate_regime(model, matrix, single, cohort_meta, flags, ctx.cfg.evaluation.ci_level)[cid]
        except MetricError as exc:
            out[role] = {"cs_id": cid, "error": str(exc)}
            continue
        out[role] = rep.to_json()
        aurocs[role] = rep.auroc
        write_curves(rep, d, suffix)
    if len(aurocs) == 2:
        out["auroc_gap"] = abs(aurocs["holdout"] - aurocs["scoring"])
    dump_json(out, d / "report.json")
    log.info("evaluate %s/%s: %s", mode.value, regime_name.slug,
             ", ".join(f"{r} AUROC {a:.3f}" for r, a in aurocs.items()))


def stage_explain(ctx: Context, mode: CohortMode, regime_name: RegimeName) -> None:
    model, _, d = _load_model(ctx, mode, regime_name)
    matrix = _load_matrix(ctx, mode)
    regime = Regime.of(regime_name, ctx.split)
    test = matrix.for_cross_sections([regime.test_ids[0]])
    if test.n_rows == 0:
        raise ValueError(f"no rows in cross-section {regime.test_ids[0]} to explain")
    att = tree_shap(model, test)
    report = aggregate_importance(att, matrix.schema)
    write_importance(report, d / "importance.csv")
    log.info("explain %s/%s: top concept %s", mode.value, regime_name.slug, report.ranking[0])


def write_manifest(out: Path) -> Path:
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[p.relative_to(out).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
    path = out / "manifest.json"
    dump_json({"version": 1, "files": files}, path)
    return path


def run_all(ctx: Context) -> None:
    t0 = time.perf_counter()
    if ctx.cfg.synth is not None:
        stage_synth(ctx)
    for mode in ctx.cfg.cohort.mode_enums:
        stage_cohort(ctx, mode)
        stage_featurize(ctx, mode)
        stage_tune(ctx, mode)
        for r in ctx.cfg.regime_enums:
            stage_train(ctx, mode, r)
            stage_evaluate(ctx, mode, r)
            stage_explain(ctx, mode, r)
    log.info("run-all finished in %.1fs", time.perf_counter() - t0)


# --- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rcsboost", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="pipeline config JSON")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads (output is identical for any value)")
    common.add_argument("--out", default=None, help="output directory (default: paths.out)")
    common.add_argument("-q", "--quiet", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate the synthetic claims fixture")
    for name in ("cohort", "featurize", "tune"):
        sp = sub.add_parser(name, parents=[common])
        sp.add_argument("--mode", choices=[m.value for m in CohortMode])
    for name in ("train", "evaluate", "explain"):
        sp = sub.add_parser(name, parents=[common])
        sp.add_argument("--mode", choices=[m.value for m in CohortMode])
        sp.add_argument("--regime", choices=[r.value for r in RegimeName] + [r.slug for r in RegimeName])
    sub.add_parser("run-all", parents=[common], help="every stage, every cohort mode and regime")
    return p


def _dispatch(args, ctx: Context) -> None:
    cmd = args.command
    if cmd == "synth":
        stage_synth(ctx)
    elif cmd == "run-all":
        run_all(ctx)
    elif cmd in ("cohort", "featurize", "tune"):
        fn = {"cohort": stage_cohort, "featurize": stage_featurize, "tune": stage_tune}[cmd]
        for mode in ctx.modes(args.mode):
            fn(ctx, mode)
    else:
        fn = {"train": stage_train, "evaluate": stage_evaluate, "explain": stage_explain}[cmd]
        for mode in ctx.modes(args.mode):
            for r in ctx.regimes(args.regime):
                fn(ctx, mode, r)


def _error_line(exc: BaseException) -> str:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, MissingArtifact):
        payload["missing"] = str(exc.path)
        payload["producer"] = exc.producer
    return json.dumps(payload, sort_keys=True)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg = load_config(args.config, seed=args.seed)
        out = Path(args.out) if args.out else cfg.resolve(cfg.paths.out)
        out.mkdir(parents=True, exist_ok=True)
        ctx = Context(cfg, out, args.threads)
        _dispatch(args, ctx)
        write_manifest(out)
    except MissingArtifact as exc:
        print(_error_line(exc), file=sys.stderr)
        return 2
    except (ConfigError, ValueError, OSError, RuntimeError) as exc:
        print(_error_line(exc), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
