import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import beta as beta_dist

from rcsboost.evaluate import (MetricError, RankedPredictions, auprc, auroc, average_precision, benchmark_rule,
                               beta_quantile, evaluate_predictions, fold_improvement, point_at_recall, pr_curve,
                               precision_ci, rescale_precision, roc_curve, write_curves)

from oracles import brute_auroc, brute_step_auprc


def test_rescale_precision_examples():
    assert rescale_precision(10, 10, 5) == 1 / 6
    assert rescale_precision(10, 0, 5) == 1.0
    assert rescale_precision(3, 7, 1) == 0.3
    with pytest.raises(MetricError):
        rescale_precision(0, 0, 1)
    with pytest.raises(MetricError):
        rescale_precision(1, 1, 0.5)


def test_fold_improvement_matches_published_arithmetic():
    # 4.3% precision against 1/1437 incidence is reported as 60x; 1% against 1/2127 as 20x
    assert fold_improvement(0.043, 1 / 1437) == pytest.approx(61.791)
    assert round(fold_improvement(0.043, 1 / 1437), -1) == 60
    assert fold_improvement(0.01, 1 / 2127) == pytest.approx(21.27)
    assert round(fold_improvement(0.01, 1 / 2127), -1) == 20
    with pytest.raises(MetricError):
        fold_improvement(0.1, 0.0)


def test_beta_quantiles():
    assert round(beta_quantile(0.025, 2, 2), 4) == 0.0943
    assert round(beta_quantile(0.975, 2, 2), 4) == 0.9057
    lo, hi = precision_ci(1, 1)
    assert (round(lo, 4), round(hi, 4)) == (0.0943, 0.9057)


@given(st.floats(0.001, 0.999), st.floats(0.1, 50), st.floats(0.1, 50))
def test_beta_quantile_matches_scipy(q, a, b):
    assert beta_quantile(q, a, b) == pytest.approx(beta_dist.ppf(q, a, b), abs=1e-9)


def test_ci_widens_with_k_and_contains_point():
    for tp, fp in [(5, 5), (30, 2), (1, 40)]:
        lo1, hi1 = precision_ci(tp, fp, 1.0)
        lo5, hi5 = precision_ci(tp, fp, 5.0)
        assert lo5 < lo1 and hi5 < hi1  # more effective false positives pull the interval down
        p = rescale_precision(tp, fp, 5.0)
        assert lo5 <= p <= hi5


def _fixture(rng):
    n = int(rng.integers(2, 60))
    scores = rng.integers(0, int(rng.integers(2, 12)), n).astype(float)  # many ties
    labels = rng.random(n) < rng.uniform(0.1, 0.9)
    labels[0], labels[1] = True, False
    return scores, labels


@pytest.mark.parametrize("seed", range(40))
def test_metrics_match_brute_force_with_ties(seed):
    rng = np.random.default_rng(seed)
    s, y = _fixture(rng)
    k = float(rng.choice([1.0, 2.5, 7.0]))
    n_neg = int((~y).sum())
    preds = RankedPredictions(s, y, n_full=int(round(k * n_neg)), n_sampled=n_neg)
    assert auprc(pr_curve(preds)) == pytest.approx(brute_step_auprc(s, y, preds.k), rel=1e-12, abs=1e-15)
    assert auroc(preds) == pytest.approx(brute_auroc(s, y), rel=1e-12)
    assert average_precision(s, y) == pytest.approx(brute_step_auprc(s, y), rel=1e-12)


def test_roc_curve_endpoints_and_trapezoid():
    rng = np.random.default_rng(0)
    s, y = _fixture(rng)
    preds = RankedPredictions(s, y)
    fpr, tpr = roc_curve(preds)
    assert (fpr[0], tpr[0], fpr[-1], tpr[-1]) == (0.0, 0.0, 1.0, 1.0)
    assert np.trapezoid(tpr, fpr) == pytest.approx(auroc(preds), rel=1e-12)


def test_perfect_and_inverted_rankings():
    y = np.array([1, 1, 0, 0, 0], bool)
    good = RankedPredictions(np.array([5, 4, 3, 2, 1.0]), y)
    assert auroc(good) == 1.0 and auprc(pr_curve(good)) == 1.0
    assert auroc(RankedPredictions(-good.scores, y)) == 0.0


def test_degenerate_inputs_raise():
    with pytest.raises(MetricError):
        auroc(RankedPredictions(np.array([1.0, 2.0]), np.array([1, 1])))
    with pytest.raises(MetricError):
        RankedPredictions(np.array([1.0, np.nan]), np.array([1, 0]))
    with pytest.raises(MetricError):
        RankedPredictions(np.array([1.0, 0.0]), np.array([1, 0]), n_full=0, n_sampled=1)


def test_point_at_recall_and_deciles():
    s = np.arange(10, 0, -1, dtype=float)
    y = np.array([1, 0, 1, 0, 0, 1, 0, 0, 0, 1], bool)
    curve = pr_curve(RankedPredictions(s, y))
    p = point_at_recall(curve, 0.5)
    assert (p.tp, p.fp) == (2, 1)
    rep = evaluate_predictions(RankedPredictions(s, y), cs_id=3)
    assert [d["recall_target"] for d in rep.deciles] == [round(0.1 * i, 1) for i in range(1, 11)]
    assert rep.deciles[-1]["recall"] == 1.0


def test_benchmark_rule_arithmetic():
    y = np.array([1, 1, 1, 1, 0, 0, 0, 0, 0, 0], bool)
    flags = np.array([1, 1, 0, 0, 1, 0, 0, 0, 0, 0], bool)
    s = np.linspace(1, 0, 10)
    n_neg = 6
    preds = RankedPredictions(s, y, n_full=60, n_sampled=n_neg)
    curve = pr_curve(preds)
    res = benchmark_rule("r", flags, y, preds.k, preds.incidence, curve)
    assert res.n_flagged == 3 and res.recall == 0.5
    assert res.precision_rescaled == 2 / (2 + 10 * 1)
    assert res.fold == pytest.approx(res.precision_rescaled / (4 / 64))
    assert res.model_precision_rescaled == 1.0  # the model's top two rows are positives
    empty = benchmark_rule("none", np.zeros(10, bool), y, 1.0, 0.4)
    assert empty.precision_rescaled is None


def test_incidence_uses_full_control_pool():
    y = np.array([1, 0, 0], bool)
    preds = RankedPredictions(np.array([1.0, 0.5, 0.2]), y, n_full=999, n_sampled=2)
    assert preds.incidence == 1 / 1000
    assert preds.k == 999 / 2


def test_report_roundtrip_files(tmp_path):
    rng = np.random.default_rng(3)
    s, y = _fixture(rng)
    rep = evaluate_predictions(RankedPredictions(s, y), cs_id=8, benchmark_flags={"x": s > 3})
    write_curves(rep, tmp_path, "_scoring")
    assert (tmp_path / "pr_curve_scoring.csv").read_text().startswith("recall,precision_raw")
    d = rep.to_json()
    assert d["auprc_ci"][0] <= d["auprc"] <= d["auprc_ci"][1]
    assert d["benchmarks"][0]["rule"] == "x"


@given(st.lists(st.floats(-5, 5, allow_subnormal=False), min_size=4, max_size=40), st.integers(0, 2**31))
def test_auroc_invariant_to_exact_rescaling(scores, seed):
    s = np.asarray(scores)
    y = np.random.default_rng(seed).random(len(s)) < 0.5
    y[0], y[1] = True, False
    a = auroc(RankedPredictions(s, y))
    b = auroc(RankedPredictions(4.0 * s, y))  # power-of-two scaling is exact, so order and ties survive
    assert a == pytest.approx(b, abs=1e-12)
    assert a == pytest.approx(brute_auroc(s, y), abs=1e-12)
