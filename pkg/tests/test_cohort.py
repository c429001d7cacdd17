from datetime import date

import pytest
from hypothesis import given, settings, strategies as st

from rcsboost.claims import ClaimEvent, Kind, Population, Sex, Source
from rcsboost.cohort import (CodeSetConfig, CodeSetError, CohortEngine, CohortMode, Label, LABEL_NONE,
                             build_cohort, eligible, label, nafl_in_lookback, read_cohort, write_cohort)
from rcsboost.months import add_months
from rcsboost.synth import default_codesets

START = date(2015, 10, 1)


def timeline(pid="P", *, born=1970, sex=Sex.F, extra=(), background=True):
    ev = []
    if background:
        for m in range(0, 57, 2):
            d = add_months(START, m)
            ev.append(ClaimEvent(pid, d, Source.DX, Kind.DIAGNOSIS, "Z00.0"))
            ev.append(ClaimEvent(pid, d, Source.RX, Kind.DRUG, "vitamin"))
    ev += [ClaimEvent(pid, d, Source.DX, Kind.DIAGNOSIS, code) for d, code in extra]
    return Population.from_events([(pid, born, sex)], ev)[pid]


@pytest.fixture
def cs(cross_sections):
    return cross_sections[0]  # index 2017-10-01, outcome to 2018-04-01


def lab(p, cs, codesets):
    return label(p, cs, codesets) if eligible(p, cs, codesets, study_start=START) else "ineligible"


def test_at_risk_patient_is_control(cs, codesets):
    p = timeline(extra=[(date(2017, 1, 5), "E11.9")])
    assert lab(p, cs, codesets) is Label.CONTROL


def test_no_inclusion_code_is_ineligible(cs, codesets):
    assert lab(timeline(), cs, codesets) == "ineligible"


def test_exclusion_code_in_lookback_is_ineligible(cs, codesets):
    p = timeline(extra=[(date(2017, 1, 5), "E11.9"), (date(2016, 3, 1), "F10.20")])
    assert lab(p, cs, codesets) == "ineligible"


@pytest.mark.parametrize("born,ok", [(1999, True), (2000, False), (1932, True), (1931, False)])
def test_age_bounds(cs, codesets, born, ok):
    p = timeline(born=born, extra=[(date(2017, 1, 5), "E11.9")])
    assert (lab(p, cs, codesets) != "ineligible") is ok


def test_unknown_sex_is_ineligible(cs, codesets):
    p = timeline(sex=Sex.UNKNOWN, extra=[(date(2017, 1, 5), "E11.9")])
    assert lab(p, cs, codesets) == "ineligible"


def test_short_observation_is_ineligible(cs, codesets):
    p = timeline(background=False, extra=[(date(2017, 1, 5), "E11.9"), (date(2017, 3, 5), "I10")])
    assert lab(p, cs, codesets) == "ineligible"


def test_legacy_code_before_study_is_ineligible(cs, codesets):
    p = timeline(extra=[(date(2017, 1, 5), "E11.9"), (date(2015, 5, 1), "571.8")])
    assert lab(p, cs, codesets) == "ineligible"


def test_nash_code_in_outcome_is_positive(cs, codesets):
    p = timeline(extra=[(date(2017, 1, 5), "E11.9"), (date(2018, 2, 1), "K75.81")])
    assert lab(p, cs, codesets) is Label.NASH_DX


def test_outcome_window_is_left_open_right_closed(cs, codesets):
    on_index = timeline(extra=[(date(2017, 1, 5), "E11.9"), (cs.index_date, "K75.81")])
    on_end = timeline(extra=[(date(2017, 1, 5), "E11.9"), (cs.outcome_end, "K75.81")])
    assert lab(on_index, cs, codesets) is None  # already diagnosed at the index date
    assert lab(on_end, cs, codesets) is Label.NASH_DX


def test_proxy_cluster_is_positive(cs, codesets):
    p = timeline(extra=[(date(2017, 1, 5), "E11.9"), (date(2017, 6, 1), "K76.0"), (date(2018, 1, 10), "K74.0")])
    assert lab(p, cs, codesets) is Label.NASH_PROXY
    assert nafl_in_lookback(p, cs, codesets)


def test_proxy_blocked_by_other_liver_disease(cs, codesets):
    p = timeline(extra=[(date(2017, 1, 5), "E11.9"), (date(2017, 6, 1), "K76.0"), (date(2018, 1, 10), "K74.0"),
                        (date(2018, 2, 1), "K70.30")])
    assert lab(p, cs, codesets) is Label.CONTROL


def test_fibrosis_without_nafl_is_control(cs, codesets):
    p = timeline(extra=[(date(2017, 1, 5), "E11.9"), (date(2018, 1, 10), "K74.0")])
    assert lab(p, cs, codesets) is Label.CONTROL


def test_prior_diagnosis_is_unlabelable(cs, codesets):
    p = timeline(extra=[(date(2017, 1, 5), "E11.9"), (date(2017, 2, 1), "K75.81"), (date(2018, 2, 1), "K75.81")])
    assert lab(p, cs, codesets) is None


def test_engine_matches_scalar_rules(small_world, cross_sections, codesets):
    pop, _ = small_world
    eng = CohortEngine(pop, codesets, study_start=START)
    sample = range(0, len(pop), 7)
    n_pos = 0
    for cs in cross_sections:
        el, lb, nf = eng.eligible(cs), eng.labels(cs), eng.nafl_in_lookback(cs)
        for i in sample:
            rec = pop.record(i)
            assert el[i] == eligible(rec, cs, codesets, study_start=START)
            want = label(rec, cs, codesets)
            got = None if lb[i] == LABEL_NONE else {0: Label.CONTROL, 1: Label.NASH_DX, 2: Label.NASH_PROXY}[int(lb[i])]
            assert got is want, (rec.patient_id, cs.id)
            assert nf[i] == nafl_in_lookback(rec, cs, codesets)
            n_pos += bool(el[i] and want is not None and want.positive)
    assert n_pos > 0


@pytest.fixture(scope="module")
def engine_and_pop(small_world, codesets):
    pop, _ = small_world
    return pop, CohortEngine(pop, codesets, study_start=START)


@settings(max_examples=10)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1), st.sampled_from(list(CohortMode)))
def test_cohort_invariants(engine_and_pop, cross_sections, codesets, ratio, seed, mode):
    pop, eng = engine_and_pop
    res = build_cohort(pop, cross_sections, codesets, mode, ratio, seed, study_start=START, engine=eng)
    for cs in cross_sections:
        rows = res.rows_for([cs.id])
        c = res.counts[cs.id]
        pos = [r for r in rows if r.positive]
        ctl = [r for r in rows if not r.positive]
        assert len(pos) == c.n_positive
        assert len(ctl) == c.n_controls_sampled == min(ratio * c.n_positive, c.n_controls_full)
        assert c.short_pool == (c.n_controls_full < ratio * c.n_positive)
        if mode is CohortMode.NON_NAFL:
            assert not any(r.nafl_in_lookback for r in rows)
        assert len({r.patient_id for r in rows}) == len(rows)
    assert list(res.rows) == sorted(res.rows)


def test_cohort_is_seed_deterministic_and_roundtrips(engine_and_pop, cross_sections, codesets, tmp_path):
    pop, eng = engine_and_pop
    a = build_cohort(pop, cross_sections, codesets, CohortMode.NAFL_INCLUSIVE, 5, 3, study_start=START, engine=eng)
    b = build_cohort(pop, cross_sections, codesets, CohortMode.NAFL_INCLUSIVE, 5, 3, study_start=START, engine=eng)
    assert a.rows == b.rows
    write_cohort(a, tmp_path / "c.csv", tmp_path / "m.json")
    back = read_cohort(tmp_path / "c.csv", tmp_path / "m.json")
    assert back.rows == a.rows and dict(back.counts) == dict(a.counts)
    assert [r.label for r in back.rows] == [r.label for r in a.rows]


def test_non_nafl_is_subset_of_inclusive(engine_and_pop, cross_sections, codesets):
    pop, eng = engine_and_pop
    kw = dict(study_start=START, engine=eng)
    inc = build_cohort(pop, cross_sections, codesets, CohortMode.NAFL_INCLUSIVE, 5, 0, **kw)
    non = build_cohort(pop, cross_sections, codesets, CohortMode.NON_NAFL, 5, 0, **kw)
    inc_pos = {(r.cs_id, r.patient_id) for r in inc.rows if r.positive}
    assert {(r.cs_id, r.patient_id) for r in non.rows if r.positive} <= inc_pos


def test_codeset_rejects_unknown_keys_and_kinds():
    raw = default_codesets()
    with pytest.raises(CodeSetError):
        CodeSetConfig.from_dict({**raw, "typo": []})
    with pytest.raises(CodeSetError):
        CodeSetConfig.from_dict({**raw, "nafl": [["Diag", "K76.0"]]})
    with pytest.raises(CodeSetError):
        CodeSetConfig.from_dict({**raw, "nafl": []})
