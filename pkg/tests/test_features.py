import json
from datetime import date

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rcsboost.claims import ClaimEvent, Kind, Population, Sex, Source
from rcsboost.cohort import CohortMode, Label, LabeledCrossSection, build_cohort
from rcsboost.features import (Attribute, ConceptDef, FeatureMatrix, FeatureSchema, LeakageError, Origin, SchemaError,
                               build_matrix, build_schema, dd_select, extract_row, load_concepts, read_matrix,
                               write_matrix)
from rcsboost.synth import default_concepts

START = date(2015, 10, 1)


@pytest.fixture(scope="module")
def kd(tmp_path_factory):
    p = tmp_path_factory.mktemp("kd") / "concepts.json"
    p.write_text(json.dumps(default_concepts()))
    return load_concepts(p)


@pytest.fixture(scope="module")
def cohort(small_world, cross_sections, codesets):
    pop, _ = small_world
    return build_cohort(pop, cross_sections, codesets, CohortMode.NAFL_INCLUSIVE, 5, 1, study_start=START)


@pytest.fixture(scope="module")
def selection(small_world, cohort, cross_sections, split):
    pop, _ = small_world
    return dd_select(cohort.rows_for(split.train_ids), pop, cross_sections, split, 10)


def test_hand_computed_row(cross_sections):
    cs = cross_sections[0]  # index 2017-10-01
    ev = [
        ClaimEvent("P", date(2016, 1, 1), Source.DX, Kind.DIAGNOSIS, "K76.0"),
        ClaimEvent("P", date(2017, 9, 1), Source.DX, Kind.DIAGNOSIS, "K76.0"),
        ClaimEvent("P", date(2017, 10, 2), Source.DX, Kind.DIAGNOSIS, "K76.0"),  # after index
        ClaimEvent("P", date(2015, 9, 30), Source.DX, Kind.DIAGNOSIS, "K76.0"),  # before lookback
    ]
    pop = Population.from_events([("P", 1960, Sex.F)], ev)
    schema = build_schema([ConceptDef("NAFL", Kind.DIAGNOSIS, {"K76.0"}), ConceptDef("T2DM", Kind.DIAGNOSIS, {"E11.9"})],
                          [])
    cells = {schema.names[j]: v for j, v in extract_row(pop["P"], cs, schema).items()}
    idx = date(2017, 10, 1).toordinal()
    assert cells == {
        "KD:NAFL:Frequency": 2.0,
        "KD:NAFL:DaysIndexToFirst": float(idx - date(2016, 1, 1).toordinal()),
        "KD:NAFL:DaysIndexToLast": 30.0,
        "KD:NAFL:DaysFirstToLast": float(date(2017, 9, 1).toordinal() - date(2016, 1, 1).toordinal()),
        "AgeAtIndex": 57.0,
        "SexIsFemale": 1.0,
    }
    m = build_matrix([LabeledCrossSection(cs.id, "P", Label.CONTROL)], schema, pop, cross_sections)
    X = m.to_dense()[0]
    assert X[schema.index("KD:T2DM:Frequency")] == 0.0
    assert np.isnan(X[schema.index("KD:T2DM:DaysIndexToFirst")])


def test_schema_order_and_roundtrip(kd, selection):
    schema = build_schema(kd, selection.concepts, selection.provenance)
    origins = [c.concept.origin if c.concept else None for c in schema.columns]
    n_kd = 4 * len(kd)
    assert all(o is Origin.KD for o in origins[:n_kd])
    assert all(o is Origin.DD for o in origins[n_kd:-2])
    assert schema.names[-2:] == ["AgeAtIndex", "SexIsFemale"]
    back = FeatureSchema.from_json(json.loads(json.dumps(schema.to_json())))
    assert back == schema and back.fingerprint == schema.fingerprint
    tampered = schema.to_json()
    tampered["concepts"][0]["codes"].append("X99")
    with pytest.raises(SchemaError):
        FeatureSchema.from_json(tampered)


def test_vectorized_matrix_matches_scalar_oracle(small_world, cohort, kd, selection, cross_sections, backend):
    pop, _ = small_world
    schema = build_schema(kd, selection.concepts, selection.provenance)
    rows = sorted(cohort.rows)[::5]
    m = build_matrix(rows, schema, pop, cross_sections)
    by_id = {c.id: c for c in cross_sections}
    for i, r in enumerate(rows):
        want = extract_row(pop[r.patient_id], by_id[r.cs_id], schema)
        got = m.row(i)
        # Frequency 0 is the implicit default and never stored
        assert got == {j: v for j, v in want.items()}, r
    assert m.y.tolist() == [int(r.positive) for r in rows]


def test_frequency_and_nulls_are_consistent(small_world, cohort, kd, selection, cross_sections):
    pop, _ = small_world
    schema = build_schema(kd, selection.concepts)
    X = build_matrix(cohort.rows, schema, pop, cross_sections).to_dense()
    for c in schema.concepts:
        cols = {schema.columns[j].attribute: j for j in schema.columns_of(c.key)}
        freq = X[:, cols[Attribute.FREQUENCY]]
        for a in (Attribute.DAYS_INDEX_TO_FIRST, Attribute.DAYS_INDEX_TO_LAST, Attribute.DAYS_FIRST_TO_LAST):
            assert np.array_equal(np.isnan(X[:, cols[a]]), freq == 0)
        present = freq > 0
        first, last, span = (X[present, cols[a]] for a in (Attribute.DAYS_INDEX_TO_FIRST,
                                                            Attribute.DAYS_INDEX_TO_LAST,
                                                            Attribute.DAYS_FIRST_TO_LAST))
        assert np.all(first >= last) and np.all(last >= 0)
        assert np.allclose(first - last, span)
        assert np.all(first <= 731)  # within the 24-month lookback


def test_matrix_persistence_roundtrip(small_world, cohort, kd, selection, cross_sections, tmp_path):
    pop, _ = small_world
    schema = build_schema(kd, selection.concepts, selection.provenance)
    m = build_matrix(cohort.rows, schema, pop, cross_sections)
    write_matrix(m, tmp_path)
    assert read_matrix(tmp_path).equals(m)


def test_take_and_cross_section_filter(small_world, cohort, kd, cross_sections):
    pop, _ = small_world
    m = build_matrix(cohort.rows, build_schema(kd, []), pop, cross_sections)
    sub = m.for_cross_sections([2, 5])
    assert set(sub.cs_ids.tolist()) == {2, 5}
    idx = np.flatnonzero(np.isin(m.cs_ids, [2, 5]))
    assert np.array_equal(sub.to_dense(), m.to_dense()[idx], equal_nan=True)


def _brute_prevalence(pop, rows, cross_sections):
    by_id = {c.id: c for c in cross_sections}
    pos, ctl = {}, {}
    for r in rows:
        rec = pop[r.patient_id]
        lo, hi = by_id[r.cs_id].lookback_bounds
        codes = {(k, rec.vocab[c]) for d, k, c in zip(rec.days, rec.kind, rec.code) if lo <= d <= hi}
        target = pos if r.positive else ctl
        for key in codes:
            target[key] = target.get(key, 0) + 1
    return pos, ctl


def test_dd_scores_match_brute_force(small_world, cohort, cross_sections, split, selection):
    from rcsboost.claims import KINDS
    pop, _ = small_world
    rows = cohort.rows_for(split.train_ids)
    pos, ctl = _brute_prevalence(pop, rows, cross_sections)
    P = sum(r.positive for r in rows)
    C = len(rows) - P
    assert len(selection.scores) == len(set(pos) | set(ctl))
    for s in selection.scores:
        key = (KINDS.index(s.kind), s.code)
        assert s.prevalence_pos == pos.get(key, 0) / P
        assert s.prevalence_ctl == ctl.get(key, 0) / C
    for kind in KINDS:
        ranked = [s for s in selection.scores if s.kind is kind]
        assert [s.code for s in ranked] == [s.code for s in sorted(ranked, key=lambda s: (-s.score, s.code))]
        chosen = [c.name for c in selection.concepts if c.kind is kind]
        assert chosen == [f"{kind.value}:{s.code}" for s in ranked[:10]]


def test_dd_exclude_keeps_scores_but_drops_concepts(small_world, cohort, cross_sections, split):
    pop, _ = small_world
    rows = cohort.rows_for(split.train_ids)
    full = dd_select(rows, pop, cross_sections, split, 5)
    top = full.concepts[0]
    excl = dd_select(rows, pop, cross_sections, split, 5, exclude=[(top.kind, next(iter(top.codes)))])
    assert excl.scores == full.scores
    assert top not in excl.concepts


@settings(max_examples=15)
@given(st.sampled_from(["holdout", "scoring"]), st.integers(0, 10**6))
def test_dd_refuses_evaluation_rows(small_world, cohort, cross_sections, split, which, pick):
    pop, _ = small_world
    train_rows = cohort.rows_for(split.train_ids)
    target = split.holdout_id if which == "holdout" else split.scoring_id
    pool = cohort.rows_for([target])
    intruder = pool[pick % len(pool)]
    with pytest.raises(LeakageError):
        dd_select(train_rows + [intruder], pop, cross_sections, split)


def test_from_dense_roundtrip():
    X = np.array([[1.0, np.nan], [0.0, 2.5]])
    m = FeatureMatrix.from_dense(X, [0, 1])
    assert np.array_equal(m.to_dense(), X, equal_nan=True)
    assert m.schema.names == ["KD:x0:Value", "KD:x1:Value"]
