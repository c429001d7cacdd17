from datetime import date, timedelta

import pytest
from hypothesis import given, strategies as st

from rcsboost.claims import ClaimEvent, Kind, Population, Sex, Source
from rcsboost.months import add_months
from rcsboost.rcs import WindowSpec, default_splits, enumerate_cross_sections, slice, split_gap


def test_default_window_gives_ten_cross_sections(spec):
    css = enumerate_cross_sections(spec)
    assert len(css) == 10
    assert css[0].index_date == date(2017, 10, 1)
    assert css[-1].index_date == date(2020, 1, 1)
    assert css[-1].outcome_end == date(2020, 7, 1)
    assert [c.id for c in css] == list(range(1, 11))


def test_default_split_respects_outcome_gap(spec, cross_sections):
    s = default_splits(len(cross_sections), spec)
    assert s.train_ids == frozenset(range(1, 7))
    assert (s.holdout_id, s.scoring_id) == (8, 10)
    assert s.prospective_train_ids == frozenset(range(1, 9))
    by_id = {c.id: c for c in cross_sections}
    # no training outcome window reaches the holdout index date
    assert max(by_id[i].outcome_end for i in s.train_ids) <= by_id[s.holdout_id].index_date


def test_too_few_cross_sections_raise():
    with pytest.raises(ValueError):
        default_splits(4, WindowSpec(date(2015, 10, 1), date(2020, 6, 30), 24, 6, 3))


@given(st.dates(date(2000, 1, 1), date(2030, 1, 1)), st.integers(1, 36), st.integers(1, 12), st.integers(1, 6),
       st.integers(0, 80))
def test_windows_stay_inside_study_period(start, lookback, outcome, shift, extra):
    end = add_months(start, lookback + outcome + extra) - timedelta(days=1)
    spec = WindowSpec(start, end, lookback, outcome, shift)
    css = enumerate_cross_sections(spec)
    for k, c in enumerate(css):
        assert c.lookback_start == add_months(start, k * shift) >= start
        assert c.index_date == add_months(start, lookback + k * shift)
        assert c.lookback_start < c.index_date < c.outcome_end <= end + timedelta(days=1)
    # one more shift would overrun the study end
    assert add_months(start, lookback + outcome + len(css) * shift) > end + timedelta(days=1)


def test_split_gap_is_outcome_over_shift(spec):
    assert split_gap(spec) == 2
    assert split_gap(WindowSpec(date(2015, 1, 1), date(2020, 1, 1), 24, 6, 6)) == 1


def test_slice_partitions_by_index_date(cross_sections):
    cs = cross_sections[0]
    days = [cs.lookback_start - timedelta(days=1), cs.lookback_start, cs.index_date,
            cs.index_date + timedelta(days=1), cs.outcome_end, cs.outcome_end + timedelta(days=1)]
    ev = [ClaimEvent("P", d, Source.DX, Kind.DIAGNOSIS, f"C{i}") for i, d in enumerate(days)]
    pop = Population.from_events([("P", 1960, Sex.F)], ev)
    lb, oc = slice(pop["P"], cs)
    assert [e.code for e in lb] == ["C1", "C2"]
    assert [e.code for e in oc] == ["C3", "C4"]
