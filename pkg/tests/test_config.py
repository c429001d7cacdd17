import json
from pathlib import Path

import pytest

from rcsboost.cohort import CohortMode
from rcsboost.config import ConfigError, load_config
from rcsboost.protocol import RegimeName

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def write(tmp_path, **changes):
    raw = json.loads((CONFIGS / "pipeline.json").read_text())
    raw["paths"]["codesets"] = str(CONFIGS / "codesets.json")
    raw["paths"]["concepts"] = str(CONFIGS / "concepts.json")
    for dotted, value in changes.items():
        *head, last = dotted.split("__")
        node = raw
        for k in head:
            node = node[k]
        if value is ...:
            del node[last]
        else:
            node[last] = value
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(raw))
    return p


def test_shipped_config_loads():
    cfg = load_config(CONFIGS / "pipeline.json")
    assert cfg.seed == 20200630
    assert cfg.cohort.mode_enums == [CohortMode.NAFL_INCLUSIVE, CohortMode.NON_NAFL]
    assert cfg.regime_enums == list(RegimeName)
    assert len(cfg.tuning.grid.configs(cfg.seed)) == 18
    spec = cfg.window.spec()
    assert (spec.lookback_months, spec.outcome_months, spec.shift_months) == (24, 6, 3)
    assert cfg.resolve(cfg.paths.out) == (CONFIGS / "../out")


def test_seed_override(tmp_path):
    assert load_config(write(tmp_path), seed=5).seed == 5


@pytest.mark.parametrize("changes, where", [
    ({"bogus": 1}, "bogus"),
    ({"tuning__grid__depth": [3]}, "tuning.grid.depth"),
    ({"version": 2}, "version"),
    ({"regimes": ["HoldoutRegime", "HoldoutRegime"]}, "regimes"),
    ({"cohort__modes": ["Everyone"]}, "cohort.modes"),
    ({"seed": ...}, "seed"),
    ({"tuning__rfe__drop_fraction": 1.5}, "tuning.rfe.drop_fraction"),
])
def test_invalid_keys_and_values(tmp_path, changes, where):
    with pytest.raises(ConfigError, match=where.replace(".", r"\.")):
        load_config(write(tmp_path, **changes))


def test_missing_codesets_file(tmp_path):
    with pytest.raises(ConfigError, match="paths.codesets"):
        load_config(write(tmp_path, paths__codesets="nowhere.json"))


def test_bad_window(tmp_path):
    with pytest.raises(ConfigError, match="window"):
        load_config(write(tmp_path, window__study_end="2016-01-01"))


def test_not_json(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(p)
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.json")


def test_external_claims_need_both_paths(tmp_path):
    with pytest.raises(ConfigError, match="demographics"):
        load_config(write(tmp_path, synth=..., paths__claims="c.csv"))
