import os

import pytest
from hypothesis import HealthCheck, settings

from rcsboost import _kernels
from rcsboost.cohort import CodeSetConfig
from rcsboost.rcs import WindowSpec, default_splits, enumerate_cross_sections
from rcsboost.synth import default_codesets, default_config, generate

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.register_profile("ci", deadline=None, max_examples=200, suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(params=_kernels.available())
def backend(request):
    with _kernels.backend_scope(request.param):
        yield request.param


@pytest.fixture(scope="session")
def spec():
    from datetime import date
    return WindowSpec(date(2015, 10, 1), date(2020, 6, 30), 24, 6, 3)


@pytest.fixture(scope="session")
def cross_sections(spec):
    return enumerate_cross_sections(spec)


@pytest.fixture(scope="session")
def split(spec, cross_sections):
    return default_splits(len(cross_sections), spec)


@pytest.fixture(scope="session")
def codesets():
    return CodeSetConfig.from_dict(default_codesets())


@pytest.fixture(scope="session")
def small_world():
    """A few thousand synthetic patients, enough for every cross-section to hold positives."""
    return generate(default_config(n_patients=6000, seed=7))


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
    missing = sorted(set(range(1, 11)) - set(results))
    if missing:
        terminalreporter.write_line(f"criteria not reached: {missing}")
