import numpy as np
import pytest

from topocorr.io import fixture_path, ingest_csv


@pytest.fixture(scope="session")
def load():
    cache = {}

    def _load(name):
        if name not in cache:
            cache[name] = ingest_csv(fixture_path(name))
        return cache[name]

    return _load


def values(records, drop_excluded=False):
    return np.array([r.value for r in records if not (drop_excluded and r.excluded)])


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, lines = ACCEPTANCE[n]
        terminalreporter.write_line(f"CRITERION {n}: {'PASS' if ok else 'FAIL'}")
        for line in lines:
            terminalreporter.write_line(f"    {line}")
