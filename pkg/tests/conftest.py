import warnings

import pytest


@pytest.fixture(autouse=True)
def _quiet_hard_instance_warning():
    # small test datasets intentionally use overlapping spreads
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="within-class spread")
        warnings.filterwarnings("ignore", message="eval before any training")
        yield


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
