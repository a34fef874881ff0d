import os
import sys

# every kernel checks its output for NaN/inf while the suite runs
os.environ.setdefault("TRESNET_CHECK_FINITE", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def model_m():
    from tresnet.model import build, get_config
    return build(get_config("m"), 0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for key in sorted(results, key=lambda k: int(k[2:])):
            terminalreporter.write_line(results[key])
