import sys
import numpy as np
import pytest

from partbilinear.core import FeatureMap, Role


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


def random_map(rng, h, w, c, role=Role.RAW):
    return FeatureMap(rng.normal(size=(h, w, c)), role)


def outer_oracle(a, p):
    """Block-per-part flattening written out with explicit loops."""
    out = []
    for k in range(len(p)):
        for j in range(len(a)):
            out.append(p[k] * a[j])
    return np.array(out)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "ACCEPTANCE_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
