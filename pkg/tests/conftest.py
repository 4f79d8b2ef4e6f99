import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from defectlod.coefficient import checkerboard  # noqa: E402
from defectlod.mesh import build_mesh  # noqa: E402
from defectlod.offline import build_offline  # noqa: E402

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def tiny_mesh():
    return build_mesh(2, 4, 2, 4)


@pytest.fixture(scope="session")
def tiny_model():
    return checkerboard(2, 0.1, 1.0, 0.3)


@pytest.fixture(scope="session")
def tiny_db(tiny_mesh, tiny_model):
    return build_offline(tiny_model, tiny_mesh, 1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        status = {True: "PASS", False: "FAIL", None: "SKIP"}[ok]
        terminalreporter.write_line(f"criterion {k}: {status}  {detail}")
