import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_spec():
    from svddip.config import RunSpec

    return RunSpec.default("desk")


@pytest.fixture(scope="session")
def desk_pretrained(desk_spec, tmp_path_factory):
    """Desk-preset pretraining, shared by every module that needs the checkpoint (about 3 minutes)."""
    from svddip.experiment import pretrained_network

    return pretrained_network(desk_spec, tmp_path_factory.mktemp("desk-pretrain"))


ACCEPTANCE: dict = {}
CRITERIA = range(1, 11)


@pytest.fixture(scope="session")
def verdict():
    """Record the outcome of one acceptance criterion; returns ``ok`` for the assert."""

    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (bool(ok), detail)
        print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in CRITERIA:
        ok, detail = ACCEPTANCE.get(n, (False, "not evaluated"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
