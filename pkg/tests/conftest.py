import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rankcp.config import ExperimentConfig  # noqa: E402

SMALL = {
    "dataset.blocks": (80, 80, 80),
    "dataset.p_in": 0.05,
    "dataset.p_out": 0.01,
    "dataset.feature_dim": 8,
    "model.hidden": 16,
    "model.epochs": 40,
    "model.cor_hidden": 16,
    "model.cor_epochs": 8,
    "run.runs": 2,
    "run.splits": 10,
}


@pytest.fixture
def small_cfg():
    return ExperimentConfig().replace(**SMALL)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num}: {'PASS' if passed else 'FAIL'}  {detail}")
