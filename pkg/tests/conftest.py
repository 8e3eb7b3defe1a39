import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from giim.graph import LesionRecord, PatientCase  # noqa: E402

# Acceptance tests append (criterion, passed, detail) here; the summary hook prints them.
ACCEPTANCE_RESULTS = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_case(rng, n_lesions, n_views, width, n_classes=3, patient_id="p0"):
    lesions = [LesionRecord(f"l{j}", int(rng.integers(n_classes)),
                            [rng.uniform(-1, 1, width) for _ in range(n_views)])
               for j in range(n_lesions)]
    return PatientCase(patient_id, lesions)


@pytest.fixture
def case_factory(rng):
    def build(n_lesions=2, n_views=3, width=4, n_classes=3, patient_id="p0"):
        return make_case(rng, n_lesions, n_views, width, n_classes, patient_id)
    return build


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
