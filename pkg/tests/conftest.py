from dataclasses import dataclass

import pytest
from hypothesis import settings

from branchdit.branches import SUBJECT
from branchdit.cila import LoraAdapter
from branchdit.data import make_samples
from branchdit.harness import LearningReport, learning_signal
from branchdit.model import DiT, train_stage2

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@dataclass
class Pipeline:
    report: LearningReport
    model: DiT
    spatial: LoraAdapter
    subject: LoraAdapter


@pytest.fixture(scope="session")
def pipeline() -> Pipeline:
    """The end-to-end run: stage 1 and a spatial adapter, plus an independently trained subject adapter."""
    report, model, spatial = learning_signal()
    subject, _ = train_stage2(model, SUBJECT, make_samples(SUBJECT, 64, 0), 500, 1e-3, seed=0)
    return Pipeline(report, model, spatial, subject)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "CRITERIA", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
