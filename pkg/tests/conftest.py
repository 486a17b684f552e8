import time

import pytest

from promptseg.grounder.recipe import run_reference

ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(ACCEPTANCE_LINES, [])

    def record(name: str, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        lines.append(line)
        print(line)
        assert passed, line

    return record


@pytest.fixture(scope="session")
def reference_runs():
    """mode -> (TrainResult, validation IoU, seconds) for the seeded reference recipe."""
    runs = {}
    for mode in ("full_finetune", "lora"):
        start = time.perf_counter()
        result, iou = run_reference(mode)
        runs[mode] = (result, iou, time.perf_counter() - start)
    return runs


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
