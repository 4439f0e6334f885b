import json

import pytest

from nested_tnt.cli import bundled
from nested_tnt.data import synthetic_dataset
from nested_tnt.models import ModelConfig, build_model
from nested_tnt.train import TrainConfig, train

ACCEPTANCE_LINES: list[str] = []


def load_bundled(name):
    return json.loads(bundled(name).read_text())


@pytest.fixture(scope="session")
def convergence_run():
    """Tiny Nested-TNT on the synthetic two-class set, bundled hyperparameters."""
    mcfg = ModelConfig.from_dict(load_bundled("tiny_nested_tnt.json"))
    tcfg = TrainConfig.from_dict({**load_bundled("synthetic_train.json"), "deterministic": True})
    data = synthetic_dataset(64, mcfg.image_size, seed=0)
    return tcfg, data, train(build_model(mcfg, tcfg.seed), data, tcfg)


@pytest.fixture(scope="session")
def acceptance_report():
    def report(number: int, title: str, passed: bool, detail: str = ""):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title}"
        ACCEPTANCE_LINES.append(line + (f" ({detail})" if detail else ""))
        print(ACCEPTANCE_LINES[-1])
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
