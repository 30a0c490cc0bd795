import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from nncompress.data import SyntheticSpec, gen_synthetic  # noqa: E402
from nncompress.model import build_toy_classifier, train  # noqa: E402
from nncompress.tensor import make_rng  # noqa: E402

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def synthetic():
    return gen_synthetic(SyntheticSpec(seed=0))


@pytest.fixture(scope="session")
def _trained(synthetic):
    train_set, _ = synthetic
    model = build_toy_classifier(seed=0)
    return train(model, train_set, epochs=10, lr=0.05, batch_size=32, rng=make_rng(0))


@pytest.fixture
def trained_toy(_trained):
    return _trained.copy()


@pytest.fixture
def acceptance():
    def record(number, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE_LINES.append((number, line))
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def cli_workspace(tmp_path_factory):
    """Synthetic data and a trained toy model, both produced through the CLI."""
    from nncompress.cli import run

    root = tmp_path_factory.mktemp("cli")
    assert run(["gen-data", "--seed", "0", "--out", str(root / "data")]) == 0
    assert run(["train", "--data", str(root / "data"), "--arch", "toy", "--epochs", "10", "--lr", "0.05",
                "--batch", "32", "--seed", "0", "--out", str(root / "toy.ncmf")]) == 0
    return root
