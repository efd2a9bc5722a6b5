import os
from pathlib import Path

import pytest

FIXTURES = Path(__file__).parent / "fixtures"
MNIST_DIR = Path(os.environ.get("MNIST_DIR", "/root/data/mnist"))


def mnist_available() -> bool:
    return (MNIST_DIR / "train-images-idx3-ubyte").exists() or (
        MNIST_DIR / "train-images-idx3-ubyte.gz"
    ).exists()


@pytest.fixture
def tiny_prefix():
    return FIXTURES / "tiny"


@pytest.fixture(scope="session")
def mnist_dir():
    if not mnist_available():
        pytest.skip(f"MNIST IDX files not found under {MNIST_DIR} (set MNIST_DIR)")
    return MNIST_DIR


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(LINES):
            terminalreporter.write_line(line)
