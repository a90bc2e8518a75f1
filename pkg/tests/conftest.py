import logging
import os
import time
from pathlib import Path

import pytest

from trojan_pipeline.model_zoo import (
    build_lenet,
    held_out_slice,
    load_mnist,
    synthetic_digits,
    train,
)

REPO_DATA = Path(__file__).resolve().parents[1] / "data" / "mnist"


def mnist_root():
    env = os.environ.get("TROJAN_PIPELINE_DATA")
    for candidate in (Path(env) if env else None, REPO_DATA):
        if candidate is not None and any(candidate.glob("t10k-images-idx3-ubyte*")):
            return candidate
    return None


@pytest.fixture(autouse=True)
def _quiet_runtime_logs():
    # killed-node tests log a warning per dropped frame
    logging.getLogger("trojan_pipeline").setLevel(logging.ERROR)
    yield


@pytest.fixture(scope="session")
def lenet():
    return build_lenet(42)


@pytest.fixture(scope="session")
def synth_small():
    return synthetic_digits(120, seed=5)


@pytest.fixture(scope="session")
def trained():
    """Default-recipe LeNet plus its held-out slice.

    Real MNIST when the IDX files are present (2 epochs over 10,000 images,
    1,000-image held-out slice); otherwise the synthetic digit set.
    """
    root = mnist_root()
    if root is not None:
        train_set = load_mnist(root, "train").head(10000)
        test_set = held_out_slice(load_mnist(root, "test"), 1000, 42)
        source = "mnist"
    else:
        train_set = synthetic_digits(10000, 42)
        test_set = synthetic_digits(1000, 43)
        source = "synthetic"
    t0 = time.perf_counter()
    model = train(build_lenet(42), train_set, epochs=2, lr=0.05, batch=16, seed=42)
    seconds = time.perf_counter() - t0
    return {"model": model, "test": test_set, "train": train_set, "source": source, "seconds": seconds}


@pytest.fixture(scope="session")
def synth_trained():
    """Small model trained on synthetic digits, for fast pipeline and sweep tests."""
    train_set = synthetic_digits(4000, 11)
    model = train(build_lenet(7), train_set, epochs=3, lr=0.05, batch=16, seed=7)
    return model, synthetic_digits(80, 12)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
