from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from sidp.data import Dataset, save_idx, synthetic_classification

ROOT = Path(__file__).resolve().parent.parent
MNIST_DIR = ROOT / "data" / "mnist"
CONFIG_DIR = ROOT / "configs"

_ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> str:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    _ACCEPTANCE[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[k])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory) -> Path:
    """IDX train/t10k/public splits of a small synthetic problem."""
    d = tmp_path_factory.mktemp("tiny")
    full = synthetic_classification(560, 16, 3, seed=5)
    images = full.images.reshape(len(full), 4, 4)
    splits = {"train": slice(0, 320), "t10k": slice(320, 480), "public": slice(480, 560)}
    for prefix, sl in splits.items():
        ds = Dataset(images[sl], full.labels[sl])
        save_idx(ds, d / f"{prefix}-images-idx3-ubyte", d / f"{prefix}-labels-idx1-ubyte")
    return d
