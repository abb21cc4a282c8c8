import zipfile

import numpy as np
import pytest

from qvit.data import write_npy


def write_archive(path, n=(40, 12, 12), channels=1, classes=3, seed=0, labels_2d=True):
    """Small MedMNIST-shaped archive whose class is visible in the image mean."""
    rng = np.random.default_rng(seed)
    with zipfile.ZipFile(path, "w") as zf:
        for split, count in zip(("train", "val", "test"), n):
            labels = np.arange(count) % classes
            rng.shuffle(labels)
            base = (labels * (200 // max(classes - 1, 1)))[:, None, None, None]
            images = np.clip(base + rng.integers(0, 40, (count, 28, 28, channels)), 0, 255).astype(np.uint8)
            if channels == 1:
                images = images[..., 0]
            lab = labels[:, None] if labels_2d else labels
            zf.writestr(f"{split}_images.npy", write_npy(images))
            zf.writestr(f"{split}_labels.npy", write_npy(lab.astype(np.uint8)))
    return path


@pytest.fixture
def data_dir(tmp_path, monkeypatch):
    root = tmp_path / "cache"
    root.mkdir()
    monkeypatch.setenv("QVIT_DATA_DIR", str(root))
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
