import gzip
import struct
from pathlib import Path

import numpy as np
import pytest

REPO = Path(__file__).resolve().parents[1]
MNIST5K = REPO / "data" / "mnist5k"

_criteria = {}


def record_criterion(number, title, passed, detail=""):
    _criteria[number] = (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, passed, detail = _criteria[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def write_idx(path, magic, dims, payload, compress=False):
    blob = struct.pack(f">{1 + len(dims)}i", magic, *dims) + bytes(payload)
    if compress:
        blob = gzip.compress(blob)
    Path(path).write_bytes(blob)
    return Path(path)


@pytest.fixture
def idx_pair(tmp_path):
    """Two 28x28 images built byte by byte: image 0 has one lit pixel (0, 1),
    image 1 has a 255 at the last pixel and 51 at (3, 4)."""
    pixels = bytearray(2 * 784)
    pixels[1] = 255
    pixels[784 + 783] = 255
    pixels[784 + 3 * 28 + 4] = 51
    images = write_idx(tmp_path / "img", 2051, (2, 28, 28), pixels)
    labels = write_idx(tmp_path / "lbl", 2049, (2,), bytes([7, 3]))
    return images, labels


@pytest.fixture(scope="session")
def mnist_dir():
    if not (MNIST5K / "train-images-idx3-ubyte.gz").exists():
        pytest.skip("bundled MNIST subset not present")
    return MNIST5K
