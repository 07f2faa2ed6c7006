import gzip
import struct

import numpy as np
import pytest

from mpcaps.capsnet import ConvLayerConfig
from mpcaps.network import CapsLayerSpec, NetworkConfig


def write_idx(path, array: np.ndarray, magic: int, compress=False):
    """Test-only IDX writer (big-endian header, u8 payload)."""
    array = np.asarray(array, dtype=np.uint8)
    raw = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.tobytes()
    if compress:
        raw = gzip.compress(raw)
    path.write_bytes(raw)


@pytest.fixture
def tiny_config():
    return NetworkConfig(
        input_shape=(1, 9, 9),
        n_classes=2,
        conv=[ConvLayerConfig(1, 4, 3, 1), ConvLayerConfig(4, 8, 3, 2)],
        primary_dim=4,
        primary_groups_per_position=1,
        layers=[CapsLayerSpec(2, 3, 4), CapsLayerSpec(2, 2, 4)],
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance outcomes, one (criterion, passed, detail) per criterion; printed at the end of the run
ACCEPTANCE = []


def record_acceptance(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE):
        terminalreporter.write_line(line)
