import gzip
import os

import numpy as np
import pytest

from binarygan_config import ENV_PREFIX, ExperimentConfig
from mnist_data import BinarizedDataset, binarize, encode_idx


def ring_images(count: int, seed: int = 0) -> np.ndarray:
    """Raw uint8 digits-like fixture: noisy rings with varying ink intensity."""
    rng = np.random.default_rng(seed)
    rows, cols = np.mgrid[0:28, 0:28]
    radius = np.hypot(rows - 13.5, cols - 13.5)
    ink = np.where(np.abs(radius - 8.0) < 2.5, 0.85, 0.03)
    on = rng.random((count, 28, 28)) < ink
    intensity = rng.integers(1, 256, size=(count, 28, 28))
    return np.where(on, intensity, 0).astype(np.uint8)


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch):
    for key in list(os.environ):
        if key.startswith(ENV_PREFIX) and key != f"{ENV_PREFIX}LOG_LEVEL":
            monkeypatch.delenv(key, raising=False)


@pytest.fixture
def raw_images() -> np.ndarray:
    return ring_images(128)


@pytest.fixture
def dataset(raw_images) -> BinarizedDataset:
    return binarize(raw_images)


@pytest.fixture
def mnist_dir(tmp_path, raw_images):
    directory = tmp_path / "mnist"
    directory.mkdir()
    (directory / "train-images-idx3-ubyte.gz").write_bytes(gzip.compress(encode_idx(raw_images)))
    return directory


@pytest.fixture
def make_config(tmp_path):
    def _make(**overrides) -> ExperimentConfig:
        values = dict(output_dir=str(tmp_path / "runs"), epochs=1, batch_size=64, seed=0, sample_count=16)
        values.update(overrides)
        return ExperimentConfig(**values)
    return _make


@pytest.fixture
def make_dataset():
    def _make(count: int, seed: int = 0) -> BinarizedDataset:
        return binarize(ring_images(count, seed))
    return _make
