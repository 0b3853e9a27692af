"""
MNIST ingestion: IDX parsing, binarization and shuffled mini-batches.
"""
import gzip
import io
import struct
from pathlib import Path
from typing import BinaryIO, Iterator, Optional, Union

import numpy as np
from pydantic import BaseModel, Field, validator

from binarygan_config import get_config
from binarygan_logger import logger

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
GZIP_MAGIC = b"\x1f\x8b"
IMAGE_SIDE = 28
DEFAULT_BATCH_SIZE = 64
TRAIN_IMAGE_FILES = (
    "train-images-idx3-ubyte",
    "train-images-idx3-ubyte.gz",
    "train-images.idx3-ubyte",
)

IdxSource = Union[str, Path, bytes, BinaryIO]


class IdxFormatError(ValueError):
    """Malformed IDX content."""


def _read_bytes(source: IdxSource) -> bytes:
    if isinstance(source, (bytes, bytearray)):
        raw = bytes(source)
    elif isinstance(source, (str, Path)):
        raw = Path(source).read_bytes()
    else:
        raw = source.read()
    if raw[:2] == GZIP_MAGIC:
        raw = gzip.decompress(raw)
    return raw


def parse_idx(source: IdxSource) -> np.ndarray:
    """
    Decode an IDX image (0x00000803) or label (0x00000801) file.

    Args:
        source : A path, the raw bytes, or a binary stream; gzip content is detected by its magic.

    Returns:
        uint8 array shaped (N, rows, cols) for images, (N,) for labels.
    """
    raw = _read_bytes(source)
    if len(raw) < 8:
        raise IdxFormatError(f"IDX header truncated: expected at least 8 bytes, got {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic == IMAGE_MAGIC:
        header_size = 16
        if len(raw) < header_size:
            raise IdxFormatError(f"IDX image header truncated: expected {header_size} bytes, got {len(raw)}")
        dims = struct.unpack(">III", raw[4:header_size])
    elif magic == LABEL_MAGIC:
        header_size = 8
        dims = struct.unpack(">I", raw[4:header_size])
    else:
        raise IdxFormatError(
            f"bad IDX magic 0x{magic:08x}; expected 0x{IMAGE_MAGIC:08x} (images) or 0x{LABEL_MAGIC:08x} (labels)")

    expected = int(np.prod(dims))
    actual = len(raw) - header_size
    if actual < expected:
        raise IdxFormatError(f"IDX payload truncated: expected {expected} bytes for dims {dims}, got {actual}")
    if actual > expected:
        raise IdxFormatError(f"IDX payload has {actual - expected} trailing bytes beyond dims {dims}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header_size).reshape(dims).copy()


def encode_idx(images: np.ndarray) -> bytes:
    """IDX image encoding of a (N, rows, cols) uint8 array."""
    images = np.asarray(images, dtype=np.uint8)
    buffer = io.BytesIO()
    buffer.write(struct.pack(">IIII", IMAGE_MAGIC, *images.shape))
    buffer.write(images.tobytes())
    return buffer.getvalue()


class BinarizedDataset(BaseModel):
    """
    Attributes:
        images : (N, 28, 28) float32 array of exact zeros and ones.
    """
    images: np.ndarray = Field(..., description="Binary images, N x 28 x 28")

    class Config:
        arbitrary_types_allowed = True

    @validator("images")
    def _binary_28x28(cls, images):
        if images.ndim != 3 or images.shape[1:] != (IMAGE_SIDE, IMAGE_SIDE):
            raise ValueError(f"images must be N x {IMAGE_SIDE} x {IMAGE_SIDE}, got {images.shape}")
        if not np.all((images == 0) | (images == 1)):
            raise ValueError("binarized images must contain only 0 and 1")
        return images

    @property
    def count(self) -> int:
        return self.images.shape[0]

    def pixel_mean(self) -> np.ndarray:
        return self.images.mean(axis=0)


def binarize(raw: np.ndarray) -> BinarizedDataset:
    """Nonzero intensities become 1.0, zeros stay 0.0."""
    return BinarizedDataset(images=(np.asarray(raw) > 0).astype(np.float32))


class BatchIterator:
    """
    Shuffled mini-batches over a dataset; the short final batch of each epoch is dropped.
    Attributes:
        dataset : Source images.
        batch_size : Images per batch.
        rng : Shuffle stream.
        flat : Emit (B, 784) when True, (B, 1, 28, 28) otherwise.
        epoch : Completed epochs.
    """

    def __init__(self, dataset: BinarizedDataset, batch_size: int = DEFAULT_BATCH_SIZE,
                 rng: Optional[np.random.Generator] = None, flat: bool = True):
        if dataset.count == 0:
            raise ValueError("cannot iterate over an empty dataset")
        if batch_size < 1 or batch_size > dataset.count:
            raise ValueError(f"batch size {batch_size} does not fit a dataset of {dataset.count} images")
        self.dataset = dataset
        self.batch_size = batch_size
        self.rng = rng or np.random.default_rng(0)
        self.flat = flat
        self.epoch = 0
        self._order = self.rng.permutation(dataset.count)
        self._cursor = 0

    @property
    def batches_per_epoch(self) -> int:
        return self.dataset.count // self.batch_size

    def next_indices(self) -> np.ndarray:
        indices = self._order[self._cursor:self._cursor + self.batch_size]
        self._cursor += self.batch_size
        if self._cursor + self.batch_size > self.dataset.count:
            self.epoch += 1
            self._order = self.rng.permutation(self.dataset.count)
            self._cursor = 0
        return indices

    def next_batch(self) -> np.ndarray:
        batch = self.dataset.images[self.next_indices()]
        if self.flat:
            return batch.reshape(len(batch), -1)
        return batch.reshape(len(batch), 1, IMAGE_SIDE, IMAGE_SIDE)

    def __iter__(self) -> Iterator[np.ndarray]:
        while True:
            yield self.next_batch()


def next_batch(iterator: BatchIterator) -> np.ndarray:
    return iterator.next_batch()


def resolve_data_dir(data_dir: Optional[Union[str, Path]] = None) -> Path:
    return Path(data_dir or get_config("data_dir") or "data")


def load_mnist(data_dir: Optional[Union[str, Path]] = None, limit: Optional[int] = None) -> BinarizedDataset:
    """
    Load and binarize the MNIST training images found in `data_dir`.

    Args:
        data_dir : Directory holding the training image file; falls back to BINARYGAN_DATA_DIR, the config file, then ./data.
        limit : Keep only the first `limit` images.

    Returns:
        The binarized training set.
    """
    directory = resolve_data_dir(data_dir)
    for file_name in TRAIN_IMAGE_FILES:
        path = directory / file_name
        if path.exists():
            break
    else:
        logger.error(f"No MNIST training images in {directory}")
        raise FileNotFoundError(f"no MNIST training images in {directory}; expected one of {', '.join(TRAIN_IMAGE_FILES)}")

    raw = parse_idx(path)
    if limit is not None:
        raw = raw[:limit]
    dataset = binarize(raw)
    logger.info(f"Loaded {dataset.count} binarized images from {path}")
    return dataset
