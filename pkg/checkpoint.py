"""
Single-file checkpoints: a YAML manifest, a `...` end-of-document line, then
the raw little-endian payload of every array listed in the manifest.

The manifest holds the run settings, both model specs, the sigmoid slope,
optimizer hyperparameters and random-stream states; the payload holds
parameters, batch-norm statistics, optimizer moments and the data order.
"""
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import yaml
from pydantic import BaseModel, Field

from binarygan_logger import logger
from layers import Layer
from model_zoo import Generator, ModelSpec, build_network
from optimizers import Optimizer

FORMAT = "binarygan-checkpoint/1"
SEPARATOR = b"\n...\n"
PAYLOAD_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8"), "int64": np.dtype("<i8")}


class CheckpointError(ValueError):
    """Malformed checkpoint or one that does not fit the networks it is loaded into."""


class Checkpoint(BaseModel):
    """
    Attributes:
        manifest : Decoded YAML manifest.
        arrays : Payload arrays by name.
    """
    manifest: Dict[str, Any] = Field(..., description="Decoded YAML manifest")
    arrays: Dict[str, np.ndarray] = Field(default_factory=dict, description="Payload arrays by name")

    class Config:
        arbitrary_types_allowed = True

    @property
    def epoch(self) -> int:
        return int(self.manifest.get("epoch", 0))

    @property
    def step(self) -> int:
        return int(self.manifest.get("step", 0))

    def spec(self, side: str) -> ModelSpec:
        try:
            return ModelSpec(**self.manifest[f"{side}_spec"])
        except KeyError:
            raise CheckpointError(f"checkpoint manifest has no {side} spec") from None

    def prefixed(self, prefix: str) -> Dict[str, np.ndarray]:
        start = f"{prefix}/"
        return {k[len(start):]: v for k, v in self.arrays.items() if k.startswith(start)}


def write_checkpoint(path: Union[str, Path], manifest: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> Path:
    """Write `manifest` plus the payload of `arrays` (sorted by name) to `path`."""
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        array = np.asarray(arrays[name])
        dtype_name = str(array.dtype)
        if dtype_name not in PAYLOAD_DTYPES:
            raise CheckpointError(f"array '{name}' has unsupported dtype {array.dtype}")
        data = np.ascontiguousarray(array, dtype=PAYLOAD_DTYPES[dtype_name]).tobytes()
        entries.append({"name": name, "dtype": dtype_name, "shape": list(array.shape), "offset": offset,
                        "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)

    header = dict(manifest, format=FORMAT, tensors=entries)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(yaml.safe_dump(header, sort_keys=True).encode("utf-8").rstrip(b"\n"))
        f.write(SEPARATOR)
        for chunk in chunks:
            f.write(chunk)
    logger.debug(f"Wrote checkpoint {path} ({offset} payload bytes, {len(entries)} arrays)")
    return path


def read_checkpoint(path: Union[str, Path]) -> Checkpoint:
    raw = Path(path).read_bytes()
    split = raw.find(SEPARATOR)
    if split < 0:
        raise CheckpointError(f"{path}: no manifest terminator")
    try:
        manifest = yaml.safe_load(raw[:split].decode("utf-8"))
    except yaml.YAMLError as e:
        raise CheckpointError(f"{path}: unreadable manifest ({e})") from e
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")

    payload = raw[split + len(SEPARATOR):]
    entries = manifest.pop("tensors", [])
    expected = sum(entry["nbytes"] for entry in entries)
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload holds {len(payload)} bytes, manifest lists {expected}")
    arrays = {}
    for entry in entries:
        dtype = PAYLOAD_DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"{path}: array '{entry['name']}' has unsupported dtype {entry['dtype']}")
        chunk = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        array = np.frombuffer(chunk, dtype=dtype).astype(np.dtype(entry["dtype"]))
        arrays[entry["name"]] = array.reshape(entry["shape"])
    return Checkpoint(manifest=manifest, arrays=arrays)


def network_arrays(network: Layer, prefix: str) -> Dict[str, np.ndarray]:
    arrays = {f"{prefix}/{name}": tensor.data for name, tensor in network.named_parameters().items()}
    arrays.update({f"{prefix}/{name}": buffer for name, buffer in network.named_buffers().items()})
    return arrays


def load_network_arrays(network: Layer, arrays: Dict[str, np.ndarray], prefix: str) -> Layer:
    """Copy `prefix/<name>` arrays into the network's parameters and buffers, in place."""
    targets = {name: tensor.data for name, tensor in network.named_parameters().items()}
    targets.update(network.named_buffers())
    stored = {k[len(prefix) + 1:]: v for k, v in arrays.items() if k.startswith(f"{prefix}/")}
    missing = sorted(set(targets) - set(stored))
    unexpected = sorted(set(stored) - set(targets))
    if missing or unexpected:
        logger.error(f"Checkpoint does not match the {prefix} network: missing {missing}, unexpected {unexpected}")
        raise CheckpointError(f"checkpoint does not match the {prefix} network: missing {missing}, "
                              f"unexpected {unexpected}")
    for name, target in targets.items():
        if stored[name].shape != target.shape:
            raise CheckpointError(
                f"{prefix}/{name}: checkpoint shape {stored[name].shape} differs from network shape {target.shape}")
        target[...] = stored[name]
    return network


def optimizer_arrays(optimizer: Optimizer, prefix: str) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    state = optimizer.state_dict()
    arrays = {f"{prefix}/{key}": array for key, array in state["arrays"].items()}
    return {"kind": state["kind"], "hyperparameters": state["hyperparameters"]}, arrays


def load_optimizer(optimizer: Optimizer, checkpoint: Checkpoint, prefix: str) -> Optimizer:
    meta = checkpoint.manifest.get("optimizers", {}).get(prefix.split("/")[-1])
    if meta is None:
        raise CheckpointError(f"checkpoint holds no optimizer state for {prefix}")
    optimizer.load_state_dict(dict(meta, arrays=checkpoint.prefixed(prefix)))
    return optimizer


def restore_generator(checkpoint: Checkpoint, neuron_rng: Optional[np.random.Generator] = None) -> Generator:
    """Rebuild the generator in eval mode, slope included."""
    spec = checkpoint.spec("generator")
    generator = build_network(spec, np.random.default_rng(0), neuron_rng)
    load_network_arrays(generator, checkpoint.arrays, "generator")
    generator.output.anneal_steps = int(checkpoint.manifest.get("slope", {}).get("anneal_steps", 0))
    return generator.eval()
