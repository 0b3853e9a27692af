import hashlib
from contextlib import contextmanager
from typing import Any, Dict, Iterator

import numpy as np

from binarygan_logger import logger

STREAM_NAMES = (
    "init_generator",
    "init_discriminator",
    "latent",
    "neurons",
    "penalty",
    "shuffle",
    "monitor",
    "monitor_neurons",
    "postprocess",
)


def _stream_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:4], "little")


class RngStreams:
    """
    Independent random streams derived from one master seed.
    Each consumer draws from its own named stream, so toggling one consumer
    leaves the draws of every other consumer unchanged.
    Attributes:
        seed : The master seed.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: Dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        """Return the generator for `name`, creating it on first use."""
        if name not in STREAM_NAMES:
            raise ValueError(f"unknown random stream '{name}'; known streams: {', '.join(STREAM_NAMES)}")
        if name not in self._streams:
            sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=(_stream_key(name),))
            self._streams[name] = np.random.Generator(np.random.PCG64(sequence))
            logger.debug(f"Opened random stream '{name}' from seed {self.seed}")
        return self._streams[name]

    def state(self) -> Dict[str, Any]:
        return {name: rng.bit_generator.state for name, rng in sorted(self._streams.items())}

    @contextmanager
    def preserved(self, *names: str, enabled: bool = True) -> Iterator[None]:
        """Rewind the named streams to their state on entry; streams first opened inside are dropped again."""
        if not enabled:
            yield
            return
        saved = {name: self._streams[name].bit_generator.state for name in names if name in self._streams}
        try:
            yield
        finally:
            for name in names:
                if name in saved:
                    self._streams[name].bit_generator.state = saved[name]
                else:
                    self._streams.pop(name, None)
