from pathlib import Path
from typing import Dict, Optional, Type

import numpy as np
from pydantic import BaseModel, Field, validator
from superagi.tools.base_tool import BaseTool

from artifacts import emit_sample_grid, is_square_count
from binarygan_logger import logger
from checkpoint import read_checkpoint
from generate_samples import generate_samples
from seeding import RngStreams

STRATEGIES = ("threshold", "bernoulli")


class PostprocessInput(BaseModel):
    checkpoint: str = Field(..., description="Path of a real-valued checkpoint")
    count: int = Field(64, ge=1, description="Number of images; a perfect square (default 64)")
    seed: int = Field(0, ge=0, description="Seed for the latent vectors and Bernoulli draws")
    output: Optional[str] = Field(None, description="Stem of the output grids; defaults next to the checkpoint")

    @validator("count")
    def _square_count(cls, count):
        if not is_square_count(count):
            raise ValueError(f"count must be a perfect square for the sample grids, got {count}")
        return count


def postprocess_real(probabilities: np.ndarray, strategy: str,
                     rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Binarize real-valued outputs.

    threshold: 1 where p >= 0.5. bernoulli: 1 with probability p, drawn independently per pixel.
    """
    probabilities = np.asarray(probabilities)
    if strategy == "threshold":
        return (probabilities >= 0.5).astype(probabilities.dtype)
    if strategy == "bernoulli":
        if rng is None:
            raise ValueError("Bernoulli post-processing needs a random stream")
        return (rng.random(probabilities.shape) < probabilities).astype(probabilities.dtype)
    raise ValueError(f"unknown post-processing strategy '{strategy}'; expected one of {', '.join(STRATEGIES)}")


class PostprocessSamplesTool(BaseTool):
    """
    Postprocess Samples Tool
    Attributes:
        name : The name of the tool.
        description : The description of the tool.
        args_schema : The args schema.
    """
    name: str = "postprocess"
    description: str = "Binarize samples of a real-valued generator by hard thresholding and by Bernoulli sampling"
    args_schema: Type[BaseModel] = PostprocessInput

    def _execute(self, checkpoint: str, count: int = 64, seed: int = 0,
                 output: Optional[str] = None) -> Dict[str, str]:
        loaded = read_checkpoint(checkpoint)
        mode = loaded.spec("generator").output_mode
        if mode != "real_valued":
            logger.warning(f"Checkpoint {checkpoint} has {mode} outputs; post-processing is meant for real-valued ones")
        streams = RngStreams(seed)
        images, _ = generate_samples(loaded, count, streams.get("monitor"))
        stem = Path(output) if output else Path(checkpoint).with_suffix("")
        written = {"real": str(emit_sample_grid(images, f"{stem}_real.png"))}
        for strategy in STRATEGIES:
            binary = postprocess_real(images, strategy, streams.get("postprocess"))
            written[strategy] = str(emit_sample_grid(binary, f"{stem}_{strategy}.png"))
        logger.info(f"Wrote post-processed grids: {', '.join(written.values())}")
        return written
