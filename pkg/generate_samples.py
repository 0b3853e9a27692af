from pathlib import Path
from typing import Optional, Tuple, Type, Union

import numpy as np
from pydantic import BaseModel, Field, validator
from superagi.tools.base_tool import BaseTool

from artifacts import emit_sample_grid, is_square_count
from binary_neurons import PreactivationRecord
from binarygan_logger import logger
from checkpoint import Checkpoint, read_checkpoint, restore_generator
from model_zoo import sample_latent
from seeding import RngStreams
from tensor_engine import ShapeError, Tensor

IMAGE_SHAPE = (28, 28)


class GenerateSamplesInput(BaseModel):
    checkpoint: str = Field(..., description="Path of the checkpoint to sample from")
    count: int = Field(64, ge=1, description="Number of images; a perfect square for the grid (default 64)")
    seed: int = Field(0, ge=0, description="Seed for the latent vectors and stochastic neurons")
    output: Optional[str] = Field(None, description="PNG path of the sample grid; defaults next to the checkpoint")

    @validator("count")
    def _square_count(cls, count):
        if not is_square_count(count):
            raise ValueError(f"count must be a perfect square for the sample grid, got {count}")
        return count


def generate_samples(checkpoint: Union[str, Path, Checkpoint], count: int, rng: np.random.Generator,
                     z: Optional[np.ndarray] = None) -> Tuple[np.ndarray, PreactivationRecord]:
    """
    Sample images from a checkpointed generator in eval mode.

    Args:
        checkpoint : Checkpoint or its path.
        count : Number of images.
        rng : Stream for the latent vectors (when `z` is not given) and the stochastic neurons.
        z : Latent vectors to use instead of fresh draws.

    Returns:
        (count x 28 x 28 images, preactivation record)
    """
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = read_checkpoint(checkpoint)
    generator = restore_generator(checkpoint, neuron_rng=rng)
    latent_dim = generator.spec.latent_dim
    if z is None:
        z = sample_latent(count, latent_dim, rng)
    elif z.shape != (count, latent_dim):
        raise ShapeError(f"latent vectors must be ({count}, {latent_dim}), got {z.shape}")
    images = generator(Tensor(z), rng=rng).data
    record = generator.output.last_record
    return images.reshape((count,) + IMAGE_SHAPE), record


class GenerateSamplesTool(BaseTool):
    """
    Generate Samples Tool
    Attributes:
        name : The name of the tool.
        description : The description of the tool.
        args_schema : The args schema.
    """
    name: str = "sample"
    description: str = "Draw images from a trained generator and write them as a sample grid"
    args_schema: Type[BaseModel] = GenerateSamplesInput

    def _execute(self, checkpoint: str, count: int = 64, seed: int = 0, output: Optional[str] = None) -> str:
        images, record = generate_samples(checkpoint, count, RngStreams(seed).get("monitor"))
        grid_path = Path(output) if output else Path(checkpoint).with_name(f"{Path(checkpoint).stem}_samples.png")
        emit_sample_grid(images, grid_path)
        preact_path = grid_path.with_name(f"{grid_path.stem}_preactivations.png")
        emit_sample_grid(record.values, preact_path)
        logger.info(f"Wrote {count} samples to {grid_path} and their preactivations to {preact_path}")
        return str(grid_path)
