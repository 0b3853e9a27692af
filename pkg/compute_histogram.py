from pathlib import Path
from typing import Optional, Type

from pydantic import BaseModel, Field
from superagi.tools.base_tool import BaseTool

from artifacts import Histogram, compute_preactivation_histogram, write_histogram
from binarygan_logger import logger
from generate_samples import generate_samples
from seeding import RngStreams


class HistogramInput(BaseModel):
    checkpoint: str = Field(..., description="Path of the checkpoint to sample from")
    count: int = Field(64, ge=1, description="Number of sampled images whose preactivations are binned")
    seed: int = Field(0, ge=0, description="Seed for the latent vectors and stochastic neurons")
    output: Optional[str] = Field(None, description="TSV path of the histogram; defaults next to the checkpoint")


class ComputeHistogramTool(BaseTool):
    """
    Compute Histogram Tool
    Attributes:
        name : The name of the tool.
        description : The description of the tool.
        args_schema : The args schema.
    """
    name: str = "histogram"
    description: str = "Histogram the preactivated outputs of generated samples into 100 bins over [0, 1]"
    args_schema: Type[BaseModel] = HistogramInput

    def _execute(self, checkpoint: str, count: int = 64, seed: int = 0, output: Optional[str] = None) -> Histogram:
        _, record = generate_samples(checkpoint, count, RngStreams(seed).get("monitor"))
        histogram = compute_preactivation_histogram([record])
        path = Path(output) if output else Path(checkpoint).with_name(f"{Path(checkpoint).stem}_histogram.tsv")
        write_histogram(histogram, path)
        logger.info(f"Wrote histogram of {histogram.total} preactivations to {path}\n{histogram.preview()}")
        return histogram
