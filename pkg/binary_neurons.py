"""
Binary output neurons trained with the sigmoid-adjusted straight-through estimator.

The forward pass computes the preactivation p = sigmoid(slope * x) and
binarizes it, either by thresholding (deterministic) or by Bernoulli sampling
(stochastic). The backward pass ignores the binarization and uses the
derivative of the preactivation instead: upstream * slope * p * (1 - p).
"""
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, validator

from binarygan_logger import logger
from layers import Layer
from tensor_engine import CustomGradHook, DomainError, ShapeError, Tensor, affine, sigmoid_array

NEURON_MODES = ("deterministic", "stochastic", "real_valued")
BINARY_MODES = ("deterministic", "stochastic")
DEFAULT_SLOPE_FACTOR = 1.1


class PreactivationRecord(BaseModel):
    """
    Preactivated outputs of one forward call.
    Attributes:
        values : sigmoid(slope * x) per sample and neuron, strictly inside (0, 1).
        slope : The slope used by the forward call.
    """
    values: np.ndarray = Field(..., description="Preactivated outputs, strictly inside (0, 1)")
    slope: float = Field(1.0, gt=0, description="Sigmoid slope of the forward call")

    class Config:
        arbitrary_types_allowed = True

    @validator("values")
    def _strictly_inside_unit_interval(cls, values):
        if values.size and not (np.all(values > 0) and np.all(values < 1)):
            raise ValueError("preactivated outputs must lie strictly inside (0, 1)")
        return values


def preactivate(x: np.ndarray, slope: float) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise DomainError("binary neuron input contains non-finite values")
    return sigmoid_array(x * x.dtype.type(slope))


def ste_backward(upstream: np.ndarray, record: PreactivationRecord, slope: Optional[float] = None) -> np.ndarray:
    """
    Sigmoid-adjusted straight-through gradient, identical for both binary modes.

    Args:
        upstream : Gradient arriving at the binary output.
        record : Preactivation record of the matching forward call.
        slope : Slope of the surrogate sigmoid; defaults to the record's slope.

    Returns:
        upstream * slope * p * (1 - p)
    """
    if upstream.shape != record.values.shape:
        raise ShapeError(f"ste_backward: upstream {upstream.shape} does not match record {record.values.shape}")
    slope = record.slope if slope is None else slope
    p = record.values
    return upstream * (slope * p * (1.0 - p))


def _straight_through(x: Tensor, binary: np.ndarray, record: PreactivationRecord) -> Tensor:
    return CustomGradHook.apply(
        x,
        forward_fn=lambda a: binary,
        backward_fn=lambda upstream, a: ste_backward(upstream, record),
    )


def dbn_forward(x: Tensor, slope: float = 1.0) -> Tuple[Tensor, PreactivationRecord]:
    """Deterministic binary neuron: fires where p >= 0.5."""
    p = preactivate(x.data, slope)
    record = PreactivationRecord(values=p, slope=slope)
    return _straight_through(x, (p >= 0.5).astype(p.dtype), record), record


def sbn_forward(x: Tensor, slope: float, rng: np.random.Generator,
                thresholds: Optional[np.ndarray] = None) -> Tuple[Tensor, PreactivationRecord]:
    """
    Stochastic binary neuron: fires where p >= v, v ~ U[0, 1) drawn per neuron.
    `thresholds` replaces the draw, which makes thresholds of 0.5 reproduce `dbn_forward`.
    """
    p = preactivate(x.data, slope)
    if thresholds is None:
        thresholds = rng.random(p.shape, dtype=p.dtype)
    elif np.shape(thresholds) != p.shape:
        thresholds = np.broadcast_to(thresholds, p.shape)
    record = PreactivationRecord(values=p, slope=slope)
    return _straight_through(x, (p >= thresholds).astype(p.dtype), record), record


class BinaryOutputLayer(Layer):
    """
    Output nonlinearity of the generator.
    Attributes:
        mode : deterministic, stochastic or real_valued.
        rng : Stream for the Bernoulli draws of the stochastic mode.
        initial_slope : Slope before any annealing.
        slope_factor : Multiplier applied by each anneal.
        anneal_steps : Completed anneals.
        last_record : Preactivations of the latest forward call.
    """

    def __init__(self, mode: str, rng: Optional[np.random.Generator] = None, initial_slope: float = 1.0,
                 slope_factor: float = DEFAULT_SLOPE_FACTOR):
        super().__init__()
        if mode not in NEURON_MODES:
            raise ValueError(f"unknown neuron mode '{mode}'; expected one of {', '.join(NEURON_MODES)}")
        if mode == "stochastic" and rng is None:
            raise ValueError("stochastic binary neurons need a random stream")
        if initial_slope <= 0 or slope_factor < 1:
            raise ValueError(f"slope must be positive and non-decreasing, got {initial_slope} x {slope_factor}")
        self.mode = mode
        self.rng = rng
        self.initial_slope = float(initial_slope)
        self.slope_factor = float(slope_factor)
        self.anneal_steps = 0
        self.last_record: Optional[PreactivationRecord] = None

    @property
    def slope(self) -> float:
        return self.initial_slope * self.slope_factor ** self.anneal_steps

    @property
    def is_binary(self) -> bool:
        return self.mode in BINARY_MODES

    def forward(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        if self.mode == "deterministic":
            out, record = dbn_forward(x, self.slope)
        elif self.mode == "stochastic":
            out, record = sbn_forward(x, self.slope, rng or self.rng)
        else:
            out = affine(x, self.slope).sigmoid()
            record = PreactivationRecord(values=out.data, slope=self.slope)
        self.last_record = record
        return out


def anneal_slope(layer: BinaryOutputLayer, enabled: bool = True) -> BinaryOutputLayer:
    """
    Multiply the layer's slope by its factor; called once per completed epoch.
    Real-valued layers and disabled annealing leave the slope unchanged.
    """
    if enabled and layer.is_binary:
        layer.anneal_steps += 1
        logger.info(f"Annealed sigmoid slope to {layer.slope:.6f} after {layer.anneal_steps} epoch(s)")
    return layer
