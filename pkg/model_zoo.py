"""
Generator and discriminator architectures for the MLP and CNN families.

Binary neurons are used only at the generator's output layer. The
discriminator's head is a sigmoid for the GAN objective and linear for the
Wasserstein objectives.
"""
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, root_validator, validator
from tabulate import tabulate

from binary_neurons import NEURON_MODES, BinaryOutputLayer
from binarygan_logger import logger
from layers import (Conv2DLayer, DenseLayer, Layer, LayerError, MaxPool2DLayer, ReshapeLayer, Sequential,
                    TransConv2DLayer)
from objectives import OBJECTIVE_KINDS
from tensor_engine import ShapeError, Tensor

FAMILIES = ("MLP", "CNN")
SIDES = ("generator", "discriminator")
IMAGE_SHAPE = (1, 28, 28)
IMAGE_PIXELS = 784
DEFAULT_LATENT_DIM = 128


class ModelSpec(BaseModel):
    """
    Attributes:
        family : MLP or CNN.
        side : generator or discriminator.
        output_mode : Generator output neurons (deterministic, stochastic or real_valued).
        objective : GAN, WGAN or WGAN_GP; selects the discriminator head.
        bn_in_g, bn_in_d : Batch norm after each hidden layer of the generator / discriminator.
        latent_dim : Size of z, drawn from a standard normal.
        initial_slope, slope_factor : Sigmoid slope schedule of the output neurons.
    """
    family: str = Field("MLP", description="Network family: MLP or CNN")
    side: str = Field("generator", description="generator or discriminator")
    output_mode: str = Field("deterministic", description="deterministic, stochastic or real_valued")
    objective: str = Field("WGAN_GP", description="GAN, WGAN or WGAN_GP")
    bn_in_g: bool = Field(True, description="Batch norm in the generator's hidden layers")
    bn_in_d: bool = Field(False, description="Batch norm in the discriminator's hidden layers")
    latent_dim: int = Field(DEFAULT_LATENT_DIM, ge=1, description="Latent vector size")
    initial_slope: float = Field(1.0, gt=0)
    slope_factor: float = Field(1.1, ge=1)

    @validator("family", pre=True)
    def _family(cls, family):
        family = str(family).upper()
        if family not in FAMILIES:
            raise ValueError(f"unknown family '{family}'; expected one of {', '.join(FAMILIES)}")
        return family

    @validator("objective", pre=True)
    def _objective(cls, objective):
        objective = str(objective).upper().replace("-", "_")
        if objective not in OBJECTIVE_KINDS:
            raise ValueError(f"unknown objective '{objective}'")
        return objective

    @root_validator(skip_on_failure=True)
    def _side_and_mode(cls, values):
        if values["side"] not in SIDES:
            raise ValueError(f"unknown side '{values['side']}'")
        if values["output_mode"] not in NEURON_MODES:
            raise ValueError(f"unknown output mode '{values['output_mode']}'")
        return values

    @property
    def head(self) -> str:
        return "sigmoid" if self.objective == "GAN" else "linear"

    @property
    def output_shape(self) -> Tuple[int, ...]:
        if self.side == "discriminator":
            return (1,)
        return (IMAGE_PIXELS,) if self.family == "MLP" else IMAGE_SHAPE


def sample_latent(count: int, latent_dim: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((count, latent_dim), dtype=np.float32)


class Generator(Layer):
    """
    Hidden body followed by the binary (or real-valued) output layer.
    Attributes:
        spec : Construction spec.
        body : Layers from z to the output preactivation logits.
        output : The output neurons.
    """

    def __init__(self, spec: ModelSpec, body: Sequential, output: BinaryOutputLayer):
        super().__init__()
        for name, layer in _walk(body):
            if isinstance(layer, BinaryOutputLayer):
                raise LayerError(f"binary neurons are only allowed at the generator output, found '{name}'")
        self.spec = spec
        self.body = body
        self.output = output

    def children(self) -> List[Tuple[str, Layer]]:
        return [("body", self.body), ("output", self.output)]

    def forward(self, z: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        if z.ndim != 2 or z.shape[1] != self.spec.latent_dim:
            raise ShapeError(f"generator expects latent batches (N, {self.spec.latent_dim}), got {z.shape}")
        return self.output(self.body(z), rng=rng)

    def preactivations(self) -> Optional[np.ndarray]:
        record = self.output.last_record
        return None if record is None else record.values


class Discriminator(Layer):
    """
    Attributes:
        spec : Construction spec.
        body : Layers from an image batch to one score per sample.
        head : sigmoid or linear.
    """

    def __init__(self, spec: ModelSpec, body: Sequential):
        super().__init__()
        self.spec = spec
        self.body = body
        self.head = spec.head

    def children(self) -> List[Tuple[str, Layer]]:
        return [("body", self.body)]

    def forward(self, x: Tensor) -> Tensor:
        return self.body(x)


def _walk(layer: Layer, prefix: str = "") -> List[Tuple[str, Layer]]:
    found = []
    for name, child in layer.children():
        found.append((f"{prefix}{name}", child))
        found.extend(_walk(child, f"{prefix}{name}."))
    return found


def _output_layer(spec: ModelSpec, neuron_rng: Optional[np.random.Generator]) -> BinaryOutputLayer:
    return BinaryOutputLayer(spec.output_mode, rng=neuron_rng, initial_slope=spec.initial_slope,
                             slope_factor=spec.slope_factor)


def build_mlp_generator(spec: ModelSpec, rng: np.random.Generator,
                        neuron_rng: Optional[np.random.Generator] = None) -> Generator:
    """z -> dense 1024 (ReLU) -> dense 784 -> output neurons."""
    body = Sequential([
        ("hidden", DenseLayer(spec.latent_dim, 1024, rng, activation="relu", batch_norm=spec.bn_in_g)),
        ("logits", DenseLayer(1024, IMAGE_PIXELS, rng, activation="linear")),
    ])
    return Generator(spec, body, _output_layer(spec, neuron_rng or rng))


def build_mlp_discriminator(spec: ModelSpec, rng: np.random.Generator) -> Discriminator:
    """784 -> 512 (LeakyReLU) -> 256 (LeakyReLU) -> 1, sigmoid head for GAN."""
    body = Sequential([
        ("hidden1", DenseLayer(IMAGE_PIXELS, 512, rng, activation="leaky_relu", batch_norm=spec.bn_in_d)),
        ("hidden2", DenseLayer(512, 256, rng, activation="leaky_relu", batch_norm=spec.bn_in_d)),
        ("score", DenseLayer(256, 1, rng, activation=spec.head)),
    ])
    return Discriminator(spec, body)


def build_cnn_generator(spec: ModelSpec, rng: np.random.Generator,
                        neuron_rng: Optional[np.random.Generator] = None) -> Generator:
    """
    z as a 1 x 1 map of latent_dim channels, then four valid transposed
    convolutions growing the side 1 -> 2 -> 6 -> 13 -> 28.
    """
    bn = spec.bn_in_g
    body = Sequential([
        ("latent", ReshapeLayer((spec.latent_dim, 1, 1))),
        ("tconv1", TransConv2DLayer(spec.latent_dim, 128, 2, rng, stride=1, activation="relu", batch_norm=bn)),
        ("tconv2", TransConv2DLayer(128, 64, 4, rng, stride=2, activation="relu", batch_norm=bn)),
        ("tconv3", TransConv2DLayer(64, 32, 3, rng, stride=2, activation="relu", batch_norm=bn)),
        ("logits", TransConv2DLayer(32, 1, 4, rng, stride=2, activation="linear")),
    ])
    return Generator(spec, body, _output_layer(spec, neuron_rng or rng))


def build_cnn_discriminator(spec: ModelSpec, rng: np.random.Generator) -> Discriminator:
    """Two same-padded 3x3 convolutions with 2x2 pooling, then dense 3136 -> 128 -> 1."""
    bn = spec.bn_in_d
    body = Sequential([
        ("conv1", Conv2DLayer(1, 32, 3, rng, padding="same", activation="leaky_relu", batch_norm=bn)),
        ("pool1", MaxPool2DLayer(2)),
        ("conv2", Conv2DLayer(32, 64, 3, rng, padding="same", activation="leaky_relu", batch_norm=bn)),
        ("pool2", MaxPool2DLayer(2)),
        ("flatten", ReshapeLayer((-1,))),
        ("hidden", DenseLayer(7 * 7 * 64, 128, rng, activation="leaky_relu", batch_norm=bn)),
        ("score", DenseLayer(128, 1, rng, activation=spec.head)),
    ])
    return Discriminator(spec, body)


def build_network(spec: ModelSpec, rng: np.random.Generator,
                  neuron_rng: Optional[np.random.Generator] = None) -> Layer:
    logger.debug(f"Building {spec.family} {spec.side} (objective={spec.objective}, output={spec.output_mode})")
    if spec.side == "generator":
        builder = build_mlp_generator if spec.family == "MLP" else build_cnn_generator
        return builder(spec, rng, neuron_rng)
    builder = build_mlp_discriminator if spec.family == "MLP" else build_cnn_discriminator
    return builder(spec, rng)


def count_parameters(network: Layer) -> int:
    return int(sum(tensor.size for tensor in network.named_parameters().values()))


def parameter_table(networks: Dict[str, Layer]) -> str:
    rows = [[name, type(net).__name__, f"{count_parameters(net):,}"] for name, net in networks.items()]
    return tabulate(rows, headers=["Network", "Kind", "Parameters"], tablefmt="pretty")
