"""
Network building blocks: dense, convolution, transposed convolution, max
pooling and batch normalization, plus their initialization.

Parameters are leaf `Tensor`s flagged requires_grad; batch-norm running
statistics are plain arrays ("buffers") that never receive gradients.
"""
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from binarygan_logger import logger
from tensor_engine import ShapeError, Tensor, conv2d, maxpool2d, transconv2d

ACTIVATIONS = ("linear", "relu", "leaky_relu", "sigmoid")
LEAKY_SLOPE = 0.2
BN_MOMENTUM = 0.9
BN_EPSILON = 1e-5


class LayerError(ValueError):
    """Invalid layer construction or use."""


def apply_activation(x: Tensor, activation: str) -> Tensor:
    if activation == "linear":
        return x
    if activation == "relu":
        return x.relu()
    if activation == "leaky_relu":
        return x.leaky_relu(LEAKY_SLOPE)
    if activation == "sigmoid":
        return x.sigmoid()
    raise LayerError(f"unknown activation '{activation}'; expected one of {', '.join(ACTIVATIONS)}")


def he_uniform_bound(fan_in: int) -> float:
    return math.sqrt(6.0 / fan_in)


def glorot_uniform_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_parameters(weight_shape: Sequence[int], bias_size: int, fan_in: int, fan_out: int,
                    activation: str, rng: np.random.Generator,
                    dtype=np.float32) -> Tuple[np.ndarray, np.ndarray]:
    """
    Draw a weight array and a zero bias.

    He-uniform (fan-in) scaling for ReLU and LeakyReLU layers, Glorot-uniform
    for sigmoid and linear layers.

    Returns:
        (weight, bias) arrays of the requested dtype.
    """
    if activation in ("relu", "leaky_relu"):
        bound = he_uniform_bound(fan_in)
    else:
        bound = glorot_uniform_bound(fan_in, fan_out)
    weight = rng.uniform(-bound, bound, size=tuple(weight_shape)).astype(dtype)
    return weight, np.zeros(bias_size, dtype=dtype)


class Layer:
    """
    Base class for all blocks.
    Attributes:
        training : Train mode (batch statistics) or eval mode (running statistics).
    """

    def __init__(self):
        self.training = True

    def __call__(self, x: Tensor, **kwargs) -> Tensor:
        return self.forward(x, **kwargs)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def children(self) -> List[Tuple[str, "Layer"]]:
        return []

    def own_parameters(self) -> Dict[str, Tensor]:
        return {}

    def own_buffers(self) -> Dict[str, np.ndarray]:
        return {}

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        params = {f"{prefix}{name}": tensor for name, tensor in self.own_parameters().items()}
        for name, child in self.children():
            params.update(child.named_parameters(f"{prefix}{name}."))
        return params

    def named_buffers(self, prefix: str = "") -> Dict[str, np.ndarray]:
        buffers = {f"{prefix}{name}": array for name, array in self.own_buffers().items()}
        for name, child in self.children():
            buffers.update(child.named_buffers(f"{prefix}{name}."))
        return buffers

    def train(self, mode: bool = True) -> "Layer":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Layer":
        return self.train(False)

    def requires_grad_(self, flag: bool = True) -> "Layer":
        for tensor in self.named_parameters().values():
            tensor.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for tensor in self.named_parameters().values():
            tensor.zero_grad()


class BatchNormLayer(Layer):
    """
    Per-feature (2-d input) or per-channel (4-d input) batch normalization.
    Attributes:
        gamma, beta : Scale and shift parameters.
        running_mean, running_var : Statistics used in eval mode.
        momentum : Weight kept on the running value at each update.
        epsilon : Variance floor.
    """

    def __init__(self, num_features: int, momentum: float = BN_MOMENTUM, epsilon: float = BN_EPSILON,
                 dtype=np.float32):
        super().__init__()
        if not 0.0 < momentum < 1.0:
            raise LayerError(f"batch-norm momentum must lie in (0, 1), got {momentum}")
        if epsilon <= 0:
            raise LayerError(f"batch-norm epsilon must be positive, got {epsilon}")
        self.num_features = num_features
        self.momentum = momentum
        self.epsilon = epsilon
        self.gamma = Tensor(np.ones(num_features, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(num_features, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)

    def own_parameters(self) -> Dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def own_buffers(self) -> Dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm_forward(x, self)


def batchnorm_forward(x: Tensor, layer: BatchNormLayer, mode: Optional[str] = None) -> Tensor:
    """
    Normalize `x` by batch statistics (train) or running statistics (eval),
    then scale by gamma and shift by beta. Train mode updates the running
    statistics in place; eval mode leaves the layer untouched.
    """
    mode = mode or ("train" if layer.training else "eval")
    if x.ndim == 2:
        axes, shape = (0,), (1, layer.num_features)
    elif x.ndim == 4:
        axes, shape = (0, 2, 3), (1, layer.num_features, 1, 1)
    else:
        raise ShapeError(f"batch norm: expected a 2-d or 4-d input, got {x.shape}")
    if x.shape[1] != layer.num_features:
        raise ShapeError(f"batch norm: input has {x.shape[1]} features, layer has {layer.num_features}")

    if mode == "train":
        if x.shape[0] < 2:
            raise LayerError(f"batch norm in train mode needs a batch of at least 2, got {x.shape[0]}")
        mean = x.mean(axis=axes, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=axes, keepdims=True)
        normalized = centered / (var + layer.epsilon).sqrt()
        keep = layer.momentum
        layer.running_mean[...] = keep * layer.running_mean + (1.0 - keep) * mean.data.reshape(-1)
        layer.running_var[...] = keep * layer.running_var + (1.0 - keep) * var.data.reshape(-1)
    elif mode == "eval":
        mean = Tensor(layer.running_mean.reshape(shape).astype(x.dtype))
        scale = Tensor(np.sqrt(layer.running_var + layer.epsilon).reshape(shape).astype(x.dtype))
        normalized = (x - mean) / scale
    else:
        raise LayerError(f"unknown batch-norm mode '{mode}'")
    return normalized * layer.gamma.reshape(shape) + layer.beta.reshape(shape)


class DenseLayer(Layer):
    """
    Fully connected layer: x W + b, optional batch norm, then activation.
    Attributes:
        weight : (in_features x out_features) tensor.
        bias : (out_features) tensor.
        activation : Activation tag.
        bn : Batch-norm block applied before the activation, or None.
    """

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 activation: str = "linear", batch_norm: bool = False, dtype=np.float32):
        super().__init__()
        if in_features <= 0 or out_features <= 0:
            raise LayerError(f"dense layer needs positive sizes, got {in_features} -> {out_features}")
        if activation not in ACTIVATIONS:
            raise LayerError(f"unknown activation '{activation}'")
        self.in_features = in_features
        self.out_features = out_features
        self.activation = activation
        weight, bias = init_parameters((in_features, out_features), out_features, in_features, out_features,
                                       activation, rng, dtype)
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(bias, requires_grad=True)
        self.bn = BatchNormLayer(out_features, dtype=dtype) if batch_norm else None

    def own_parameters(self) -> Dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def children(self) -> List[Tuple[str, Layer]]:
        return [("bn", self.bn)] if self.bn is not None else []

    def forward(self, x: Tensor) -> Tensor:
        return dense_forward(x, self)


def dense_forward(x: Tensor, layer: DenseLayer) -> Tensor:
    if x.ndim != 2 or x.shape[1] != layer.in_features:
        raise ShapeError(f"dense: expected (batch, {layer.in_features}) input, got {x.shape}")
    out = x @ layer.weight + layer.bias
    if layer.bn is not None:
        out = batchnorm_forward(out, layer.bn)
    return apply_activation(out, layer.activation)


class Conv2DLayer(Layer):
    """
    Convolution layer with kernels (out_channels x in_channels x k x k).
    Attributes:
        weight, bias : Kernel and per-channel bias.
        stride, padding : Fixed at construction; padding is 'same' or 'valid'.
        activation : Activation tag applied after the optional batch norm.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: str = "same", activation: str = "linear",
                 batch_norm: bool = False, dtype=np.float32):
        super().__init__()
        _check_conv_args(kernel_size, stride, padding, activation)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.activation = activation
        area = kernel_size * kernel_size
        weight, bias = init_parameters((out_channels, in_channels, kernel_size, kernel_size), out_channels,
                                       in_channels * area, out_channels * area, activation, rng, dtype)
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(bias, requires_grad=True)
        self.bn = BatchNormLayer(out_channels, dtype=dtype) if batch_norm else None

    def own_parameters(self) -> Dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def children(self) -> List[Tuple[str, Layer]]:
        return [("bn", self.bn)] if self.bn is not None else []

    def forward(self, x: Tensor) -> Tensor:
        return conv2d_forward(x, self)


class TransConv2DLayer(Layer):
    """
    Transposed convolution layer with kernels (in_channels x out_channels x k x k),
    the orientation under which it is the adjoint of a convolution with the same kernel.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, padding: str = "valid", activation: str = "linear",
                 batch_norm: bool = False, dtype=np.float32):
        super().__init__()
        _check_conv_args(kernel_size, stride, padding, activation)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.activation = activation
        area = kernel_size * kernel_size
        weight, bias = init_parameters((in_channels, out_channels, kernel_size, kernel_size), out_channels,
                                       in_channels * area, out_channels * area, activation, rng, dtype)
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(bias, requires_grad=True)
        self.bn = BatchNormLayer(out_channels, dtype=dtype) if batch_norm else None

    def own_parameters(self) -> Dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def children(self) -> List[Tuple[str, Layer]]:
        return [("bn", self.bn)] if self.bn is not None else []

    def forward(self, x: Tensor) -> Tensor:
        return transconv2d_forward(x, self)


def _check_conv_args(kernel_size: int, stride: int, padding: str, activation: str) -> None:
    if kernel_size <= 0 or stride <= 0:
        raise LayerError(f"kernel size and stride must be positive, got {kernel_size} and {stride}")
    if padding not in ("same", "valid"):
        raise LayerError(f"padding must be 'same' or 'valid', got '{padding}'")
    if activation not in ACTIVATIONS:
        raise LayerError(f"unknown activation '{activation}'")


def conv2d_forward(x: Tensor, layer: Conv2DLayer) -> Tensor:
    out = conv2d(x, layer.weight, layer.bias, stride=layer.stride, padding=layer.padding)
    if layer.bn is not None:
        out = batchnorm_forward(out, layer.bn)
    return apply_activation(out, layer.activation)


def transconv2d_forward(x: Tensor, layer: TransConv2DLayer) -> Tensor:
    out = transconv2d(x, layer.weight, layer.bias, stride=layer.stride, padding=layer.padding)
    if layer.bn is not None:
        out = batchnorm_forward(out, layer.bn)
    return apply_activation(out, layer.activation)


class MaxPool2DLayer(Layer):

    def __init__(self, kernel_size: int = 2, stride: Optional[int] = None):
        super().__init__()
        self.kernel_size = kernel_size
        self.stride = stride or kernel_size

    def forward(self, x: Tensor) -> Tensor:
        return maxpool2d_forward(x, self)


def maxpool2d_forward(x: Tensor, layer: MaxPool2DLayer) -> Tensor:
    return maxpool2d(x, layer.kernel_size, layer.stride)


class ReshapeLayer(Layer):
    """Reshape every sample to `shape`; (-1,) flattens."""

    def __init__(self, shape: Sequence[int]):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x: Tensor) -> Tensor:
        return x.reshape((x.shape[0],) + self.shape)


class Sequential(Layer):
    """Named layers applied in order."""

    def __init__(self, layers: Sequence[Tuple[str, Layer]]):
        super().__init__()
        names = [name for name, _ in layers]
        if len(set(names)) != len(names):
            raise LayerError(f"duplicate layer names in {names}")
        self.layers = list(layers)

    def children(self) -> List[Tuple[str, Layer]]:
        return list(self.layers)

    def forward(self, x: Tensor) -> Tensor:
        for name, layer in self.layers:
            x = layer(x)
            logger.debug(f"{name}: {x.shape}")
        return x
