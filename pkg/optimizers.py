"""
Parameter-update rules: bias-corrected Adam, RMSProp and hard weight clipping.

Parameters are passed as a name -> Tensor map. Updates happen in place on
`Tensor.data`; all gradients are validated before the first parameter moves.
"""
from typing import Any, Dict, Mapping, Optional

import numpy as np
from pydantic import BaseModel, Field

from binarygan_logger import logger
from tensor_engine import Tensor

OPTIMIZER_KINDS = ("adam", "rmsprop")

Params = Mapping[str, Tensor]
Grads = Mapping[str, Optional[np.ndarray]]


class OptimizerError(ValueError):
    """Gradients or state that cannot be applied to the parameters."""


class AdamState(BaseModel):
    """
    Attributes:
        learning_rate, beta1, beta2, eps : Update hyperparameters.
        step : Completed updates.
        m, v : First and second moment estimates per parameter name.
    """
    learning_rate: float = Field(1e-4, gt=0)
    beta1: float = Field(0.5, ge=0, lt=1)
    beta2: float = Field(0.9, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    step: int = Field(0, ge=0)
    m: Dict[str, np.ndarray] = Field(default_factory=dict)
    v: Dict[str, np.ndarray] = Field(default_factory=dict)

    class Config:
        arbitrary_types_allowed = True


class RmsPropState(BaseModel):
    """
    Attributes:
        learning_rate, decay, eps : Update hyperparameters.
        step : Completed updates.
        accumulators : Running mean of squared gradients per parameter name.
    """
    learning_rate: float = Field(1e-4, gt=0)
    decay: float = Field(0.9, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    step: int = Field(0, ge=0)
    accumulators: Dict[str, np.ndarray] = Field(default_factory=dict)

    class Config:
        arbitrary_types_allowed = True


def _validated_grads(params: Params, grads: Grads) -> Dict[str, np.ndarray]:
    resolved = {}
    for name, tensor in params.items():
        grad = grads.get(name)
        if grad is None:
            grad = np.zeros_like(tensor.data)
        if grad.shape != tensor.shape:
            logger.error(f"gradient for '{name}' has shape {grad.shape}, parameter has {tensor.shape}")
            raise OptimizerError(f"gradient for '{name}' has shape {grad.shape}, parameter has {tensor.shape}")
        if not np.all(np.isfinite(grad)):
            logger.error(f"non-finite gradient for '{name}'")
            raise OptimizerError(f"non-finite gradient for '{name}'")
        resolved[name] = grad.astype(tensor.dtype, copy=False)
    return resolved


def adam_step(params: Params, grads: Grads, state: AdamState) -> AdamState:
    """
    One bias-corrected Adam update of every parameter.

    Args:
        params : Parameters to update in place.
        grads : Gradient per parameter name; missing entries count as zero.
        state : Moments and step counter, updated in place.

    Returns:
        The updated state.
    """
    grads = _validated_grads(params, grads)
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, tensor in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(tensor.data)
            v = np.zeros_like(tensor.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        tensor.data -= state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return state


def rmsprop_step(params: Params, grads: Grads, state: RmsPropState) -> RmsPropState:
    """acc <- decay * acc + (1 - decay) * g^2; param <- param - lr * g / (sqrt(acc) + eps)."""
    grads = _validated_grads(params, grads)
    state.step += 1
    for name, tensor in params.items():
        g = grads[name]
        acc = state.accumulators.get(name)
        if acc is None:
            acc = np.zeros_like(tensor.data)
        acc = state.decay * acc + (1.0 - state.decay) * g * g
        state.accumulators[name] = acc
        tensor.data -= state.learning_rate * g / (np.sqrt(acc) + state.eps)
    return state


def clip_weights(params: Params, bound: float) -> Params:
    """Clamp every value of every parameter, biases included, into [-bound, bound]."""
    if bound <= 0:
        raise OptimizerError(f"clip bound must be positive, got {bound}")
    for tensor in params.values():
        np.clip(tensor.data, -bound, bound, out=tensor.data)
    return params


class Optimizer:
    """
    Binds an update rule to one network's parameters.
    Attributes:
        kind : adam or rmsprop.
        params : Name -> parameter tensor.
        state : AdamState or RmsPropState.
    """
    kind = ""

    def __init__(self, params: Params, state: BaseModel):
        self.params = dict(params)
        self.state = state

    def step(self) -> None:
        raise NotImplementedError

    def grads(self) -> Dict[str, Optional[np.ndarray]]:
        return {name: tensor.grad for name, tensor in self.params.items()}

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.zero_grad()

    def hyperparameters(self) -> Dict[str, Any]:
        return self.state.dict(exclude=set(self.array_fields()))

    def array_fields(self) -> tuple:
        raise NotImplementedError

    def state_dict(self) -> Dict[str, Any]:
        """Scalars plus one array per (field, parameter)."""
        arrays = {}
        for field in self.array_fields():
            for name, array in getattr(self.state, field).items():
                arrays[f"{field}/{name}"] = array
        return {"kind": self.kind, "hyperparameters": self.hyperparameters(), "arrays": arrays}

    def load_state_dict(self, state_dict: Dict[str, Any]) -> None:
        if state_dict.get("kind") != self.kind:
            raise OptimizerError(f"cannot load {state_dict.get('kind')} state into a {self.kind} optimizer")
        fields = {field: {} for field in self.array_fields()}
        for key, array in state_dict.get("arrays", {}).items():
            field, _, name = key.partition("/")
            if field not in fields or name not in self.params:
                raise OptimizerError(f"optimizer state entry '{key}' matches no parameter")
            if array.shape != self.params[name].shape:
                raise OptimizerError(
                    f"optimizer state '{key}' has shape {array.shape}, parameter has {self.params[name].shape}")
            fields[field][name] = np.array(array, dtype=self.params[name].dtype)
        self.state = type(self.state)(**state_dict["hyperparameters"], **fields)


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, params: Params, learning_rate: float = 1e-4, beta1: float = 0.5, beta2: float = 0.9,
                 eps: float = 1e-8):
        super().__init__(params, AdamState(learning_rate=learning_rate, beta1=beta1, beta2=beta2, eps=eps))

    def array_fields(self) -> tuple:
        return ("m", "v")

    def step(self) -> None:
        adam_step(self.params, self.grads(), self.state)


class RMSProp(Optimizer):
    kind = "rmsprop"

    def __init__(self, params: Params, learning_rate: float = 1e-4, decay: float = 0.9, eps: float = 1e-8):
        super().__init__(params, RmsPropState(learning_rate=learning_rate, decay=decay, eps=eps))

    def array_fields(self) -> tuple:
        return ("accumulators",)

    def step(self) -> None:
        rmsprop_step(self.params, self.grads(), self.state)


def build_optimizer(kind: str, params: Params, learning_rate: float = 1e-4, beta1: float = 0.5,
                    beta2: float = 0.9, decay: float = 0.9, eps: float = 1e-8) -> Optimizer:
    kind = kind.lower()
    if kind == "adam":
        return Adam(params, learning_rate=learning_rate, beta1=beta1, beta2=beta2, eps=eps)
    if kind == "rmsprop":
        return RMSProp(params, learning_rate=learning_rate, decay=decay, eps=eps)
    raise OptimizerError(f"unknown optimizer '{kind}'; expected one of {', '.join(OPTIMIZER_KINDS)}")
