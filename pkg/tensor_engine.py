"""
Reverse-mode automatic differentiation over dense numpy arrays.

Every primitive is a `Function` whose forward rule works on arrays and whose
backward rule is written with tensor operations. A backward pass run with
`create_graph` is therefore recorded on the tape like any forward computation,
which is what the gradient penalty needs to differentiate a gradient norm.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager, nullcontext
from typing import Any, Callable, ClassVar, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from binarygan_logger import logger

DEFAULT_DTYPE = np.float32
FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operands whose shapes the op cannot combine."""


class DomainError(ValueError):
    """Operand values outside the op's domain."""


class GradientError(RuntimeError):
    """Backward pass could not produce a valid gradient."""


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    """Logistic function clamped strictly inside (0, 1) for the array's float type."""
    info = np.finfo(x.dtype)
    out = np.asarray(expit(x), dtype=x.dtype)
    return np.clip(out, info.tiny, 1.0 - info.eps, out=out)


class Tensor:
    """
    N-dimensional array taking part in a recorded computation.
    Attributes:
        data : The values, float32 by default, float64 when requested.
        requires_grad : Whether gradients flow into this tensor.
        grad : Accumulated gradient with the same shape as data, or None.
        node : Tape node that produced this tensor, None for leaves and constants.
        name : Optional label used in checkpoints and error messages.
    """
    __array_priority__ = 100

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            array = np.asarray(data, dtype=dtype)
        elif isinstance(data, (np.ndarray, np.generic)) and data.dtype in FLOAT_DTYPES:
            array = np.asarray(data)
        else:
            array = np.asarray(data, dtype=DEFAULT_DTYPE)
        if array.dtype not in FLOAT_DTYPES:
            raise TypeError(f"Tensor values must be float32 or float64, got {array.dtype}")
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{label})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # Arithmetic
    def __add__(self, other): return Add.apply(self, _lift(other, self))
    def __radd__(self, other): return Add.apply(_lift(other, self), self)
    def __sub__(self, other): return Sub.apply(self, _lift(other, self))
    def __rsub__(self, other): return Sub.apply(_lift(other, self), self)
    def __mul__(self, other): return Mul.apply(self, _lift(other, self))
    def __rmul__(self, other): return Mul.apply(_lift(other, self), self)
    def __truediv__(self, other): return Div.apply(self, _lift(other, self))
    def __rtruediv__(self, other): return Div.apply(_lift(other, self), self)
    def __neg__(self): return Neg.apply(self)
    def __pow__(self, exponent: float): return Pow.apply(self, exponent=float(exponent))
    def __matmul__(self, other): return MatMul.apply(self, _lift(other, self))
    def __rmatmul__(self, other): return MatMul.apply(_lift(other, self), self)

    def __getitem__(self, index) -> "Tensor":
        if not isinstance(index, tuple):
            index = (index,)
        return Slice.apply(self, index=index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=tuple(shape))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=tuple(axes) if axes else tuple(reversed(range(self.ndim))))

    def sigmoid(self) -> "Tensor": return Sigmoid.apply(self)
    def log(self) -> "Tensor": return Log.apply(self)
    def exp(self) -> "Tensor": return Exp.apply(self)
    def sqrt(self) -> "Tensor": return Sqrt.apply(self)
    def relu(self) -> "Tensor": return Relu.apply(self)
    def leaky_relu(self, slope: float = 0.2) -> "Tensor": return LeakyRelu.apply(self, slope=slope)


def _lift(value: Any, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _const(array: np.ndarray, like: Tensor) -> Tensor:
    return Tensor(np.asarray(array, dtype=like.dtype))


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class Node:
    __slots__ = ("index", "function", "inputs", "output", "tape")

    def __init__(self, index: int, function: "Function", inputs: Tuple[Tensor, ...], output: Tensor, tape: "Tape"):
        self.index = index
        self.function = function
        self.inputs = inputs
        self.output = output
        self.tape = tape


class Tape:
    """
    Ordered record of the operations executed while the tape is active.
    Nodes are appended in execution order, so every node's inputs precede it.
    Attributes:
        nodes : Recorded nodes.
        recording : Whether operations are currently appended.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.recording = True

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc_info) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record_node(self, function: "Function", inputs: Sequence[Tensor], output: Tensor) -> Node:
        node = Node(len(self.nodes), function, tuple(inputs), output, self)
        output.node = node
        self.nodes.append(node)
        return node

    @contextmanager
    def paused(self) -> Iterator[None]:
        previous = self.recording
        self.recording = False
        try:
            yield
        finally:
            self.recording = previous

    def clear(self) -> None:
        self.nodes = []


_local = threading.local()


def _tape_stack() -> List[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape() -> Optional[Tape]:
    """The innermost active tape, or None when nothing is being recorded."""
    stack = _tape_stack()
    if stack and stack[-1].recording:
        return stack[-1]
    return None


@contextmanager
def no_grad() -> Iterator[None]:
    stack = _tape_stack()
    if not stack:
        yield
        return
    with stack[-1].paused():
        yield


@contextmanager
def _silenced(tape: Tape) -> Iterator[None]:
    with tape.paused(), no_grad():
        yield


# ---------------------------------------------------------------------------
# Functions
# ---------------------------------------------------------------------------

_OPS: Dict[str, Callable[..., Tensor]] = {}


def register_op(op_kind: str) -> Callable:
    """Register a composite operation under an op kind usable with `record`."""
    def decorator(fn: Callable[..., Tensor]) -> Callable[..., Tensor]:
        _OPS[op_kind] = fn
        return fn
    return decorator


class Function:
    """
    One differentiable primitive.
    Subclasses implement `forward` on arrays and `backward` with tensor ops.
    `backward` receives the upstream gradient, the recorded inputs and output,
    and a mask of which inputs need a gradient.
    Attributes:
        op_kind : Registry name of the primitive.
        second_order : Whether backward is itself differentiable.
        params : Non-tensor arguments of this application.
    """
    op_kind: ClassVar[str] = ""
    second_order: ClassVar[bool] = True

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if cls.op_kind:
            _OPS[cls.op_kind] = cls.apply

    def __init__(self, **params):
        self.params = params

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: Tensor, inputs: Tuple[Tensor, ...], output: Tensor,
                 needs: Tuple[bool, ...]) -> Sequence[Optional[Tensor]]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **params) -> Tensor:
        function = cls(**params)
        try:
            data = function.forward(*(t.data for t in inputs))
        except (ShapeError, DomainError):
            raise
        except ValueError as e:
            shapes = " and ".join(str(t.shape) for t in inputs)
            raise ShapeError(f"{cls.op_kind}: cannot combine shapes {shapes} ({e})") from e
        tape = current_tape()
        track = tape is not None and any(t.requires_grad for t in inputs)
        output = Tensor(data, requires_grad=track)
        if track:
            tape.record_node(function, inputs, output)
        return output


def record(op_kind: str, *inputs: Any, **params) -> Tensor:
    """Apply the op registered as `op_kind`, recording it on the active tape."""
    try:
        op = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind '{op_kind}'; known kinds: {', '.join(sorted(_OPS))}") from None
    tensors = [x if isinstance(x, Tensor) else Tensor(x) for x in inputs]
    return op(*tensors, **params)


def _unbroadcast(grad: Tensor, shape: Tuple[int, ...]) -> Tensor:
    if grad.shape == tuple(shape):
        return grad
    return SumTo.apply(grad, shape=tuple(shape))


def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _expand_reduced(grad: Tensor, input_shape: Tuple[int, ...], axis, keepdims: bool) -> Tensor:
    axes = _normalize_axes(axis, len(input_shape))
    if not keepdims:
        kept = tuple(1 if i in axes else d for i, d in enumerate(input_shape))
        grad = Reshape.apply(grad, shape=kept)
    return BroadcastTo.apply(grad, shape=tuple(input_shape))


def _swap_last(t: Tensor) -> Tensor:
    axes = tuple(range(t.ndim - 2)) + (t.ndim - 1, t.ndim - 2)
    return Transpose.apply(t, axes=axes)


class Add(Function):
    op_kind = "add"

    def forward(self, a, b):
        return a + b

    def backward(self, grad, inputs, output, needs):
        a, b = inputs
        return (_unbroadcast(grad, a.shape) if needs[0] else None,
                _unbroadcast(grad, b.shape) if needs[1] else None)


class Sub(Function):
    op_kind = "sub"

    def forward(self, a, b):
        return a - b

    def backward(self, grad, inputs, output, needs):
        a, b = inputs
        return (_unbroadcast(grad, a.shape) if needs[0] else None,
                _unbroadcast(-grad, b.shape) if needs[1] else None)


class Mul(Function):
    op_kind = "mul"

    def forward(self, a, b):
        return a * b

    def backward(self, grad, inputs, output, needs):
        a, b = inputs
        return (_unbroadcast(grad * b, a.shape) if needs[0] else None,
                _unbroadcast(grad * a, b.shape) if needs[1] else None)


class Div(Function):
    op_kind = "div"

    def forward(self, a, b):
        return a / b

    def backward(self, grad, inputs, output, needs):
        a, b = inputs
        return (_unbroadcast(grad / b, a.shape) if needs[0] else None,
                _unbroadcast(-grad * a / (b * b), b.shape) if needs[1] else None)


class Neg(Function):
    op_kind = "neg"

    def forward(self, a):
        return -a

    def backward(self, grad, inputs, output, needs):
        return (-grad,)


class Pow(Function):
    op_kind = "pow"

    def forward(self, a):
        return a ** a.dtype.type(self.params["exponent"])

    def backward(self, grad, inputs, output, needs):
        (a,) = inputs
        exponent = self.params["exponent"]
        return (grad * exponent * a ** (exponent - 1.0),)


class Affine(Function):
    """Scalar affine map y = scale * x + shift."""
    op_kind = "affine"

    def forward(self, a):
        return a * a.dtype.type(self.params["scale"]) + a.dtype.type(self.params.get("shift", 0.0))

    def backward(self, grad, inputs, output, needs):
        return (Affine.apply(grad, scale=self.params["scale"], shift=0.0),)


class Exp(Function):
    op_kind = "exp"

    def forward(self, a):
        return np.exp(a)

    def backward(self, grad, inputs, output, needs):
        return (grad * output,)


class Log(Function):
    op_kind = "log"

    def forward(self, a):
        bad = int(np.count_nonzero(~(a > 0)))
        if bad:
            raise DomainError(f"log: {bad} value(s) are not strictly positive")
        return np.log(a)

    def backward(self, grad, inputs, output, needs):
        return (grad / inputs[0],)


class Sqrt(Function):
    op_kind = "sqrt"

    def forward(self, a):
        bad = int(np.count_nonzero(~(a >= 0)))
        if bad:
            raise DomainError(f"sqrt: {bad} value(s) are negative")
        return np.sqrt(a)

    def backward(self, grad, inputs, output, needs):
        return (grad / (output * 2.0),)


class Sigmoid(Function):
    op_kind = "sigmoid"

    def forward(self, a):
        return sigmoid_array(a)

    def backward(self, grad, inputs, output, needs):
        return (grad * output * (1.0 - output),)


class Relu(Function):
    op_kind = "relu"

    def forward(self, a):
        return np.maximum(a, 0)

    def backward(self, grad, inputs, output, needs):
        (a,) = inputs
        return (grad * _const(a.data > 0, a),)


class LeakyRelu(Function):
    op_kind = "leaky_relu"

    def forward(self, a):
        return np.where(a > 0, a, a * a.dtype.type(self.params["slope"]))

    def backward(self, grad, inputs, output, needs):
        (a,) = inputs
        return (grad * _const(np.where(a.data > 0, 1.0, self.params["slope"]), a),)


class Sum(Function):
    op_kind = "sum"

    def forward(self, a):
        return np.sum(a, axis=self.params.get("axis"), keepdims=self.params.get("keepdims", False))

    def backward(self, grad, inputs, output, needs):
        return (_expand_reduced(grad, inputs[0].shape, self.params.get("axis"), self.params.get("keepdims", False)),)


class Mean(Function):
    op_kind = "mean"

    def forward(self, a):
        return np.mean(a, axis=self.params.get("axis"), keepdims=self.params.get("keepdims", False))

    def backward(self, grad, inputs, output, needs):
        (a,) = inputs
        count = a.size // max(output.size, 1)
        expanded = _expand_reduced(grad, a.shape, self.params.get("axis"), self.params.get("keepdims", False))
        return (expanded * (1.0 / count),)


class Reshape(Function):
    op_kind = "reshape"

    def forward(self, a):
        return a.reshape(self.params["shape"])

    def backward(self, grad, inputs, output, needs):
        return (Reshape.apply(grad, shape=inputs[0].shape),)


class Transpose(Function):
    op_kind = "transpose"

    def forward(self, a):
        return np.transpose(a, self.params["axes"])

    def backward(self, grad, inputs, output, needs):
        inverse = tuple(int(i) for i in np.argsort(self.params["axes"]))
        return (Transpose.apply(grad, axes=inverse),)


class BroadcastTo(Function):
    op_kind = "broadcast_to"

    def forward(self, a):
        return np.broadcast_to(a, self.params["shape"]).copy()

    def backward(self, grad, inputs, output, needs):
        return (SumTo.apply(grad, shape=inputs[0].shape),)


class SumTo(Function):
    """Sum an array down to a shape it was broadcast from."""
    op_kind = "sum_to"

    def forward(self, a):
        shape = tuple(self.params["shape"])
        lead = a.ndim - len(shape)
        if lead < 0:
            raise ShapeError(f"sum_to: cannot reduce {a.shape} to larger rank {shape}")
        axes = tuple(range(lead)) + tuple(
            lead + i for i, d in enumerate(shape) if d == 1 and a.shape[lead + i] != 1)
        out = np.sum(a, axis=axes, keepdims=True) if axes else a
        return out.reshape(shape)

    def backward(self, grad, inputs, output, needs):
        return (BroadcastTo.apply(grad, shape=inputs[0].shape),)


class MatMul(Function):
    op_kind = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul: operands need at least two dimensions, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
        return np.matmul(a, b)

    def backward(self, grad, inputs, output, needs):
        a, b = inputs
        return (_unbroadcast(MatMul.apply(grad, _swap_last(b)), a.shape) if needs[0] else None,
                _unbroadcast(MatMul.apply(_swap_last(a), grad), b.shape) if needs[1] else None)


class Concat(Function):
    op_kind = "concat"

    def forward(self, *arrays):
        return np.concatenate(arrays, axis=self.params.get("axis", 0))

    def backward(self, grad, inputs, output, needs):
        axis = self.params.get("axis", 0) % output.ndim
        grads = []
        start = 0
        for tensor, need in zip(inputs, needs):
            stop = start + tensor.shape[axis]
            if need:
                index = tuple(slice(None) for _ in range(axis)) + (slice(start, stop),)
                grads.append(Slice.apply(grad, index=index))
            else:
                grads.append(None)
            start = stop
        return grads


class Slice(Function):
    """Basic (slice and integer) indexing."""
    op_kind = "slice"

    def forward(self, a):
        return np.array(a[self.params["index"]])

    def backward(self, grad, inputs, output, needs):
        return (PadInto.apply(grad, shape=inputs[0].shape, index=self.params["index"]),)


class PadInto(Function):
    """Place an array into a zero array at a basic index; adjoint of Slice."""
    op_kind = "pad_into"

    def forward(self, a):
        out = np.zeros(self.params["shape"], dtype=a.dtype)
        out[self.params["index"]] = a
        return out

    def backward(self, grad, inputs, output, needs):
        return (Slice.apply(grad, index=self.params["index"]),)


class Take(Function):
    """Gather from the flattened input at integer positions."""
    op_kind = "take"

    def forward(self, a):
        return a.reshape(-1)[self.params["indices"]]

    def backward(self, grad, inputs, output, needs):
        return (ScatterAdd.apply(grad, indices=self.params["indices"], shape=inputs[0].shape),)


class ScatterAdd(Function):
    """Accumulate values into a zero array of `shape` at flat positions; adjoint of Take."""
    op_kind = "scatter_add"

    def forward(self, a):
        indices = self.params["indices"]
        if a.shape != indices.shape:
            raise ShapeError(f"scatter_add: values {a.shape} do not match indices {indices.shape}")
        shape = tuple(self.params["shape"])
        out = np.zeros(int(np.prod(shape)), dtype=a.dtype)
        np.add.at(out, indices.reshape(-1), a.reshape(-1))
        return out.reshape(shape)

    def backward(self, grad, inputs, output, needs):
        return (Take.apply(grad, indices=self.params["indices"]),)


def conv_output_size(size: int, kernel: int, stride: int, pad_total: int = 0) -> int:
    return (size + pad_total - kernel) // stride + 1


class Im2Col(Function):
    """
    Unfold (N, C, H, W) into columns (N, C*kh*kw, OH*OW).
    Params: kernel (kh, kw), stride, padding ((top, bottom), (left, right)).
    """
    op_kind = "im2col"

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"im2col: expected a 4-d input, got {x.shape}")
        (kh, kw), stride = self.params["kernel"], self.params["stride"]
        (pt, pb), (pl, pr) = self.params["padding"]
        n, c, h, w = x.shape
        oh = conv_output_size(h, kh, stride, pt + pb)
        ow = conv_output_size(w, kw, stride, pl + pr)
        if h + pt + pb < kh or w + pl + pr < kw:
            raise ShapeError(
                f"conv: input {h}x{w} (padded {h + pt + pb}x{w + pl + pr}) is smaller than kernel {kh}x{kw}")
        padded = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = padded[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
        return cols.reshape(n, c * kh * kw, oh * ow)

    def backward(self, grad, inputs, output, needs):
        return (Col2Im.apply(grad, shape=inputs[0].shape, kernel=self.params["kernel"],
                             stride=self.params["stride"], padding=self.params["padding"]),)


class Col2Im(Function):
    """Fold columns back into (N, C, H, W) by summing overlaps; adjoint of Im2Col."""
    op_kind = "col2im"

    def forward(self, cols):
        n, c, h, w = self.params["shape"]
        (kh, kw), stride = self.params["kernel"], self.params["stride"]
        (pt, pb), (pl, pr) = self.params["padding"]
        oh = conv_output_size(h, kh, stride, pt + pb)
        ow = conv_output_size(w, kw, stride, pl + pr)
        if cols.shape != (n, c * kh * kw, oh * ow):
            raise ShapeError(f"col2im: columns {cols.shape} do not fold into {(n, c, h, w)}")
        cols = cols.reshape(n, c, kh, kw, oh, ow)
        padded = np.zeros((n, c, h + pt + pb, w + pl + pr), dtype=cols.dtype)
        for i in range(kh):
            for j in range(kw):
                padded[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
        return padded[:, :, pt:pt + h, pl:pl + w].copy()

    def backward(self, grad, inputs, output, needs):
        return (Im2Col.apply(grad, kernel=self.params["kernel"], stride=self.params["stride"],
                             padding=self.params["padding"]),)


class MaxPool2d(Function):
    """
    Max pooling over (N, C, H, W). Backward routes the gradient to the argmax,
    ties going to the first position in row-major window order.
    """
    op_kind = "maxpool2d"

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"maxpool2d: expected a 4-d input, got {x.shape}")
        k, stride = self.params["kernel"], self.params["stride"]
        n, c, h, w = x.shape
        if h < k or w < k:
            raise ShapeError(f"maxpool2d: input {h}x{w} is smaller than window {k}x{k}")
        windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        oh, ow = windows.shape[2], windows.shape[3]
        arg = windows.reshape(n, c, oh, ow, k * k).argmax(axis=-1)
        rows = np.arange(oh)[:, None] * stride + arg // k
        cols = np.arange(ow)[None, :] * stride + arg % k
        batch = np.arange(n)[:, None, None, None]
        channel = np.arange(c)[None, :, None, None]
        self.indices = ((batch * c + channel) * h + rows) * w + cols
        return x.reshape(-1)[self.indices]

    def backward(self, grad, inputs, output, needs):
        return (ScatterAdd.apply(grad, indices=self.indices, shape=inputs[0].shape),)


class L2Norm(Function):
    """Euclidean norm of each sample over all non-batch axes."""
    op_kind = "l2_norm"

    def forward(self, a):
        flat = a.reshape(a.shape[0], -1)
        return np.sqrt(np.sum(flat * flat, axis=1))

    def backward(self, grad, inputs, output, needs):
        (a,) = inputs
        shape = (a.shape[0],) + (1,) * (a.ndim - 1)
        # zero norms get a zero subgradient
        denominator = Reshape.apply(output, shape=shape) + _const((output.data == 0).reshape(shape), a)
        return (Reshape.apply(grad, shape=shape) * a / denominator,)


class CustomGradHook(Function):
    """
    Pair of array functions standing in for a primitive.
    `forward_fn(*arrays)` computes the output; `backward_fn(upstream, *arrays)`
    maps the upstream gradient to one gradient per input. First order only.
    """
    op_kind = "custom"
    second_order = False

    def forward(self, *arrays):
        return np.asarray(self.params["forward_fn"](*arrays))

    def backward(self, grad, inputs, output, needs):
        if grad.shape != output.shape:
            raise GradientError(f"custom: upstream gradient {grad.shape} does not match output {output.shape}")
        grads = self.params["backward_fn"](grad.data, *(t.data for t in inputs))
        if not isinstance(grads, (tuple, list)):
            grads = (grads,)
        return [_const(g, t) if need else None for g, t, need in zip(grads, inputs, needs)]


# ---------------------------------------------------------------------------
# Composite operations
# ---------------------------------------------------------------------------

def resolve_padding(mode: str, size: int, kernel: int, stride: int, transposed: bool = False) -> Tuple[int, int]:
    """Split the padding a `same` or `valid` mode needs along one axis."""
    if mode == "valid":
        return 0, 0
    if mode != "same":
        raise ValueError(f"unknown padding mode '{mode}'")
    if transposed:
        total = max(kernel - stride, 0)
    else:
        out = -(-size // stride)
        total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


@register_op("conv2d")
def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: str = "valid") -> Tensor:
    """Cross-correlation of (N, C, H, W) with kernels (O, C, kh, kw)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    out_ch, in_ch, kh, kw = weight.shape
    if c != in_ch:
        raise ShapeError(f"conv2d: input has {c} channels, kernel {weight.shape} expects {in_ch}")
    pads = (resolve_padding(padding, h, kh, stride), resolve_padding(padding, w, kw, stride))
    cols = Im2Col.apply(x, kernel=(kh, kw), stride=stride, padding=pads)
    oh = conv_output_size(h, kh, stride, sum(pads[0]))
    ow = conv_output_size(w, kw, stride, sum(pads[1]))
    out = (weight.reshape(out_ch, in_ch * kh * kw) @ cols).reshape(n, out_ch, oh, ow)
    if bias is not None:
        out = out + bias.reshape(1, out_ch, 1, 1)
    return out


@register_op("transconv2d")
def transconv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
                padding: str = "valid") -> Tensor:
    """
    Transposed convolution of (N, Cin, H, W) with kernels (Cin, Cout, kh, kw).
    With the same kernel it is the adjoint of `conv2d`.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"transconv2d: expected 4-d input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    in_ch, out_ch, kh, kw = weight.shape
    if c != in_ch:
        raise ShapeError(f"transconv2d: input has {c} channels, kernel {weight.shape} expects {in_ch}")
    pads = (resolve_padding(padding, h, kh, stride, transposed=True),
            resolve_padding(padding, w, kw, stride, transposed=True))
    oh = (h - 1) * stride + kh - sum(pads[0])
    ow = (w - 1) * stride + kw - sum(pads[1])
    columns = _swap_last(weight.reshape(in_ch, out_ch * kh * kw)) @ x.reshape(n, in_ch, h * w)
    out = Col2Im.apply(columns, shape=(n, out_ch, oh, ow), kernel=(kh, kw), stride=stride, padding=pads)
    if bias is not None:
        out = out + bias.reshape(1, out_ch, 1, 1)
    return out


def maxpool2d(x: Tensor, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    return MaxPool2d.apply(x, kernel=kernel, stride=stride or kernel)


def l2_norm(x: Tensor) -> Tensor:
    return L2Norm.apply(x)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def affine(x: Tensor, scale: float, shift: float = 0.0) -> Tensor:
    return Affine.apply(x, scale=scale, shift=shift)


# ---------------------------------------------------------------------------
# Backward passes
# ---------------------------------------------------------------------------

def _propagate(tape: Tape, output: Tensor, targets: Optional[Sequence[Tensor]],
               create_graph: bool) -> Tuple[Dict[int, Tensor], Dict[int, Tensor]]:
    node = output.node
    if node is None or node.tape is not tape:
        raise GradientError("output was not recorded on this tape")
    nodes = tape.nodes[:node.index + 1]

    relevant = None
    if targets is not None:
        relevant = {id(t) for t in targets}
        for n in nodes:
            if any(id(t) in relevant for t in n.inputs):
                relevant.add(id(n.output))

    grads: Dict[int, Tensor] = {id(output): Tensor(np.ones_like(output.data))}
    seen: Dict[int, Tensor] = {}
    for n in reversed(nodes):
        upstream = grads.pop(id(n.output), None)
        if upstream is None:
            continue
        needs = tuple(t.requires_grad and (relevant is None or id(t) in relevant) for t in n.inputs)
        if not any(needs):
            continue
        kind = n.function.op_kind or type(n.function).__name__
        if create_graph and not n.function.second_order:
            logger.error(f"op '{kind}' (node {n.index}) has no second-order backward")
            raise GradientError(f"op '{kind}' (node {n.index}) has no second-order backward")
        with nullcontext() if create_graph else _silenced(tape):
            input_grads = n.function.backward(upstream, n.inputs, n.output, needs)
            for tensor, g, need in zip(n.inputs, input_grads, needs):
                if not need or g is None:
                    continue
                if g.shape != tensor.shape:
                    raise GradientError(
                        f"op '{kind}' (node {n.index}) produced a {g.shape} gradient for a {tensor.shape} input")
                if not np.all(np.isfinite(g.data)):
                    logger.error(f"non-finite gradient from op '{kind}' (node {n.index})")
                    raise GradientError(f"non-finite gradient from op '{kind}' (node {n.index})")
                key = id(tensor)
                grads[key] = grads[key] + g if key in grads else g
                seen[key] = tensor
    return grads, seen


def backward(tape: Tape, loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """
    Accumulate d(loss)/d(leaf) into `.grad` of every leaf flagged requires_grad.

    Args:
        tape : Tape the loss was recorded on.
        loss : Scalar tensor.

    Returns:
        Map from each leaf tensor to its accumulated gradient.
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        return {}
    grads, seen = _propagate(tape, loss, None, create_graph=False)
    result: Dict[Tensor, np.ndarray] = {}
    for key, tensor in seen.items():
        if tensor.node is not None or key not in grads:
            continue
        g = grads[key].data
        tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g
        result[tensor] = tensor.grad
    return result


def gradients(tape: Tape, output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> List[Tensor]:
    """
    d(output)/d(t) for each t in `wrt`, without touching `.grad`.
    With `create_graph` the returned tensors are recorded on the tape.
    """
    if output.size != 1:
        raise GradientError(f"gradients needs a scalar output, got shape {output.shape}")
    if create_graph and current_tape() is not tape:
        raise GradientError("differentiable gradients need their tape active and recording")
    if output.node is None:
        return [Tensor(np.zeros_like(t.data)) for t in wrt]
    grads, _ = _propagate(tape, output, wrt, create_graph)
    return [grads.get(id(t), Tensor(np.zeros_like(t.data))) for t in wrt]


def grad_of_grad(tape: Tape, scalar: Tensor, wrt: Tensor) -> Tensor:
    """
    Differentiable gradient of `scalar` with respect to `wrt`.
    The result lives on the tape, so a loss built from it backpropagates into
    every parameter the gradient depends on.
    """
    (grad,) = gradients(tape, scalar, [wrt], create_graph=True)
    return grad


def gradient_check(fn: Callable[..., Tensor], *arrays: np.ndarray, h: float = 1e-5, atol: float = 1e-8) -> float:
    """
    Largest relative error between taped and central-difference gradients.

    `fn` maps tensors to a scalar tensor. Inputs are promoted to float64.
    The error per input is ||analytic - numeric|| / (||analytic|| + ||numeric||).
    Inputs whose gradients differ by at most `atol` in norm count as exact, so an
    identically zero gradient is not judged against finite-difference noise.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    inputs = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = fn(*inputs)
        backward(tape, loss)

    worst = 0.0
    for tensor, array in zip(inputs, arrays):
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(array)
        numeric = np.zeros_like(array)
        flat = array.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = float(np.sum(fn(*[Tensor(a) for a in arrays]).data))
            flat[i] = original - h
            minus = float(np.sum(fn(*[Tensor(a) for a in arrays]).data))
            flat[i] = original
            numeric.reshape(-1)[i] = (plus - minus) / (2 * h)
        difference = np.linalg.norm(analytic - numeric)
        if difference > atol:
            scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
            worst = max(worst, float(difference / scale))
    return worst
