"""Reverse-mode automatic differentiation over dense float tensors.

Operations run eagerly on numpy arrays. While a :class:`Tape` is active and at
least one input requires a gradient, each operation appends a node (inputs,
output, local backward closure) to the tape. :func:`backward` walks the nodes
in exact reverse insertion order, which is a valid reverse topological order
because a node's inputs always exist before the node is recorded.

Arrays keep the dtype they were created with; everything the library builds is
float32, gradient checks use float64.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .config import LEAKY_SLOPE, STABILITY_EPS
from .errors import ShapeError, TapeError
from .logging_config import logger

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[Any]]
Grads = Tuple[Optional[np.ndarray], ...]
BackwardFn = Callable[[np.ndarray], Grads]
Padding = str

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "bpvae_active_tape", default=None
)


class Tensor:
    """An n-dimensional float array that can take part in a gradient tape."""

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = np.float32):
        self.data: np.ndarray = np.array(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out._tape = None
        return out

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> None:
        backward(self)

    # Operator sugar
    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return slice_tensor(self, index)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: Any) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)


@dataclass
class Node:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; operations executed inside the block are
    recorded. A tape belongs to one thread of execution.
    """

    def __init__(self) -> None:
        self.nodes: List[Node] = []
        self._tokens: List[contextvars.Token] = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, *exc: Any) -> None:
        _active_tape.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, fn: BackwardFn) -> None:
        output._tape = self
        self.nodes.append(Node(op, inputs, output, fn))

    def backward(self, loss: Tensor) -> None:
        adjoints: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            upstream = adjoints.pop(id(node.output), None)
            if upstream is None:
                continue
            for inp, g in zip(node.inputs, node.backward(upstream)):
                if g is None or not inp.requires_grad:
                    continue
                if inp._tape is self:
                    key = id(inp)
                    adjoints[key] = g if key not in adjoints else adjoints[key] + g
                else:
                    inp.grad = np.array(g, dtype=inp.dtype) if inp.grad is None else inp.grad + g
        logger.debug("Backward pass complete", extra={"tape_nodes": len(self.nodes)})


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf tensor that requires it.

    Gradients accumulate across calls; reset them with :func:`zero_grads`.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or not tape.nodes:
        raise TapeError("backward: loss was not recorded on an active tape")
    tape.backward(loss)


def zero_grads(params: Union[Dict[str, Tensor], Iterable[Tensor]]) -> None:
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.grad = None


def as_tensor(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else np.float32
    return Tensor(value, dtype=dtype)


def _emit(op: str, inputs: Tuple[Tensor, ...], data: np.ndarray, fn: BackwardFn) -> Tensor:
    tape = _active_tape.get()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, requires_grad=needs_grad)
    if needs_grad:
        assert tape is not None
        tape.record(op, inputs, out, fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary_operands(op: str, a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    ta, tb = as_tensor(a, like), as_tensor(b, like)
    try:
        np.broadcast_shapes(ta.shape, tb.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {ta.shape} and {tb.shape}") from None
    return ta, tb


# Elementwise arithmetic


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _binary_operands("add", a, b)

    def fn(g: np.ndarray) -> Grads:
        return _unbroadcast(g, ta.shape), _unbroadcast(g, tb.shape)

    return _emit("add", (ta, tb), ta.data + tb.data, fn)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _binary_operands("sub", a, b)

    def fn(g: np.ndarray) -> Grads:
        return _unbroadcast(g, ta.shape), _unbroadcast(-g, tb.shape)

    return _emit("sub", (ta, tb), ta.data - tb.data, fn)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    ta, tb = _binary_operands("mul", a, b)

    def fn(g: np.ndarray) -> Grads:
        return _unbroadcast(g * tb.data, ta.shape), _unbroadcast(g * ta.data, tb.shape)

    return _emit("mul", (ta, tb), ta.data * tb.data, fn)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    like = a if isinstance(a, Tensor) else None
    ta, tb = as_tensor(a, like), as_tensor(b, like)
    if ta.ndim != 2 or tb.ndim != 2 or ta.shape[1] != tb.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {ta.shape} and {tb.shape}")

    def fn(g: np.ndarray) -> Grads:
        return g @ tb.data.T, ta.data.T @ g

    return _emit("matmul", (ta, tb), ta.data @ tb.data, fn)


# Activations and elementwise functions


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    positive = x.data > 0
    out = np.where(positive, x.data, x.data * slope).astype(x.dtype, copy=False)

    def fn(g: np.ndarray) -> Grads:
        return (np.where(positive, g, g * slope),)

    return _emit("leaky_relu", (x,), out, fn)


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)

    def fn(g: np.ndarray) -> Grads:
        return (g * out * (1 - out),)

    return _emit("sigmoid", (x,), out, fn)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def fn(g: np.ndarray) -> Grads:
        return (g * out,)

    return _emit("exp", (x,), out, fn)


def log(x: Tensor) -> Tensor:
    """Natural log with the argument clamped to at least ``STABILITY_EPS``.

    The gradient is zero wherever the clamp is active.
    """
    safe = np.maximum(x.data, x.dtype.type(STABILITY_EPS))
    out = np.log(safe)

    def fn(g: np.ndarray) -> Grads:
        return (np.where(x.data > STABILITY_EPS, g / safe, 0).astype(g.dtype, copy=False),)

    return _emit("log", (x,), out, fn)


def clamp(x: Tensor, low: float, high: float) -> Tensor:
    if low > high:
        raise ValueError(f"clamp: low {low} exceeds high {high}")
    inside = (x.data >= low) & (x.data <= high)
    out = np.clip(x.data, low, high).astype(x.dtype, copy=False)

    def fn(g: np.ndarray) -> Grads:
        return (np.where(inside, g, 0).astype(g.dtype, copy=False),)

    return _emit("clamp", (x,), out, fn)


# Reductions and shape manipulation


def _normalize_axes(axis: Optional[Union[int, Tuple[int, ...]]], ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def sum_(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    out = np.asarray(x.data.sum(axis=axes, keepdims=keepdims))

    def fn(g: np.ndarray) -> Grads:
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return _emit("sum", (x,), out, fn)


def mean(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = np.asarray(x.data.mean(axis=axes, keepdims=keepdims))

    def fn(g: np.ndarray) -> Grads:
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape),)

    return _emit("mean", (x,), out, fn)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None

    def fn(g: np.ndarray) -> Grads:
        return (g.reshape(x.shape),)

    return _emit("reshape", (x,), out, fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {ref.shape} and {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def fn(g: np.ndarray) -> Grads:
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tuple(tensors), out, fn)


def slice_tensor(x: Tensor, index: Any) -> Tensor:
    """Basic (slice/integer) indexing."""
    out = np.array(x.data[index])

    def fn(g: np.ndarray) -> Grads:
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _emit("slice", (x,), out, fn)


# Convolutions


def _conv_geometry(size: int, kernel: int, stride: int, padding: Padding) -> Tuple[int, int, int]:
    """Return (output size, pad before, pad after) for one spatial axis."""
    if padding == "valid":
        if size < kernel:
            raise ShapeError(f"conv2d: input size {size} smaller than kernel {kernel}")
        return (size - kernel) // stride + 1, 0, 0
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def _check_conv_args(op: str, stride: int, padding: Padding) -> None:
    if stride not in (1, 2):
        raise ValueError(f"{op}: stride must be 1 or 2, got {stride}")
    if padding not in ("same", "valid"):
        raise ValueError(f"{op}: padding must be 'same' or 'valid', got {padding!r}")


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]


def _pad(x: np.ndarray, pads: Tuple[int, int, int, int]) -> np.ndarray:
    top, bottom, left, right = pads
    if not any(pads):
        return x
    return np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pads: Tuple[int, int, int, int], oh: int, ow: int) -> np.ndarray:
    cols = _windows(_pad(x, pads), w.shape[2], w.shape[3], stride, oh, ow)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_input_grad(dy: np.ndarray, w: np.ndarray, x_shape: Tuple[int, ...], stride: int, pads: Tuple[int, int, int, int]) -> np.ndarray:
    n, c, h, wd = x_shape
    top, bottom, left, right = pads
    kh, kw = w.shape[2], w.shape[3]
    oh, ow = dy.shape[2], dy.shape[3]
    dcols = np.tensordot(dy, w, axes=([1], [0]))  # (n, oh, ow, c, kh, kw)
    dxp = np.zeros((n, c, h + top + bottom, wd + left + right), dtype=np.result_type(dy, w))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + (oh - 1) * stride + 1 : stride, j : j + (ow - 1) * stride + 1 : stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return np.ascontiguousarray(dxp[:, :, top : top + h, left : left + wd])


def _conv_weight_grad(x: np.ndarray, dy: np.ndarray, w_shape: Tuple[int, ...], stride: int, pads: Tuple[int, int, int, int]) -> np.ndarray:
    oh, ow = dy.shape[2], dy.shape[3]
    cols = _windows(_pad(x, pads), w_shape[2], w_shape[3], stride, oh, ow)
    return np.tensordot(dy, cols, axes=([0, 2, 3], [0, 2, 3]))


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: Padding = "valid") -> Tensor:
    """2-D cross-correlation of (N, C, H, W) input with (F, C, kh, kw) weights."""
    _check_conv_args("conv2d", stride, padding)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {weight.shape}")
    kh, kw = weight.shape[2], weight.shape[3]
    oh, top, bottom = _conv_geometry(x.shape[2], kh, stride, padding)
    ow, left, right = _conv_geometry(x.shape[3], kw, stride, padding)
    pads = (top, bottom, left, right)
    out = _conv_forward(x.data, weight.data, stride, pads, oh, ow)

    def fn(g: np.ndarray) -> Grads:
        return (
            _conv_input_grad(g, weight.data, x.shape, stride, pads),
            _conv_weight_grad(x.data, g, weight.shape, stride, pads),
        )

    return _emit("conv2d", (x, weight), out, fn)


def conv_transpose2d(
    x: Tensor,
    weight: Tensor,
    stride: int = 1,
    padding: Padding = "valid",
    output_size: Optional[Tuple[int, int]] = None,
) -> Tensor:
    """Adjoint of :func:`conv2d`: maps (N, F, h, w) to (N, C, H, W) with (F, C, kh, kw) weights.

    ``output_size`` defaults to the smallest (H, W) whose conv2d geometry
    yields (h, w).
    """
    _check_conv_args("conv_transpose2d", stride, padding)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"conv_transpose2d: incompatible shapes {x.shape} and {weight.shape}")
    n, _, h, w = x.shape
    kh, kw = weight.shape[2], weight.shape[3]
    if output_size is None:
        if padding == "same":
            output_size = (h * stride, w * stride)
        else:
            output_size = ((h - 1) * stride + kh, (w - 1) * stride + kw)
    out_h, out_w = output_size
    oh, top, bottom = _conv_geometry(out_h, kh, stride, padding)
    ow, left, right = _conv_geometry(out_w, kw, stride, padding)
    if (oh, ow) != (h, w):
        raise ShapeError(
            f"conv_transpose2d: output size {output_size} does not map back to input {(h, w)}"
        )
    pads = (top, bottom, left, right)
    out_shape = (n, weight.shape[1], out_h, out_w)
    out = _conv_input_grad(x.data, weight.data, out_shape, stride, pads)

    def fn(g: np.ndarray) -> Grads:
        return (
            _conv_forward(g, weight.data, stride, pads, h, w),
            _conv_weight_grad(g, x.data, weight.shape, stride, pads),
        )

    return _emit("conv_transpose2d", (x, weight), out, fn)


_OPS: Dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "conv_transpose2d": conv_transpose2d,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "clamp": clamp,
    "sum": sum_,
    "mean": mean,
    "reshape": reshape,
    "concat": lambda *tensors, axis=0: concat(tensors, axis=axis),
    "slice": slice_tensor,
}


def forward_op(op_kind: str, *inputs: Any, **params: Any) -> Tensor:
    """Dispatch an operation by name, e.g. ``forward_op("leaky_relu", x, slope=0.1)``."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise ValueError(f"Unknown op kind: {op_kind!r}") from None
    return fn(*inputs, **params)
