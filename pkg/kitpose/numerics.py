"""
Numerics - dense tensors with reverse-mode gradients.

A Tensor wraps a numpy array. Differentiable operations are Function
subclasses; applying one records the function as the creator of its output so
`backward()` can replay the graph in reverse topological order.

Precision is a global mode ("float64" for gradient checks, "float32" for
training throughput). Tensors of different precision never meet in one op.
"""

import logging
import math
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

from kitpose.errors import NumericalError, ShapeError

logger = logging.getLogger(__name__)

PRECISIONS = {"float64": np.float64, "float32": np.float32}

_state = {"dtype": np.float64, "grad_enabled": True}

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]


def set_precision(name: str) -> None:
    """
    Switch the global precision mode.

    Args:
        name: "float64" or "float32"
    """
    if name not in PRECISIONS:
        raise NumericalError(f"Unknown precision '{name}', expected one of {sorted(PRECISIONS)}")
    _state["dtype"] = PRECISIONS[name]


def get_precision() -> str:
    return "float64" if _state["dtype"] is np.float64 else "float32"


def get_dtype():
    return _state["dtype"]


@contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily run under another precision mode."""
    previous = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


@contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them for backward."""
    previous = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = previous


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"Non-finite values produced by {where}")


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """
    Sum a broadcast gradient back down to `shape`.

    Leading extra axes are summed first, then every axis where `shape` has
    extent 1.
    """
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """
    Dense n-dimensional array with optional gradient tracking.

    `grad` is present iff `requires_grad` and always has the shape of `data`.
    """

    # ndarray op Tensor defers to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False, _creator: Optional["Function"] = None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = get_dtype()
        if isinstance(data, np.ndarray) and data.dtype == dtype:
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.creator = _creator
        self.grad = np.zeros_like(arr) if self.requires_grad else None

    # ----- introspection -----
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not scalar")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # ----- gradient helpers -----
    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def assign(self, value: np.ndarray) -> None:
        """Replace the stored values (optimizer steps, checkpoint loads)."""
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ShapeError(f"assign: shape {value.shape} != {self.data.shape}")
        _check_finite(value, "assign")
        self.data = value

    def backward(self) -> None:
        backward(self)

    # ----- operators -----
    def __add__(self, other):
        return Add.apply(self, other)

    def __radd__(self, other):
        return Add.apply(other, self)

    def __sub__(self, other):
        return Sub.apply(self, other)

    def __rsub__(self, other):
        return Sub.apply(other, self)

    def __mul__(self, other):
        return Mul.apply(self, other)

    def __rmul__(self, other):
        return Mul.apply(other, self)

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(other, self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent):
        return Pow.apply(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes or None)

    @property
    def T(self) -> "Tensor":
        return self.transpose()


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def parameter(data: ArrayLike) -> Tensor:
    """A leaf tensor that collects gradients."""
    return Tensor(np.array(data, dtype=get_dtype()), requires_grad=True)


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement `forward` on numpy arrays and `backward`, which maps
    the gradient of the output to one gradient per input (None for inputs
    that take no gradient).
    """

    name = "function"

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__}.forward")

    def backward(self, grad: np.ndarray) -> tuple:
        raise NotImplementedError(f"{type(self).__name__}.backward")

    @classmethod
    def apply(cls, *inputs: ArrayLike, **kwargs) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        dtype = get_dtype()
        for t in tensors:
            if t.data.dtype != dtype:
                raise NumericalError(
                    f"{cls.name}: mixed precision ({t.data.dtype} in a {np.dtype(dtype).name} graph)"
                )
        fn = cls(*tensors)
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        _check_finite(out, cls.name)
        track = _state["grad_enabled"] and any(t.requires_grad for t in tensors)
        return Tensor(out, requires_grad=track, _creator=fn if track else None)


def _broadcast_shape(a: np.ndarray, b: np.ndarray, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


class Add(Function):
    name = "add"

    def forward(self, a, b):
        _broadcast_shape(a, b, self.name)
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        _broadcast_shape(a, b, self.name)
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _broadcast_shape(a, b, self.name)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Div(Function):
    name = "div"

    def forward(self, a, b):
        _broadcast_shape(a, b, self.name)
        if np.any(b == 0):
            raise NumericalError("div: division by zero")
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        return grad / self.b, -grad * self.a / (self.b * self.b)


class Neg(Function):
    name = "neg"

    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Abs(Function):
    name = "abs"

    def forward(self, a):
        self.sign = np.sign(a)
        return np.abs(a)

    def backward(self, grad):
        return (grad * self.sign,)


class Pow(Function):
    """a ** p for a scalar or tensor exponent p."""

    name = "pow"

    def forward(self, a, p):
        _broadcast_shape(a, p, self.name)
        if np.any((a < 0) & (p != np.round(p))):
            raise NumericalError("pow: negative base with non-integer exponent")
        self.a, self.p = a, p
        self.out = np.power(a, p)
        return self.out

    def backward(self, grad):
        a, p = self.a, self.p
        # 0 ** 0 := 1, so the derivative in the base vanishes when p == 0
        safe_p = np.where(p == 0, 1.0, p)
        with np.errstate(divide="ignore", invalid="ignore"):
            ga = np.where(p == 0, 0.0, grad * safe_p * np.power(a, safe_p - 1))
            gp = None
            if self.inputs[1].requires_grad:
                gp = grad * self.out * np.log(np.where(a > 0, a, 1.0))
        return ga, gp


class Relu(Function):
    name = "relu"

    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0.0).astype(a.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


_GELU_C = math.sqrt(2.0 / math.pi)


class Gelu(Function):
    """GeLU, tanh approximation."""

    name = "gelu"

    def forward(self, a):
        inner = _GELU_C * (a + 0.044715 * a ** 3)
        self.a, self.t = a, np.tanh(inner)
        return 0.5 * a * (1.0 + self.t)

    def backward(self, grad):
        a, t = self.a, self.t
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * a * a)
        return (grad * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * d_inner),)


class Exp(Function):
    name = "exp"

    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    name = "log"

    def forward(self, a):
        if np.any(a <= 0):
            raise NumericalError("log: non-positive input")
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class MatMul(Function):
    """a[..., m, k] @ b[..., k, n]; b may be a shared 2-D matrix."""

    name = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(f"matmul: need matrices, got {a.shape} and {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner dimensions {a.shape} x {b.shape} disagree")
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        ga = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        gb = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return unbroadcast(ga, self.a.shape), unbroadcast(gb, self.b.shape)


class SoftmaxRows(Function):
    """Softmax over the last axis, stabilised by row-max subtraction."""

    name = "softmax_rows"

    def forward(self, a):
        shifted = a - a.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - (grad * y).sum(axis=-1, keepdims=True)),)


class Conv2d(Function):
    """
    2-D cross-correlation (no kernel flip).

    input [C, H, W] or [B, C, H, W], kernel [O, C, k, k].
    """

    name = "conv2d"

    def forward(self, x, kernel, stride: int = 1, pad: int = 0):
        batched = x.ndim == 4
        if not batched:
            x = x[None]
        if x.ndim != 4 or kernel.ndim != 4:
            raise ShapeError(f"conv2d: bad ranks input {x.shape} kernel {kernel.shape}")
        b, c, h, w = x.shape
        o, c_k, kh, kw = kernel.shape
        if c != c_k:
            raise ShapeError(f"conv2d: input has {c} channels, kernel expects {c_k}")
        if kh != kw or kh % 2 == 0:
            raise ShapeError(f"conv2d: kernel must be square and odd, got {kh}x{kw}")
        if pad < 0 or stride < 1:
            raise ShapeError(f"conv2d: invalid pad={pad} stride={stride}")
        span_h, span_w = h + 2 * pad - kh, w + 2 * pad - kw
        if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
            raise ShapeError(
                f"conv2d: non-integral output extent for {h}x{w}, k={kh}, stride={stride}, pad={pad}"
            )
        ho, wo = span_h // stride + 1, span_w // stride + 1
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        windows = windows[:, :, ::stride, ::stride]
        out = np.tensordot(windows, kernel, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

        self.batched, self.windows, self.kernel = batched, windows, kernel
        self.stride, self.pad, self.x_shape = stride, pad, (b, c, h, w)
        self.out_hw = (ho, wo)
        out = np.ascontiguousarray(out)
        return out if batched else out[0]

    def backward(self, grad):
        g = grad if self.batched else grad[None]
        s, p = self.stride, self.pad
        b, c, h, w = self.x_shape
        ho, wo = self.out_hw
        k = self.kernel.shape[-1]

        gk = np.tensordot(g, self.windows, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(g, self.kernel, axes=([1], [0]))  # [B, Ho, Wo, C, k, k]
        gxp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += cols[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p + h, p:p + w] if p else gxp
        return (gx if self.batched else gx[0]), gk


class AvgPool2d(Function):
    """Non-overlapping size x size average pooling over the last two axes."""

    name = "avg_pool2d"

    def forward(self, x, size: int = 2):
        h, w = x.shape[-2:]
        if h % size or w % size:
            raise ShapeError(f"avg_pool2d: {h}x{w} not divisible by {size}")
        self.size, self.in_shape = size, x.shape
        lead = x.shape[:-2]
        r = x.reshape(*lead, h // size, size, w // size, size)
        return r.mean(axis=(-3, -1))

    def backward(self, grad):
        s = self.size
        g = np.repeat(np.repeat(grad, s, axis=-2), s, axis=-1) / (s * s)
        return (g.reshape(self.in_shape),)


class Sum(Function):
    name = "sum"

    def forward(self, a, axis=None, keepdims: bool = False):
        self.in_shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            axes = self.axis if isinstance(self.axis, tuple) else (self.axis,)
            axes = sorted(ax % len(self.in_shape) for ax in axes)
            for ax in axes:
                grad = np.expand_dims(grad, ax)
        return (np.broadcast_to(grad, self.in_shape).copy(),)


class Reshape(Function):
    name = "reshape"

    def forward(self, a, shape=()):
        self.in_shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Transpose(Function):
    name = "transpose"

    def forward(self, a, axes=None):
        self.axes = axes if axes is not None else tuple(reversed(range(a.ndim)))
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class GetItem(Function):
    name = "getitem"

    def forward(self, a, index=None):
        self.in_shape, self.index = a.shape, index
        return np.array(a[index])

    def backward(self, grad):
        g = np.zeros(self.in_shape, dtype=grad.dtype)
        np.add.at(g, self.index, grad)
        return (g,)


class Concat(Function):
    name = "concat"

    def forward(self, *arrays, axis: int = 0):
        self.axis = axis
        self.sizes = [arr.shape[axis] for arr in arrays]
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError as e:
            raise ShapeError(f"concat: {e}") from None

    def backward(self, grad):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


# ----- functional API -----

ELEMENTWISE_KINDS = ("add", "sub", "mul", "abs", "pow", "relu", "gelu", "exp", "log", "stop_gradient")


def stop_gradient(a: ArrayLike) -> Tensor:
    """Forward `a` bit-exactly as a constant."""
    return Tensor(as_tensor(a).data, requires_grad=False)


def elementwise(op_kind: str, a: ArrayLike, b: Optional[ArrayLike] = None) -> Tensor:
    """
    Dispatch one of the elementwise ops by name.

    Args:
        op_kind: one of ELEMENTWISE_KINDS
        a: first operand
        b: second operand for add/sub/mul/pow

    Returns:
        Tensor: result with the broadcast shape
    """
    binary = {"add": Add, "sub": Sub, "mul": Mul, "pow": Pow}
    unary = {"abs": Abs, "relu": Relu, "gelu": Gelu, "exp": Exp, "log": Log}
    if op_kind in binary:
        if b is None:
            raise ShapeError(f"{op_kind} needs two operands")
        return binary[op_kind].apply(a, b)
    if op_kind in unary:
        return unary[op_kind].apply(a)
    if op_kind == "stop_gradient":
        return stop_gradient(a)
    raise ValueError(f"Unknown elementwise op '{op_kind}'")


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def div(a, b) -> Tensor:
    return Div.apply(a, b)


def absolute(a) -> Tensor:
    return Abs.apply(a)


def power(a, p) -> Tensor:
    return Pow.apply(a, p)


def relu(a) -> Tensor:
    return Relu.apply(a)


def gelu(a) -> Tensor:
    return Gelu.apply(a)


def exp(a) -> Tensor:
    return Exp.apply(a)


def log(a) -> Tensor:
    return Log.apply(a)


def sqrt(a) -> Tensor:
    return Pow.apply(a, 0.5)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return MatMul.apply(a, b)


def softmax_rows(a: ArrayLike) -> Tensor:
    return SoftmaxRows.apply(a)


def conv2d(x: ArrayLike, kernel: ArrayLike, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x with kernel; see Conv2d."""
    return Conv2d.apply(x, kernel, stride=stride, pad=pad)


def avg_pool2d(x: ArrayLike, size: int = 2) -> Tensor:
    return AvgPool2d.apply(x, size=size)


def tsum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return Sum.apply(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def swap_last(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return Transpose.apply(a, axes=tuple(axes))


# ----- backward pass -----

class ComputationTape:
    """
    Ordered record of the executed ops reachable from a loss.

    `nodes` is a topological order (inputs before outputs); replaying it in
    reverse visits each op once.
    """

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss: Tensor) -> "ComputationTape":
        order, visited = [], set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node.creator is not None:
                for parent in reversed(node.creator.inputs):
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def replay_backward(self, seed_grad: np.ndarray) -> None:
        for node in self.nodes:
            if node.creator is not None:
                node.grad = np.zeros_like(node.data)
        self.nodes[-1].grad = seed_grad
        for node in reversed(self.nodes):
            fn = node.creator
            if fn is None:
                continue
            grads = fn.backward(node.grad)
            for inp, g in zip(fn.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                inp.grad = inp.grad + unbroadcast(np.asarray(g, dtype=inp.data.dtype), inp.shape)


def backward(loss: Tensor) -> ComputationTape:
    """
    Populate `.grad` of every requires_grad tensor reachable from `loss`.

    Gradients accumulate into leaves; call `zero_grad` between steps.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ShapeError("backward: loss is not on the tape")
    tape = ComputationTape.from_loss(loss)
    tape.replay_backward(np.ones_like(loss.data))
    return tape


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.zero_grad()


# ----- finite differences -----

def _scalar(value) -> float:
    if isinstance(value, Tensor):
        value = value.data
    arr = np.asarray(value)
    if arr.size != 1:
        raise ShapeError(f"finite differences need a scalar function, got shape {arr.shape}")
    return float(arr.reshape(-1)[0])


def finite_diff_gradient(
    f: Callable[[], Union[Tensor, float]],
    params: Sequence[Tensor],
    eps: Optional[float] = None,
    indices: Optional[Sequence[Optional[Sequence[int]]]] = None,
) -> list:
    """
    Central-difference gradient of a scalar function of `params`.

    Args:
        f: zero-argument callable reading the current parameter values
        params: tensors perturbed in place (restored afterwards)
        eps: step, default 1e-5 at float64 and 1e-2 at float32
        indices: optional per-parameter flat indices to probe; the other
            entries of the result are NaN

    Returns:
        list[np.ndarray]: one gradient array per parameter
    """
    if eps is None:
        eps = 1e-5 if get_dtype() is np.float64 else 1e-2
    if eps <= 0:
        raise NumericalError("finite differences need eps > 0")

    with no_grad():
        first, second = _scalar(f()), _scalar(f())
        if first != second:
            raise NumericalError(f"function is not deterministic ({first!r} != {second!r})")

        grads = []
        for n, p in enumerate(params):
            probe = range(p.size) if indices is None or indices[n] is None else indices[n]
            g = np.full(p.shape, np.nan, dtype=np.float64)
            flat = p.data.reshape(-1)
            if not np.shares_memory(flat, p.data):
                raise NumericalError("finite differences need contiguous parameters")
            for i in probe:
                orig = flat[i]
                flat[i] = orig + eps
                plus = _scalar(f())
                flat[i] = orig - eps
                minus = _scalar(f())
                flat[i] = orig
                g.reshape(-1)[i] = (plus - minus) / (2.0 * eps)
            grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """||a - n|| / max(||a||, ||n||, floor) over the probed (finite) entries."""
    mask = np.isfinite(numeric)
    if not np.any(mask):
        return 0.0
    a = np.asarray(analytic, dtype=np.float64)[mask]
    n = np.asarray(numeric, dtype=np.float64)[mask]
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)
