"""Dense float64 tensors with a reverse-mode gradient tape.

Every operation validates shapes eagerly, checks its result for NaN/Inf,
and registers a backward rule on the active tape when any input needs
gradients. There is no implicit broadcasting: operands must have equal
shapes, except that a Python number (or a one-element tensor) may stand
on either side of add/sub/mul.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

Number = Union[int, float]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class NonFiniteError(ArithmeticError):
    """A tensor value became NaN or infinite."""


def _check_finite(arr: np.ndarray, context: str) -> np.ndarray:
    # Non-finite entries always poison the sum; the cheap single-pass check
    # is confirmed by a full scan so huge-but-finite data cannot false-alarm.
    if not math.isfinite(float(arr.sum())) and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {context}")
    return arr


class Tensor:
    """A dense float64 array tracked by the gradient tape.

    ``grad`` accumulates additively across backward passes until
    ``zero_grad`` (or the optimizer) resets it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor constructor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[int] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; numbers are allowed as the scalar side.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("tensor division is only defined by a Python number")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Tape:
    """Ordered record of executed operations.

    Node ``i`` may only consume tensors produced by nodes ``< i`` (or
    leaves), so the record is topologically sorted by construction and a
    single reverse sweep propagates gradients.
    """

    def __init__(self):
        self._nodes: list = []

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, inputs: Sequence[Tensor],
               backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> None:
        out._node = len(self._nodes)
        out.requires_grad = True
        self._nodes.append((out, tuple(inputs), backward))

    def clear(self) -> None:
        for out, _, _ in self._nodes:
            out._node = None
        self._nodes.clear()


_tape = Tape()
_grad_enabled = True


def get_tape() -> Tape:
    return _tape


def clear_tape() -> None:
    _tape.clear()


@contextmanager
def no_grad():
    """Suspend tape recording (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _register(out: Tensor, inputs: Sequence[Tensor], backward) -> Tensor:
    if _grad_enabled and any(t.requires_grad for t in inputs):
        _tape.record(out, inputs, backward)
    return out


def _result(arr: np.ndarray, context: str) -> Tensor:
    arr = np.asarray(arr, dtype=np.float64)
    _check_finite(arr, context)
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = False
    t.grad = None
    t._node = None
    return t


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

    Repeated calls without zeroing add up. The sweep visits tape nodes
    exactly once, in reverse execution order.
    """
    tape = tape if tape is not None else _tape
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        if loss.requires_grad:
            _accumulate_leaf(loss, seed)
        return
    pending: dict[int, np.ndarray] = {loss._node: seed}
    for idx in range(loss._node, -1, -1):
        gout = pending.pop(idx, None)
        if gout is None:
            continue
        _, inputs, bwd = tape._nodes[idx]
        grads = bwd(gout)
        for inp, g in zip(inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            if g.shape != inp.data.shape:
                raise ShapeError(
                    f"backward rule produced gradient of shape {g.shape} "
                    f"for input of shape {inp.data.shape}")
            if inp._node is not None:
                if inp._node in pending:
                    pending[inp._node] += g
                else:
                    pending[inp._node] = np.array(g, dtype=np.float64)
            else:
                _accumulate_leaf(inp, g)


def _accumulate_leaf(leaf: Tensor, g: np.ndarray) -> None:
    if leaf.grad is None:
        leaf.grad = np.array(g, dtype=np.float64)
    else:
        leaf.grad += g


# ---------------------------------------------------------------------------
# elementwise binary kernels

def _scalar_of(x) -> Optional[float]:
    """Return the value if x may act as a scalar operand, else None."""
    if isinstance(x, (int, float)):
        v = float(x)
        if not math.isfinite(v):
            raise NonFiniteError("non-finite scalar operand")
        return v
    if isinstance(x, Tensor) and x.size == 1:
        return None  # handled as a one-element tensor, keeps its gradient
    return None


def _binary(a, b, name, fwd, bwd_tt, bwd_ts, bwd_st):
    """Dispatch tensor/tensor, tensor/scalar and scalar/tensor forms."""
    a_num = isinstance(a, (int, float))
    b_num = isinstance(b, (int, float))
    if a_num and b_num:
        raise TypeError(f"{name} needs at least one tensor operand")
    if a_num:
        _scalar_of(a)
        out = _result(fwd(float(a), b.data), name)
        return _register(out, (b,), lambda g: bwd_st(g, float(a), b))
    if b_num:
        _scalar_of(b)
        out = _result(fwd(a.data, float(b)), name)
        return _register(out, (a,), lambda g: bwd_ts(g, a, float(b)))
    # tensor/tensor: equal shapes, or one side has a single element
    if a.shape == b.shape:
        out = _result(fwd(a.data, b.data), name)
        return _register(out, (a, b), lambda g: bwd_tt(g, a, b))
    if b.size == 1:
        out = _result(fwd(a.data, b.data.reshape(())), name)

        def back_b_scalar(g, a=a, b=b):
            ga, gb = bwd_tt(g, a, b)
            gb2 = None if gb is None else np.array(gb.sum()).reshape(b.shape)
            return ga, gb2

        return _register(out, (a, b), back_b_scalar)
    if a.size == 1:
        out = _result(fwd(a.data.reshape(()), b.data), name)

        def back_a_scalar(g, a=a, b=b):
            ga, gb = bwd_tt(g, a, b)
            ga2 = None if ga is None else np.array(ga.sum()).reshape(a.shape)
            return ga2, gb

        return _register(out, (a, b), back_a_scalar)
    raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not match")


def add(a, b) -> Tensor:
    return _binary(
        a, b, "add",
        lambda x, y: x + y,
        lambda g, a, b: (g if a.requires_grad else None,
                         g if b.requires_grad else None),
        lambda g, a, s: (g if a.requires_grad else None,),
        lambda g, s, b: (g if b.requires_grad else None,))


def sub(a, b) -> Tensor:
    return _binary(
        a, b, "sub",
        lambda x, y: x - y,
        lambda g, a, b: (g if a.requires_grad else None,
                         -g if b.requires_grad else None),
        lambda g, a, s: (g if a.requires_grad else None,),
        lambda g, s, b: (-g if b.requires_grad else None,))


def mul(a, b) -> Tensor:
    return _binary(
        a, b, "mul",
        lambda x, y: x * y,
        lambda g, a, b: (g * b.data if a.requires_grad else None,
                         g * a.data if b.requires_grad else None),
        lambda g, a, s: (g * s if a.requires_grad else None,),
        lambda g, s, b: (g * s if b.requires_grad else None,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions of {a.shape} and {b.shape} differ")
    out = _result(a.data @ b.data, "matmul")

    def back(g, a=a, b=b):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _register(out, (a, b), back)


# ---------------------------------------------------------------------------
# elementwise unary kernels

def _unary(x: Tensor, name, fwd, make_back) -> Tensor:
    y = fwd(x.data)
    out = _result(y, name)
    if x.requires_grad:
        bwd = make_back(x, y)
        return _register(out, (x,), bwd)
    return out


def relu(x: Tensor) -> Tensor:
    return _unary(x, "relu", lambda d: np.maximum(d, 0.0),
                  lambda x, y: lambda g: (g * (x.data > 0.0),))


def elu(x: Tensor) -> Tensor:
    def fwd(d):
        return np.where(d > 0.0, d, np.expm1(d))

    def make_back(x, y):
        return lambda g: (g * np.where(x.data > 0.0, 1.0, y + 1.0),)

    return _unary(x, "elu", fwd, make_back)


def tanh(x: Tensor) -> Tensor:
    return _unary(x, "tanh", np.tanh,
                  lambda x, y: lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    def fwd(d):
        out = np.empty_like(d)
        pos = d >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
        e = np.exp(d[~pos])
        out[~pos] = e / (1.0 + e)
        return out

    return _unary(x, "sigmoid", fwd,
                  lambda x, y: lambda g: (g * y * (1.0 - y),))


def exp(x: Tensor) -> Tensor:
    return _unary(x, "exp", np.exp,
                  lambda x, y: lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _unary(x, "log", np.log,
                  lambda x, y: lambda g: (g / x.data,))


def square(x: Tensor) -> Tensor:
    return _unary(x, "square", np.square,
                  lambda x, y: lambda g: (g * (2.0 * x.data),))


def softplus(x: Tensor) -> Tensor:
    def fwd(d):
        return np.logaddexp(0.0, d)

    def make_back(x, y):
        def back(g):
            d = x.data
            s = np.empty_like(d)
            pos = d >= 0
            s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
            e = np.exp(d[~pos])
            s[~pos] = e / (1.0 + e)
            return (g * s,)
        return back

    return _unary(x, "softplus", fwd, make_back)


# ---------------------------------------------------------------------------
# reductions and structural kernels

def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.data.ndim)
    out = _result(x.data.sum(axis=axes if axes else None), "sum")

    def back(g, x=x, axes=axes):
        ge = g
        for a in sorted(axes):
            ge = np.expand_dims(ge, a)
        return (np.broadcast_to(ge, x.data.shape),)

    return _register(out, (x,), back)


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.data.ndim)
    count = 1
    for a in axes:
        count *= x.data.shape[a]
    out = _result(x.data.mean(axis=axes if axes else None), "mean")

    def back(g, x=x, axes=axes, count=count):
        ge = g
        for a in sorted(axes):
            ge = np.expand_dims(ge, a)
        return (np.broadcast_to(ge, x.data.shape) / count,)

    return _register(out, (x,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ndim = tensors[0].data.ndim
    axis = axis % ndim
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != ndim or other[:axis] + other[axis + 1:] != base[:axis] + base[axis + 1:]:
            raise ShapeError(f"concat: shapes {tensors[0].shape} and {t.shape} "
                             f"differ off axis {axis}")
    out = _result(np.concatenate([t.data for t in tensors], axis=axis), "concat")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g, tensors=tuple(tensors), splits=splits, axis=axis):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if t.requires_grad else None
                     for p, t in zip(parts, tensors))

    return _register(out, tuple(tensors), back)


def slice_(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % x.data.ndim
    n = x.shape[axis]
    if not (0 <= start < stop <= n):
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} "
                         f"of shape {x.shape}")
    index = tuple(slice(None) if a != axis else slice(start, stop)
                  for a in range(x.data.ndim))
    out = _result(x.data[index], "slice")

    def back(g, x=x, index=index):
        gx = np.zeros_like(x.data)
        gx[index] = g
        return (gx,)

    return _register(out, (x,), back)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} ({x.size} elements) to {shape}")
    out = _result(x.data.reshape(shape), "reshape")

    def back(g, x=x):
        return (g.reshape(x.data.shape),)

    return _register(out, (x,), back)


# ---------------------------------------------------------------------------
# convolution (stride 1, zero padding, small kernels)

_MAX_KERNEL = 5


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    b, hp, wp, c = xp.shape
    ho, wo = hp - kh + 1, wp - kw + 1
    s0, s1, s2, s3 = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (b, ho, wo, kh, kw, c), (s0, s1, s2, s1, s2, s3))
    return view.reshape(b * ho * wo, kh * kw * c)


def conv2d(x: Tensor, kernel: Tensor, padding: int = 0) -> Tensor:
    """NHWC convolution, stride 1, zero padding; kernel (kh, kw, cin, cout)."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be (batch, h, w, c), got {x.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be (kh, kw, cin, cout), got {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if kh > _MAX_KERNEL or kw > _MAX_KERNEL:
        raise ShapeError(f"conv2d kernel {kh}x{kw} exceeds the {_MAX_KERNEL}x{_MAX_KERNEL} limit")
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d: input channels {x.shape[3]} != kernel cin {cin} "
                         f"(input {x.shape}, kernel {kernel.shape})")
    if padding < 0:
        raise ShapeError("conv2d padding must be nonnegative")
    b, h, w, _ = x.shape
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: padded input smaller than kernel "
                         f"(input {x.shape}, kernel {kernel.shape}, padding {padding})")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    cols = _im2col(xp, kh, kw)
    kmat = kernel.data.reshape(kh * kw * cin, cout)
    out = _result((cols @ kmat).reshape(b, ho, wo, cout), "conv2d")

    def back(g, x=x, kernel=kernel, xp=xp, padding=padding):
        kh, kw, cin, cout = kernel.shape
        b = x.shape[0]
        gflat = g.reshape(-1, cout)
        gk = None
        if kernel.requires_grad:
            cols_b = _im2col(xp, kh, kw)
            gk = (cols_b.T @ gflat).reshape(kernel.data.shape)
        gx = None
        if x.requires_grad:
            dcols = (gflat @ kernel.data.reshape(kh * kw * cin, cout).T)
            ho = xp.shape[1] - kh + 1
            wo = xp.shape[2] - kw + 1
            d = dcols.reshape(b, ho, wo, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + ho, j:j + wo, :] += d[:, :, :, i, j, :]
            if padding:
                gx = gxp[:, padding:-padding, padding:-padding, :]
            else:
                gx = gxp
        return gx, gk

    return _register(out, (x, kernel), back)


# ---------------------------------------------------------------------------
# composite losses

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def gaussian_nll(x: Tensor, mean_t: Tensor, std: float) -> Tensor:
    """Negative log likelihood of x under N(mean, std^2), summed over elements.

    std is a fixed positive number, so the result is a scaled squared
    error plus a constant; gradients flow into both x and mean.
    """
    if std <= 0.0 or not math.isfinite(std):
        raise ValueError(f"std must be positive and finite, got {std}")
    if x.shape != mean_t.shape:
        raise ShapeError(f"gaussian_nll: shapes {x.shape} and {mean_t.shape} differ")
    diff = sub(x, mean_t)
    total = sum_(square(diff))
    const = x.size * (math.log(std) + _LOG_SQRT_2PI)
    return add(mul(total, 1.0 / (2.0 * std * std)), const)


def gaussian_kl(mean1: Tensor, std1: Tensor, mean2: Tensor, std2: Tensor) -> Tensor:
    """Elementwise KL( N(mean1, std1^2) || N(mean2, std2^2) ) for diagonal Gaussians."""
    for name, t in (("mean1", mean1), ("std1", std1), ("mean2", mean2), ("std2", std2)):
        if t.shape != mean1.shape:
            raise ShapeError(f"gaussian_kl: {name} has shape {t.shape}, expected {mean1.shape}")
    log_ratio = sub(log(std2), log(std1))
    inv_var2 = exp(mul(log(std2), -2.0))
    quad = add(square(std1), square(sub(mean1, mean2)))
    return sub(add(log_ratio, mul(mul(quad, inv_var2), 0.5)), 0.5)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor) elementwise; gradient is zero below the floor."""
    return add(relu(sub(x, floor)), floor)
