"""Network layers on top of the gradient tape.

Bias addition is realized as ``ones(B, 1) @ bias(1, n)`` followed by an
elementwise add, since the tape forbids implicit broadcasting.
"""

from __future__ import annotations

import hashlib
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


_ONES_CACHE: dict[int, Tensor] = {}


def _ones_column(n: int) -> Tensor:
    t = _ONES_CACHE.get(n)
    if t is None:
        t = ad.constant(np.ones((n, 1)))
        _ONES_CACHE[n] = t
    return t


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """x (B, n) plus bias (1, n), made explicit through a ones matmul."""
    return ad.add(x, ad.matmul(_ones_column(x.shape[0]), bias))


class Dense:
    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int,
                 activation: Optional[Callable[[Tensor], Tensor]] = None):
        self.w = ad.parameter(glorot_uniform(rng, in_dim, out_dim, (in_dim, out_dim)))
        self.b = ad.parameter(np.zeros((1, out_dim)))
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        y = add_bias(ad.matmul(x, self.w), self.b)
        return self.activation(y) if self.activation else y

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}/w": self.w, f"{prefix}/b": self.b}


class Conv2d:
    """Stride-1 NHWC convolution with same-size zero padding by default."""

    def __init__(self, rng: np.random.Generator, in_ch: int, out_ch: int,
                 ksize: int = 3, padding: Optional[int] = None,
                 activation: Optional[Callable[[Tensor], Tensor]] = None):
        fan_in = ksize * ksize * in_ch
        fan_out = ksize * ksize * out_ch
        self.kernel = ad.parameter(
            glorot_uniform(rng, fan_in, fan_out, (ksize, ksize, in_ch, out_ch)))
        self.b = ad.parameter(np.zeros((1, out_ch)))
        self.padding = (ksize - 1) // 2 if padding is None else padding
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.conv2d(x, self.kernel, padding=self.padding)
        b, h, w, c = y.shape
        flat = add_bias(ad.reshape(y, (b * h * w, c)), self.b)
        y = ad.reshape(flat, (b, h, w, c))
        return self.activation(y) if self.activation else y

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}/kernel": self.kernel, f"{prefix}/b": self.b}


class GRUCell:
    """Gated recurrent update; state and input are (B, dim) tensors."""

    def __init__(self, rng: np.random.Generator, in_dim: int, hidden_dim: int):
        def mat(n_in, n_out):
            return ad.parameter(glorot_uniform(rng, n_in, n_out, (n_in, n_out)))

        self.wxr, self.whr = mat(in_dim, hidden_dim), mat(hidden_dim, hidden_dim)
        self.wxu, self.whu = mat(in_dim, hidden_dim), mat(hidden_dim, hidden_dim)
        self.wxc, self.whc = mat(in_dim, hidden_dim), mat(hidden_dim, hidden_dim)
        self.br = ad.parameter(np.zeros((1, hidden_dim)))
        self.bu = ad.parameter(np.zeros((1, hidden_dim)))
        self.bc = ad.parameter(np.zeros((1, hidden_dim)))

    def __call__(self, h: Tensor, x: Tensor) -> Tensor:
        r = ad.sigmoid(add_bias(ad.add(ad.matmul(x, self.wxr), ad.matmul(h, self.whr)), self.br))
        u = ad.sigmoid(add_bias(ad.add(ad.matmul(x, self.wxu), ad.matmul(h, self.whu)), self.bu))
        cand = ad.tanh(add_bias(
            ad.add(ad.matmul(x, self.wxc), ad.matmul(ad.mul(r, h), self.whc)), self.bc))
        return ad.add(ad.mul(u, h), ad.mul(ad.sub(1.0, u), cand))

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}/wxr": self.wxr, f"{prefix}/whr": self.whr, f"{prefix}/br": self.br,
            f"{prefix}/wxu": self.wxu, f"{prefix}/whu": self.whu, f"{prefix}/bu": self.bu,
            f"{prefix}/wxc": self.wxc, f"{prefix}/whc": self.whc, f"{prefix}/bc": self.bc,
        }


def params_checksum(named: dict[str, Tensor]) -> str:
    """SHA-256 over parameter bytes in name order; detects any mutation."""
    h = hashlib.sha256()
    for name in sorted(named):
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(named[name].data, dtype="<f8").tobytes())
    return h.hexdigest()


def load_named_params(named: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into existing parameter tensors, shape-checked."""
    missing = sorted(set(named) - set(arrays))
    extra = sorted(set(arrays) - set(named))
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
    for name, t in named.items():
        arr = arrays[name]
        if arr.shape != t.data.shape:
            raise ValueError(f"{name}: checkpoint shape {arr.shape} != model {t.data.shape}")
        t.data[...] = arr
