"""Adam with global-norm gradient clipping."""

from __future__ import annotations

import math
from typing import Iterable, Optional

import numpy as np

from .autodiff import Tensor


class Adam:
    """Adam over a fixed parameter list.

    Missing gradients count as zero. ``step`` applies the update and then
    zeroes every gradient, matching the accumulate-until-reset contract of
    the tape.
    """

    def __init__(self, params: Iterable[Tensor], lr: float,
                 eps: float = 1e-7, beta1: float = 0.9, beta2: float = 0.999,
                 grad_clip_norm: Optional[float] = 100.0):
        self.params = list(params)
        if not self.params:
            raise ValueError("Adam needs at least one parameter")
        for p in self.params:
            if not p.requires_grad:
                raise ValueError("Adam given a tensor that does not require "
                                 "gradients (frozen or constant)")
        self.lr = float(lr)
        self.eps = float(eps)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.grad_clip_norm = grad_clip_norm
        self._t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def _clipped_grads(self) -> list[np.ndarray]:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                 for p in self.params]
        if self.grad_clip_norm is not None:
            sq = sum(float((g * g).sum()) for g in grads)
            norm = math.sqrt(sq)
            if norm > self.grad_clip_norm:
                scale = self.grad_clip_norm / norm
                grads = [g * scale for g in grads]
        return grads

    def step(self) -> None:
        grads = self._clipped_grads()
        self._t += 1
        bc1 = 1.0 - self.beta1 ** self._t
        bc2 = 1.0 - self.beta2 ** self._t
        for p, g, m, v in zip(self.params, grads, self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        self.zero_grad()
