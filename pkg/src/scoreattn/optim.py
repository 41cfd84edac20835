"""Adam, global-norm gradient clipping and the step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .tensor import Tensor


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first: list[np.ndarray] = field(default_factory=list)
    second: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kwargs) -> AdamState:
        state = cls(**kwargs)
        state.first = [np.zeros_like(p.data) for p in params]
        state.second = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray | None],
              lr: float) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(state.first) or len(grads) != len(params):
        raise ShapeError("parameter, gradient and moment lists differ in length")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    step_size = lr / (1.0 - b1 ** t)
    correction2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first, state.second):
        if g is None:
            continue
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / correction2) + state.eps
        p.data -= (step_size * m / denom).astype(p.dtype, copy=False)


class Adam:
    """Adam over a fixed parameter list.

    Parameter values and moments are re-homed into single flat buffers (each
    parameter's ``data`` becomes a view), so a step is a handful of vector
    operations instead of several per parameter. The arithmetic is the same
    as :func:`adam_step`.
    """

    def __init__(self, params: Sequence[Tensor], **kwargs):
        self.params = list(params)
        dtype = np.result_type(*[p.dtype for p in self.params]) if self.params else np.float32
        sizes = [p.size for p in self.params]
        self._offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self._flat = np.empty(int(self._offsets[-1]), dtype=dtype)
        for p, lo, hi in zip(self.params, self._offsets[:-1], self._offsets[1:]):
            self._flat[lo:hi] = p.data.ravel()
            p.data = self._flat[lo:hi].reshape(p.shape)
        self._m = np.zeros_like(self._flat)
        self._v = np.zeros_like(self._flat)
        self.state = AdamState(**kwargs)
        self.state.first = [self._m[lo:hi].reshape(p.shape) for p, lo, hi in self._views()]
        self.state.second = [self._v[lo:hi].reshape(p.shape) for p, lo, hi in self._views()]

    def _views(self):
        return zip(self.params, self._offsets[:-1], self._offsets[1:])

    def step(self, lr: float) -> None:
        grads = [p.grad for p in self.params]
        if any(g is None for g in grads):
            adam_step(self.state, self.params, grads, lr)
            return
        for p, g in zip(self.params, grads):
            if g.shape != p.shape:
                raise ShapeError(f"gradient {g.shape} does not match parameter {p.shape}")
        g = np.concatenate([g.ravel() for g in grads]).astype(self._flat.dtype, copy=False)
        state = self.state
        state.step += 1
        t = state.step
        b1, b2 = state.beta1, state.beta2
        step_size = lr / (1.0 - b1 ** t)
        correction2 = 1.0 - b2 ** t
        m, v = self._m, self._v
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / correction2) + state.eps
        self._flat -= (step_size * m / denom).astype(self._flat.dtype, copy=False)


def global_norm(grads: Sequence[np.ndarray | None]) -> float:
    return float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads if g is not None)))


def clip_global_norm(grads: Sequence[np.ndarray | None], max_norm: float) -> float:
    """Scale all gradients in place so their joint 2-norm is at most ``max_norm``.

    Returns the applied scale (1.0 when no clipping was needed).
    """
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    factor = max_norm / norm
    for g in grads:
        if g is not None:
            g *= np.asarray(factor, dtype=g.dtype)
    return factor


def lr_at(lr0: float, epoch: int, decay_factor: float = 10.0, decay_every: int = 10) -> float:
    """Step schedule: divide by ``decay_factor`` every ``decay_every`` epochs."""
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    return lr0 * decay_factor ** (-(epoch // decay_every))
