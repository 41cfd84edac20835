"""Module base class, basic layers and the masked sequence container."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import DegenerateInputError, ShapeError
from .tensor import Parameter, Tensor


@dataclass
class SequenceBatch:
    """Padded feature sequences ``data`` (B, n, d) and validity ``mask`` (B, n)."""

    data: Tensor
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.data.ndim != 3 or self.mask.shape != self.data.shape[:2]:
            raise ShapeError(f"sequence data {self.data.shape} and mask {self.mask.shape} disagree")

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def check_nonempty(self) -> None:
        if not self.mask.any(axis=1).all():
            raise DegenerateInputError("a sequence in the batch has no valid positions")

    def zero_padding(self) -> Tensor:
        """The data with padded rows multiplied by zero."""
        if self.mask.all():
            return self.data
        return T.mul(self.data, self.mask[..., None].astype(self.data.dtype))

    def take(self, indices) -> SequenceBatch:
        return SequenceBatch(T.take(self.data, indices, axis=0), self.mask[np.asarray(indices)])

    @classmethod
    def full(cls, data) -> SequenceBatch:
        data = T.as_tensor(data)
        return cls(data, np.ones(data.shape[:2], dtype=bool))


class Module:
    """Container whose parameters are discovered in attribute-assignment order."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def modules(self) -> Iterator[Module]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> Module:
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> Module:
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(T.get_default_dtype())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(uniform_init(rng, (n_in, n_out), n_in))
        self.bias = Parameter(uniform_init(rng, (n_out,), n_in)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        dtype = T.get_default_dtype()
        self.gain = Parameter(np.ones(d, dtype=dtype))
        self.bias = Parameter(np.zeros(d, dtype=dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)
