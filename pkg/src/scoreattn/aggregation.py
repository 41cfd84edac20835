"""Sequence aggregation: Score Attention and the baseline reductions.

Every aggregator maps a masked sequence ``x`` (B, n, d), optionally
conditioned on the other modality ``z``, to ``k`` vectors of shape (B, k, d).
Parameter-free baselines and the learned conv1d / CLS reductions produce a
single vector (k = 1).
"""

from __future__ import annotations

import enum

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .layers import Linear, Module, SequenceBatch, uniform_init
from .tensor import Parameter, Tensor

COSINE_EPS = 1e-8


class AggregatorKind(str, enum.Enum):
    SCORE_ATTENTION = "score_attention"
    MEAN = "mean"
    MAX = "max"
    LOGSUMEXP = "logsumexp"
    CONV1D = "conv1d"
    CLS = "cls"

    @classmethod
    def parse(cls, value) -> AggregatorKind:
        if isinstance(value, cls):
            return value
        aliases = {"cls_token": "cls", "lse": "logsumexp"}
        value = aliases.get(value, value)
        try:
            return cls(value)
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise ConfigError(f"unknown aggregator {value!r}; expected one of {names}") from None


class ScoreAttention(Module):
    """``k`` independent Score Attention instances, evaluated in one pass.

    Instance ``i`` owns column block ``i`` of the query/key/value projections
    and row ``i`` of the scalar score head.
    """

    def __init__(self, d: int, heads: int, k: int, rng: np.random.Generator):
        if k < 1:
            raise ConfigError(f"k must be at least 1, got {k}")
        if d % heads:
            raise ShapeError(f"model width {d} is not divisible by {heads} heads")
        self.d, self.heads, self.k = d, heads, k
        self.query = Linear(d, k * d, rng)
        self.key = Linear(d, k * d, rng)
        self.value = Linear(d, k * d, rng)
        self.score_weight = Parameter(uniform_init(rng, (k, d), d))
        self.score_bias = Parameter(uniform_init(rng, (k,), d))

    def logits(self, x: SequenceBatch, z: SequenceBatch) -> Tensor:
        """Unnormalised scalar score per instance and query position, (B, k, n_x)."""
        if x.width != self.d or z.width != self.d:
            raise ShapeError(f"score attention width {self.d} vs inputs "
                             f"{x.data.shape} and {z.data.shape}")
        b, n = x.batch, x.length
        # the k instances are k groups of heads within one projection
        merged, _ = T.multi_head_core(
            x.data, z.data, self.query.weight, self.query.bias, self.key.weight,
            self.key.bias, self.value.weight, self.value.bias, self.k * self.heads, z.mask)
        per_instance = merged.reshape(b, n, self.k, self.d)
        logits = T.tsum(per_instance * self.score_weight, axis=-1) + self.score_bias
        return logits.transpose(0, 2, 1)

    def scores(self, x: SequenceBatch, z: SequenceBatch) -> Tensor:
        x.check_nonempty()
        return T.softmax(self.logits(x, z), axis=-1, mask=x.mask[:, None, :])

    def __call__(self, x: SequenceBatch, z: SequenceBatch) -> Tensor:
        s = self.scores(x, z)
        return s @ x.zero_padding()


def score_attention_scores(params: ScoreAttention, x: SequenceBatch, z: SequenceBatch) -> Tensor:
    """Softmax-normalised scores over x's valid positions, shape (B, k, n_x)."""
    return params.scores(x, z)


def score_attention_reduce(params: ScoreAttention, x: SequenceBatch, z: SequenceBatch) -> Tensor:
    """Score-weighted sums of x's own vectors, shape (B, k, d)."""
    return params(x, z)


def combine_k_vqa(y: Tensor) -> Tensor:
    return T.tmean(y, axis=1)


def _norm(y: Tensor) -> Tensor:
    return T.sqrt(T.tsum(y * y, axis=-1))


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity along the last axis with an epsilon-guarded denominator."""
    return T.tsum(a * b, axis=-1) / (_norm(a) * _norm(b) + COSINE_EPS)


def combine_k_retrieval(y_img: Tensor, y_txt: Tensor, all_pairs: bool = False) -> Tensor:
    """Average of the k slot-wise cosine similarities, shape (B,).

    With ``all_pairs`` every image slot is compared with every text slot.
    """
    if y_img.shape != y_txt.shape:
        raise ShapeError(f"compressed vectors differ: {y_img.shape} vs {y_txt.shape}")
    if all_pairs:
        b, k, d = y_img.shape
        sims = cosine(y_img.reshape(b, k, 1, d), y_txt.reshape(b, 1, k, d))
        return T.tmean(sims.reshape(b, k * k), axis=1)
    return T.tmean(cosine(y_img, y_txt), axis=1)


# --------------------------------------------------------------------------
# baselines


def masked_mean(x: SequenceBatch) -> Tensor:
    x.check_nonempty()
    counts = x.mask.sum(axis=1, keepdims=True).astype(x.data.dtype)
    return T.tsum(x.zero_padding(), axis=1) / counts


def masked_max(x: SequenceBatch) -> Tensor:
    return T.tmax(x.data, axis=1, mask=x.mask[:, :, None])


def masked_logsumexp(x: SequenceBatch) -> Tensor:
    return T.logsumexp(x.data, axis=1, mask=x.mask[:, :, None])


class Conv1dReduce(Module):
    """Full-window 1D convolution over the sequence axis: one output per channel.

    The kernel spans ``max_len`` positions; shorter inputs behave as if zero
    padded up to ``max_len``.
    """

    def __init__(self, d: int, max_len: int, rng: np.random.Generator):
        self.d = d
        self.max_len = max_len
        self.weight = Parameter(uniform_init(rng, (max_len * d, d), max_len * d))
        self.bias = Parameter(uniform_init(rng, (d,), max_len * d))

    def __call__(self, x: SequenceBatch) -> Tensor:
        x.check_nonempty()
        n = x.length
        if n > self.max_len:
            raise ShapeError(f"sequence length {n} exceeds conv1d kernel span {self.max_len}")
        flat = x.zero_padding().reshape(x.batch, n * self.d)
        weight = self.weight if n == self.max_len else T.getitem(self.weight, slice(0, n * self.d))
        return T.linear(flat, weight, self.bias)


class ClsToken(Module):
    def __init__(self, d: int, rng: np.random.Generator):
        self.embedding = Parameter(rng.normal(0.0, 0.02, size=d).astype(T.get_default_dtype()))

    def __call__(self, x: SequenceBatch) -> Tensor:
        return cls_reduce(x)


def prepend_cls(x: SequenceBatch, cls_embedding: Tensor) -> SequenceBatch:
    """Prepend a learnable summary slot at position 0 (always valid)."""
    b, _, d = x.data.shape
    token = T.add(np.zeros((b, 1, d), dtype=x.data.dtype), cls_embedding.reshape(1, 1, d))
    mask = np.concatenate([np.ones((b, 1), dtype=bool), x.mask], axis=1)
    return SequenceBatch(T.concat([token, x.data], axis=1), mask)


def cls_reduce(x: SequenceBatch) -> Tensor:
    return x.data[:, 0, :]


def baseline_reduce(kind, x: SequenceBatch, module: Module | None = None) -> Tensor:
    """Reduce x to (B, d) with one of the baseline aggregators."""
    kind = AggregatorKind.parse(kind)
    if kind is AggregatorKind.MEAN:
        return masked_mean(x)
    if kind is AggregatorKind.MAX:
        return masked_max(x)
    if kind is AggregatorKind.LOGSUMEXP:
        return masked_logsumexp(x)
    if kind is AggregatorKind.CONV1D:
        if module is None:
            raise ConfigError("conv1d reduction needs its learned kernel")
        return module(x)
    if kind is AggregatorKind.CLS:
        x.check_nonempty()
        return cls_reduce(x)
    raise ConfigError(f"{kind.value} is not a baseline reduction")


class Aggregator(Module):
    """One modality's reduction, whatever its kind, returning (B, k, d)."""

    def __init__(self, kind, d: int, heads: int, k: int, max_len: int,
                 rng: np.random.Generator):
        self.kind = AggregatorKind.parse(kind)
        self.k = k if self.kind is AggregatorKind.SCORE_ATTENTION else 1
        self.score = ScoreAttention(d, heads, k, rng) if self.kind is AggregatorKind.SCORE_ATTENTION else None
        self.conv = Conv1dReduce(d, max_len, rng) if self.kind is AggregatorKind.CONV1D else None
        self.cls = ClsToken(d, rng) if self.kind is AggregatorKind.CLS else None

    def prepare(self, x: SequenceBatch) -> SequenceBatch:
        """Hook applied before the attention stage (CLS insertion)."""
        return prepend_cls(x, self.cls.embedding) if self.cls is not None else x

    def __call__(self, x: SequenceBatch, z: SequenceBatch) -> Tensor:
        if self.score is not None:
            return self.score(x, z)
        reduced = baseline_reduce(self.kind, x, self.conv)
        return reduced.reshape(x.batch, 1, reduced.shape[-1])
