"""Multi-head scaled dot-product attention and the residual attention blocks."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .layers import LayerNorm, Linear, Module, SequenceBatch
from .tensor import Tensor


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., n, d) -> (..., heads, n, d / heads)."""
    *lead, n, d = x.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return T.permute(x, (*lead, n, heads, d // heads), axes)


def merge_heads(x: Tensor) -> Tensor:
    """(..., heads, n, dh) -> (..., n, heads * dh)."""
    *lead, h, n, dh = x.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return T.permute(x, None, axes, (*lead, n, h * dh))


def scaled_dot_product(q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(dh)) v per head.

    ``q`` is (B, h, n_q, dh), ``k`` and ``v`` are (B, h, n_k, dh) and
    ``key_mask`` is (B, n_k). Returns the head outputs and attention weights.
    """
    weights = T.attention_weights(q, k, 1.0 / np.sqrt(q.shape[-1]), key_mask[:, None, None, :])
    return weights @ v, weights


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ShapeError(f"model width {d} is not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.query = Linear(d, d, rng)
        self.key = Linear(d, d, rng)
        self.value = Linear(d, d, rng)
        self.output = Linear(d, d, rng)

    def __call__(self, queries: SequenceBatch, keys_values: SequenceBatch,
                 return_weights: bool = False, query_index=None, kv_index=None):
        """Attend from ``queries`` to ``keys_values``.

        ``query_index`` / ``kv_index`` optionally gather batch rows after the
        input projections, so that many (query, key) pairings can share one
        projection per distinct input.
        """
        if queries.width != self.d or keys_values.width != self.d:
            raise ShapeError(
                f"attention width {self.d} does not match inputs "
                f"{queries.data.shape} and {keys_values.data.shape}")
        n_q = queries.batch if query_index is None else len(query_index)
        n_kv = keys_values.batch if kv_index is None else len(kv_index)
        if n_q != n_kv:
            raise ShapeError(f"batch sizes differ: {n_q} vs {n_kv}")
        merged, weights = T.multi_head_core(
            queries.data, keys_values.data,
            self.query.weight, self.query.bias, self.key.weight, self.key.bias,
            self.value.weight, self.value.bias, self.heads, keys_values.mask,
            query_index, kv_index)
        out = self.output(merged)
        return (out, weights) if return_weights else out


class AttentionBlock(Module):
    """Post-norm residual block: layer_norm(x + dropout(attention(x, z)))."""

    def __init__(self, d: int, heads: int, dropout_keep: float, rng: np.random.Generator):
        if not 0.0 < dropout_keep <= 1.0:
            raise ContractError(f"dropout keep probability must be in (0, 1], got {dropout_keep}")
        self.attention = MultiHeadAttention(d, heads, rng)
        self.norm = LayerNorm(d)
        self.dropout_keep = dropout_keep
        self.dropout_rng: np.random.Generator | None = None

    def __call__(self, x: SequenceBatch, z: SequenceBatch | None = None,
                 x_index=None, z_index=None) -> SequenceBatch:
        z = x if z is None else z
        attended = self.attention(x, z, query_index=x_index, kv_index=z_index)
        attended = T.dropout(attended, self.dropout_keep, self.dropout_rng, self.training)
        if x_index is not None:
            x = x.take(x_index)
        return SequenceBatch(self.norm(x.data + attended), x.mask)


def multi_head_attention(params: MultiHeadAttention, queries: SequenceBatch,
                         keys_values: SequenceBatch) -> Tensor:
    return params(queries, keys_values)


def cross_attention_block(params: AttentionBlock, x: SequenceBatch, z: SequenceBatch) -> SequenceBatch:
    return params(x, z)


def self_attention_block(params: AttentionBlock, x: SequenceBatch) -> SequenceBatch:
    return params(x)
