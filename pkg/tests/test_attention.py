import numpy as np
import pytest

from conftest import assert_grads
from scoreattn import tensor as T
from scoreattn.attention import (AttentionBlock, MultiHeadAttention, cross_attention_block,
                                 merge_heads, multi_head_attention, scaled_dot_product,
                                 self_attention_block, split_heads)
from scoreattn.errors import ContractError, DegenerateInputError, ShapeError
from scoreattn.layers import SequenceBatch
from scoreattn.tensor import Tensor
from scoreattn.verification import naive_multi_head


def seq(rng, b, n, d, mask=None):
    return SequenceBatch(Tensor(rng.normal(size=(b, n, d)), requires_grad=True),
                         np.ones((b, n), bool) if mask is None else mask)


def test_split_and_merge_heads_are_inverse(rng):
    x = Tensor(rng.normal(size=(2, 5, 12)))
    heads = split_heads(x, 3)
    assert heads.shape == (2, 3, 5, 4)
    np.testing.assert_array_equal(heads.data[:, 1], x.data[:, :, 4:8])
    np.testing.assert_array_equal(merge_heads(heads).data, x.data)


def test_scaled_dot_product_single_key_returns_value():
    q = Tensor(np.ones((1, 1, 2, 3)))
    k = Tensor(np.ones((1, 1, 1, 3)))
    v = Tensor(np.array([[[[4.0, 5.0, 6.0]]]]))
    out, w = scaled_dot_product(q, k, v, np.ones((1, 1), bool))
    np.testing.assert_allclose(w.data, 1.0)
    np.testing.assert_allclose(out.data[0, 0], [[4, 5, 6], [4, 5, 6]])


def test_multi_head_matches_naive_loop(f64, rng):
    mha = MultiHeadAttention(8, 2, rng)
    mask = np.array([[True, True, False, True], [True, False, False, False]])
    x, z = seq(rng, 2, 3, 8), seq(rng, 2, 4, 8, mask)
    out = multi_head_attention(mha, x, z).data
    np.testing.assert_allclose(out, naive_multi_head(mha, x.data.data, z.data.data, mask), atol=1e-12)


def test_attention_weights_rows_sum_to_one_and_skip_padding(f64, rng):
    mha = MultiHeadAttention(4, 2, rng)
    mask = np.array([[True, False, True]])
    _, w = mha(seq(rng, 1, 2, 4), seq(rng, 1, 3, 4, mask), return_weights=True)
    assert w.shape == (1, 2, 2, 3)
    np.testing.assert_allclose(w.sum(-1), 1.0)
    assert np.all(w[..., 1] == 0.0)


def test_padded_keys_do_not_influence_output(f64, rng):
    mha = MultiHeadAttention(4, 1, rng)
    mask = np.array([[True, True, False]])
    x, z = seq(rng, 1, 2, 4), seq(rng, 1, 3, 4, mask)
    base = mha(x, z).data
    z.data.data[0, 2] = 1e3
    np.testing.assert_allclose(mha(x, z).data, base, atol=1e-12)


def test_fully_masked_keys_raise(rng):
    mha = MultiHeadAttention(4, 1, rng)
    with pytest.raises(DegenerateInputError):
        mha(seq(rng, 1, 2, 4), seq(rng, 1, 3, 4, np.zeros((1, 3), bool)))


@pytest.mark.parametrize("d,heads", [(6, 4), (5, 2)])
def test_heads_must_divide_width(rng, d, heads):
    with pytest.raises(ShapeError):
        MultiHeadAttention(d, heads, rng)


def test_width_and_batch_mismatch_raise(rng):
    mha = MultiHeadAttention(4, 2, rng)
    with pytest.raises(ShapeError):
        mha(seq(rng, 1, 2, 4), seq(rng, 1, 2, 6))
    with pytest.raises(ShapeError):
        mha(seq(rng, 2, 2, 4), seq(rng, 3, 2, 4))


def test_multi_head_gradients(f64, rng):
    mha = MultiHeadAttention(6, 3, rng)
    mask = np.array([[True, True, True], [True, False, True]])
    x, z = seq(rng, 2, 2, 6), seq(rng, 2, 3, 6, mask)
    g = rng.normal(size=(2, 2, 6))
    assert_grads(lambda: T.tsum(mha(x, z) * g), mha.parameters() + [x.data, z.data], rtol=1e-5)


def test_pair_indices_equal_explicit_gather(f64, rng):
    mha = MultiHeadAttention(4, 2, rng)
    x, z = seq(rng, 3, 2, 4), seq(rng, 2, 3, 4, np.array([[1, 1, 0], [1, 1, 1]], bool))
    qi, ki = [0, 1, 2, 2], [1, 1, 0, 1]
    indexed = mha(x, z, query_index=qi, kv_index=ki).data
    explicit = mha(x.take(qi), z.take(ki)).data
    np.testing.assert_allclose(indexed, explicit, atol=1e-13)


def test_blocks_keep_shape_and_mask(rng):
    block = AttentionBlock(8, 2, 0.9, rng)
    block.dropout_rng = np.random.default_rng(0)
    x, z = seq(rng, 2, 3, 8, np.array([[1, 1, 0], [1, 1, 1]], bool)), seq(rng, 2, 5, 8)
    out = cross_attention_block(block, x, z)
    assert out.data.shape == (2, 3, 8)
    np.testing.assert_array_equal(out.mask, x.mask)
    assert self_attention_block(block, x).data.shape == (2, 3, 8)


def test_block_output_is_layer_normalised(f64, rng):
    block = AttentionBlock(8, 2, 1.0, rng)
    out = block(seq(rng, 2, 3, 8)).data.data
    np.testing.assert_allclose(out.mean(-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.std(-1), 1.0, rtol=1e-3)


def test_block_dropout_needs_rng_in_training_only(rng):
    block = AttentionBlock(4, 1, 0.5, rng)
    x = seq(rng, 1, 2, 4)
    with pytest.raises(ContractError):
        block(x)
    block.eval()
    assert block(x).data.shape == (1, 2, 4)


def test_invalid_keep_probability(rng):
    with pytest.raises(ContractError):
        AttentionBlock(4, 1, 0.0, rng)
