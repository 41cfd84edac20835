import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conftest import assert_grads
from scoreattn import tensor as T
from scoreattn.errors import ContractError, DegenerateInputError, DomainError, ShapeError
from scoreattn.tensor import Tensor


def leaf(rng, *shape, positive=False):
    data = rng.uniform(0.5, 2.0, size=shape) if positive else rng.normal(size=shape)
    return Tensor(data, requires_grad=True)


def test_default_dtype_is_float32_and_context_switches():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    with T.default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert T.get_default_dtype() == np.float32


def test_matmul_values():
    a = Tensor(np.arange(6.0).reshape(2, 3))
    b = Tensor(np.arange(12.0).reshape(3, 4))
    np.testing.assert_array_equal((a @ b).data, [[20, 23, 26, 29], [56, 68, 80, 92]])


def test_matmul_batched_broadcast_gradients(f64, rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    w = rng.normal(size=(2, 3, 5))
    assert_grads(lambda: T.tsum((a @ b) * w), [a, b])


@pytest.mark.parametrize("sa,sb", [((2, 3), (4, 5)), ((3,), (3, 2)), ((2, 2, 3), (3, 3, 2))])
def test_matmul_shape_errors(sa, sb):
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones(sa)), Tensor(np.ones(sb)))


def test_broadcast_mismatch_raises():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


@pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
def test_binary_gradients_with_broadcasting(f64, rng, op):
    a = leaf(rng, 3, 4)
    b = leaf(rng, 4, positive=True)
    fn = getattr(T, op)
    w = rng.normal(size=(3, 4))
    assert_grads(lambda: T.tsum(fn(a, b) * w), [a, b])


@pytest.mark.parametrize("op", ["exp", "log", "sqrt", "tanh", "sigmoid", "relu", "neg"])
def test_unary_gradients(f64, rng, op):
    a = leaf(rng, 3, 4, positive=op in ("log", "sqrt"))
    if op == "relu":
        a.data += np.sign(a.data) * 0.05  # keep away from the kink
    w = rng.normal(size=(3, 4))
    assert_grads(lambda: T.tsum(getattr(T, op)(a) * w), [a])


def test_domain_errors():
    with pytest.raises(DomainError):
        T.log(Tensor([1.0, 0.0]))
    with pytest.raises(DomainError):
        T.sqrt(Tensor([-1.0]))
    with pytest.raises(DomainError):
        Tensor([1.0]) / Tensor([0.0])


def test_sigmoid_is_stable_for_large_inputs():
    out = T.sigmoid(Tensor([-1000.0, 0.0, 1000.0])).data
    np.testing.assert_array_equal(out, [0.0, 0.5, 1.0])


def test_scale_and_constants_keep_tensor_dtype(f64):
    a = Tensor(np.ones(3, dtype=np.float32))
    assert (a * 2.0).dtype == np.float32
    assert T.scale(a, 3).data.tolist() == [3.0, 3.0, 3.0]


def test_softmax_masked_values():
    x = Tensor([[1.0, 2.0, 3.0], [0.0, 0.0, 5.0]], dtype=np.float64)
    mask = np.array([[True, True, False], [True, True, False]])
    out = T.softmax(x, axis=-1, mask=mask).data
    e = np.exp([1.0, 2.0])
    np.testing.assert_allclose(out[0], [e[0] / e.sum(), e[1] / e.sum(), 0.0], atol=1e-15)
    np.testing.assert_allclose(out[1], [0.5, 0.5, 0.0], atol=1e-15)
    assert out[0, 2] == 0.0


def test_softmax_fully_masked_slice_raises():
    with pytest.raises(DegenerateInputError):
        T.softmax(Tensor(np.ones((2, 3))), mask=np.array([[True, False, False], [False, False, False]]))


def test_softmax_mask_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        T.softmax(Tensor(np.ones((2, 3))), mask=np.ones((4,), dtype=bool))


def test_softmax_gradient_with_mask(f64, rng):
    x = leaf(rng, 3, 5)
    mask = rng.random((3, 5)) < 0.6
    mask[:, 0] = True
    w = rng.normal(size=(3, 5))
    assert_grads(lambda: T.tsum(T.softmax(x, axis=1, mask=mask) * w), [x])


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=3, max_side=6),
                  elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(out >= 0)


@pytest.mark.parametrize("reduction", ["sum", "mean", "max", "logsumexp"])
def test_reduction_gradients(f64, rng, reduction):
    x = leaf(rng, 3, 4, 2)
    mask = np.ones((3, 4, 1), dtype=bool)
    mask[0, 1:] = False
    fns = {
        "sum": lambda: T.tsum(x, axis=1),
        "mean": lambda: T.tmean(x, axis=(0, 2)),
        "max": lambda: T.tmax(x, axis=1, mask=mask),
        "logsumexp": lambda: T.logsumexp(x, axis=1, mask=mask),
    }
    out = fns[reduction]()
    w = rng.normal(size=out.shape)
    assert_grads(lambda: T.tsum(fns[reduction]() * w), [x])


def test_masked_max_and_logsumexp_values():
    x = Tensor([[1.0, 9.0, 3.0]], dtype=np.float64)
    mask = np.array([[True, False, True]])
    assert T.tmax(x, axis=1, mask=mask).data.tolist() == [3.0]
    np.testing.assert_allclose(T.logsumexp(x, axis=1, mask=mask).data, [np.log(np.exp(1) + np.exp(3))])


def test_shape_ops_gradients(f64, rng):
    a, b = leaf(rng, 2, 3), leaf(rng, 2, 2)
    w = rng.normal(size=(3, 5))

    def loss():
        joined = T.concat([a, b], axis=1)  # (2, 5)
        stacked = T.stack([joined, joined * 2.0, T.getitem(joined, (slice(None), slice(None)))], axis=0)
        picked = T.take(stacked.reshape(6, 5), [0, 3, 3], axis=0)
        return T.tsum(picked.transpose(1, 0).transpose() * w)

    assert_grads(loss, [a, b])


def test_permute_matches_numpy_and_inverts(f64, rng):
    x = leaf(rng, 2, 3, 8)
    out = T.permute(x, (2, 3, 4, 2), (0, 2, 1, 3), (2, 4, 6))
    expected = x.data.reshape(2, 3, 4, 2).transpose(0, 2, 1, 3).reshape(2, 4, 6)
    np.testing.assert_array_equal(out.data, expected)
    w = rng.normal(size=(2, 4, 6))
    assert_grads(lambda: T.tsum(T.permute(x, (2, 3, 4, 2), (0, 2, 1, 3), (2, 4, 6)) * w), [x])


def test_concat_shape_error():
    with pytest.raises(ShapeError):
        T.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1)


def test_duplicate_parent_accumulates():
    x = Tensor([3.0], requires_grad=True)
    y = x * x + x
    T.tsum(y).backward()
    assert x.grad.tolist() == [7.0]


def test_shared_subexpression_gradient():
    x = Tensor([2.0], requires_grad=True)
    h = T.exp(x)
    T.tsum(h * h).backward()
    np.testing.assert_allclose(x.grad, [2 * np.exp(4.0)], rtol=1e-6)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_backward_on_constant_raises():
    with pytest.raises(ContractError):
        T.tsum(Tensor(np.ones(3))).backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.tsum(x * 2.0)
    assert not y.requires_grad and y.is_leaf


def test_linear_gradients(f64, rng):
    x, w, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5), leaf(rng, 5)
    g = rng.normal(size=(2, 3, 5))
    assert_grads(lambda: T.tsum(T.linear(x, w, b) * g), [x, w, b])


def test_attention_weights_gradients(f64, rng):
    q, k = leaf(rng, 2, 3, 4), leaf(rng, 2, 5, 4)
    mask = np.ones((2, 1, 5), dtype=bool)
    mask[1, 0, 3:] = False
    g = rng.normal(size=(2, 3, 5))
    assert_grads(lambda: T.tsum(T.attention_weights(q, k, 0.5, mask) * g), [q, k])


def test_layer_norm_values_and_gradients(f64, rng):
    x, gain, bias = leaf(rng, 3, 6), leaf(rng, 6), leaf(rng, 6)
    out = T.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, rtol=1e-4)
    g = rng.normal(size=(3, 6))
    assert_grads(lambda: T.tsum(T.layer_norm(x, gain, bias) * g), [x, gain, bias])


def test_dropout_is_identity_in_eval_and_unbiased_in_training():
    x = Tensor(np.ones((200, 50)))
    assert T.dropout(x, 0.9, None, training=False) is x
    out = T.dropout(x, 0.8, np.random.default_rng(0), training=True).data
    assert set(np.unique(out)) <= {0.0, np.float32(1 / 0.8)}
    assert abs(out.mean() - 1.0) < 0.02
    with pytest.raises(ContractError):
        T.dropout(x, 0.8, None, training=True)


def test_bce_with_logits_matches_formula(f64):
    z = np.array([-3.0, -1.0, 0.0, 2.0, 4.0])
    t = np.array([0.0, 1 / 3, 1.0, 2 / 3, 1.0])
    p = 1 / (1 + np.exp(-z))
    expected = -(t * np.log(p) + (1 - t) * np.log(1 - p))
    np.testing.assert_allclose(T.bce_with_logits(Tensor(z), t).data, expected, rtol=1e-12)


def test_bce_with_logits_extreme_logits_stay_finite(f64):
    out = T.bce_with_logits(Tensor([-1000.0, 1000.0]), [1.0, 0.0]).data
    np.testing.assert_allclose(out, [1000.0, 1000.0])
    with pytest.raises(ContractError):
        T.bce_with_logits(Tensor([0.0]), [1.5])


def test_multi_head_core_gather_matches_explicit_pairs(f64, rng):
    xq, xkv = leaf(rng, 3, 2, 4), leaf(rng, 2, 5, 4)
    params = [leaf(rng, 4, 4), leaf(rng, 4), leaf(rng, 4, 4), leaf(rng, 4), leaf(rng, 4, 4), leaf(rng, 4)]
    mask = np.array([[True, True, False, True, False], [True, True, True, True, True]])
    qi, ki = np.array([0, 2, 1, 0]), np.array([1, 0, 1, 1])
    gathered, _ = T.multi_head_core(xq, xkv, *params, 2, mask, qi, ki)
    explicit, _ = T.multi_head_core(Tensor(xq.data[qi]), Tensor(xkv.data[ki]), *params, 2, mask[ki])
    np.testing.assert_allclose(gathered.data, explicit.data, atol=1e-14)
    g = rng.normal(size=gathered.shape)
    assert_grads(lambda: T.tsum(T.multi_head_core(xq, xkv, *params, 2, mask, qi, ki)[0] * g),
                 [xq, xkv] + params)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_array_serialization_roundtrip(rng, dtype):
    arr = rng.normal(size=(3, 0, 2)).astype(dtype)
    arr2 = rng.normal(size=(4, 5)).astype(dtype)
    buf = io.BytesIO()
    T.write_array(buf, arr)
    T.write_array(buf, arr2)
    buf.seek(0)
    assert T.read_array(buf, dtype).shape == (3, 0, 2)
    np.testing.assert_array_equal(T.read_array(buf, dtype), arr2)


def test_array_serialization_truncated(rng):
    buf = io.BytesIO()
    T.write_array(buf, rng.normal(size=(4,)))
    data = buf.getvalue()[:-3]
    with pytest.raises(ValueError):
        T.read_array(io.BytesIO(data), np.float64)
