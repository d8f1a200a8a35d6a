import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ssft.autograd import (
    BatchNormState,
    Tensor,
    absolute,
    batchnorm2d,
    bce_with_logits,
    conv1x1,
    conv3x3,
    cross_entropy,
    gelu,
    grad_check,
    layernorm,
    linear,
    maxpool2d,
    multi_head_attention,
    no_grad,
    softmax,
)

from .conftest import T


def weighted(out, rng):
    """Scalar probe sum(out * r) with a fixed random cotangent."""
    w = T(rng.normal(size=out.shape))
    return (out * w).sum()


def probe(fn, rng):
    shape_holder = {}

    def f():
        out = fn()
        if "w" not in shape_holder:
            shape_holder["w"] = T(rng.normal(size=out.shape))
        return (out * shape_holder["w"]).sum()

    return f


# ---------------------------------------------------------------- oracles

def naive_conv3x3(x, W, b):
    H, Wd, Cin = x.shape
    Cout = W.shape[3]
    out = np.zeros((H, Wd, Cout))
    for r in range(H):
        for c in range(Wd):
            for o in range(Cout):
                acc = b[o]
                for i in range(3):
                    for j in range(3):
                        rr, cc = r + i - 1, c + j - 1
                        if 0 <= rr < H and 0 <= cc < Wd:
                            for k in range(Cin):
                                acc += x[rr, cc, k] * W[i, j, k, o]
                out[r, c, o] = acc
    return out


def dense_attention(q_in, kv_in, P, heads):
    """Per-head softmax(QK^T / sqrt(d)) V, written with explicit loops over heads."""
    N, Lq, D = q_in.shape
    dh = D // heads
    Q = q_in @ P["q"][0] + P["q"][1]
    K = kv_in @ P["k"][0] + P["k"][1]
    V = kv_in @ P["v"][0] + P["v"][1]
    out = np.zeros((N, Lq, D))
    for n in range(N):
        cols = []
        for h in range(heads):
            s = slice(h * dh, (h + 1) * dh)
            scores = Q[n][:, s] @ K[n][:, s].T / math.sqrt(dh)
            scores = scores - scores.max(axis=1, keepdims=True)
            A = np.exp(scores) / np.exp(scores).sum(axis=1, keepdims=True)
            cols.append(A @ V[n][:, s])
        out[n] = np.concatenate(cols, axis=1)
    return out @ P["out"][0] + P["out"][1]


def attn_params(rng, D):
    return {p: (T(rng.normal(size=(D, D)) / math.sqrt(D)), T(rng.normal(size=D) * 0.1))
            for p in ("q", "k", "v", "out")}


def raw(P):
    return {k: (w.data, b.data) for k, (w, b) in P.items()}


# ---------------------------------------------------------------- linear / conv1x1

def test_linear_identity_and_zero_input(rng):
    x = T(rng.normal(size=(3, 4)))
    assert np.array_equal(linear(x, T(np.eye(4)), T(np.zeros(4))).data, x.data)
    b = T(rng.normal(size=5))
    y = linear(T(np.zeros((3, 4))), T(rng.normal(size=(4, 5))), b)
    assert np.array_equal(y.data, np.broadcast_to(b.data, (3, 5)))


def test_linear_shape_mismatch():
    with pytest.raises(ValueError):
        linear(T(np.zeros((2, 3))), T(np.zeros((4, 5))), T(np.zeros(5)))


def test_linear_gradcheck(rng):
    x, W, b = T(rng.normal(size=(3, 4))), T(rng.normal(size=(4, 5))), T(rng.normal(size=5))
    grad_check(probe(lambda: linear(x, W, b), rng), {"x": x, "W": W, "b": b}, tol=1e-6)


def test_conv1x1_matches_flattened_linear(rng):
    x, W, b = T(rng.normal(size=(2, 3, 3, 4))), T(rng.normal(size=(4, 6))), T(rng.normal(size=6))
    ref = (x.data.reshape(-1, 4) @ W.data + b.data).reshape(2, 3, 3, 6)
    assert np.allclose(conv1x1(x, W, b).data, ref, rtol=0, atol=1e-12)
    assert np.array_equal(conv1x1(x, T(np.eye(4)), T(np.zeros(4))).data, x.data)
    grad_check(probe(lambda: conv1x1(x, W, b), rng), {"x": x, "W": W, "b": b}, tol=1e-6)


# ---------------------------------------------------------------- softmax / gelu

def test_softmax_uniform_and_stable():
    assert np.allclose(softmax(T([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    y = softmax(T([1000.0, 0.0])).data
    assert np.all(np.isfinite(y))
    assert y[0] == pytest.approx(1.0) and y[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_jacobian(rng):
    x = T(rng.normal(size=(4, 5)))
    grad_check(probe(lambda: softmax(x, axis=1), rng), x, tol=1e-6)
    x3 = T(rng.normal(size=(2, 3, 4)))
    grad_check(probe(lambda: softmax(x3, axis=1), rng), x3, tol=1e-6)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_are_distributions(x):
    y = softmax(Tensor(x), axis=-1).data
    assert np.all(y >= 0)
    assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-6)


def test_gelu_values_and_grad():
    assert gelu(T([0.0])).data[0] == 0.0
    assert gelu(T([10.0])).data[0] == pytest.approx(10.0, abs=1e-6)
    x = T([-2.0, -0.5, 0.3, 4.0])
    grad_check(lambda: gelu(x).sum(), x, tol=1e-6)


# ---------------------------------------------------------------- conv3x3

def test_conv3x3_delta_kernel_is_identity(rng):
    x = T(rng.normal(size=(5, 4, 3)))
    W = np.zeros((3, 3, 3, 3))
    W[1, 1] = np.eye(3)
    assert np.array_equal(conv3x3(x, T(W), T(np.zeros(3))).data, x.data)


def test_conv3x3_zero_padding_arithmetic():
    x = T(np.full((4, 4, 1), 2.0))
    out = conv3x3(x, T(np.ones((3, 3, 1, 1))), T(np.zeros(1))).data[..., 0]
    assert out[1, 1] == 9 * 2.0 and out[2, 2] == 9 * 2.0
    assert out[0, 0] == 4 * 2.0 and out[3, 3] == 4 * 2.0
    assert out[0, 1] == 6 * 2.0


@pytest.mark.parametrize("shape", [(5, 5, 2), (1, 1, 1), (3, 7, 4), (8, 8, 4)])
def test_conv3x3_matches_naive_loops(rng, shape):
    H, W_, C = shape
    x, W, b = rng.normal(size=shape), rng.normal(size=(3, 3, C, C)), rng.normal(size=C)
    out = conv3x3(T(x), T(W), T(b)).data
    assert np.max(np.abs(out - naive_conv3x3(x, W, b))) < 1e-12


def test_conv3x3_gradcheck(rng):
    x, W, b = T(rng.normal(size=(2, 4, 5, 3))), T(rng.normal(size=(3, 3, 3, 2))), T(rng.normal(size=2))
    grad_check(probe(lambda: conv3x3(x, W, b), rng), {"x": x, "W": W, "b": b}, tol=1e-6)


# ---------------------------------------------------------------- maxpool

def test_maxpool_identity_and_block():
    x = T(np.arange(12.0).reshape(2, 2, 3))
    assert np.array_equal(maxpool2d(x, 1).data, x.data)
    blk = T(np.array([[1.0, 3.0], [2.0, 0.0]])[:, :, None])
    assert maxpool2d(blk, 2).data.item() == 3.0
    with pytest.raises(ValueError):
        maxpool2d(x, 0)


def test_maxpool_grad_is_one_hot_at_argmax(rng):
    x = T(rng.normal(size=(1, 4, 4, 2)), grad=True)
    out = maxpool2d(x, 2)
    out.sum().backward()
    g = x.grad.reshape(1, 2, 2, 2, 2, 2).transpose(0, 1, 3, 5, 2, 4).reshape(-1, 4)
    assert np.all(g.sum(axis=1) == 1) and np.all((g == 0) | (g == 1))
    grad_check(probe(lambda: maxpool2d(x, 2), rng), x, tol=1e-6)


def test_maxpool_first_index_tie_break():
    x = T(np.ones((2, 2, 1)), grad=True)
    maxpool2d(x, 2).sum().backward()
    assert x.grad[..., 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_maxpool_non_divisible_replicates_edges(rng):
    x = T(rng.normal(size=(5, 3, 2)))
    out = maxpool2d(x, 2)
    assert out.shape == (3, 2, 2)
    padded = np.pad(x.data, ((0, 1), (0, 1), (0, 0)), mode="edge")
    ref = padded.reshape(3, 2, 2, 2, 2).max(axis=(1, 3))
    assert np.array_equal(out.data, ref)
    grad_check(probe(lambda: maxpool2d(x, 2), rng), x, tol=1e-6)


# ---------------------------------------------------------------- normalization

def test_batchnorm_train_standardizes(rng):
    # spread of 10 keeps the eps=1e-5 shrinkage of the variance near 1e-7
    x = T(rng.normal(3.0, 10.0, size=(2, 3, 3, 4)))
    st_ = BatchNormState(4)
    y = batchnorm2d(x, T(np.ones(4)), T(np.zeros(4)), st_, "train").data.reshape(-1, 4)
    assert np.allclose(y.mean(axis=0), 0, atol=1e-6)
    assert np.allclose(y.var(axis=0), 1, atol=1e-6)
    assert np.all(st_.running_mean != 0)


def test_batchnorm_eval_identity(rng):
    x = T(rng.normal(size=(2, 3, 3, 4)))
    y = batchnorm2d(x, T(np.ones(4)), T(np.zeros(4)), BatchNormState(4, eps=0.0), "eval")
    assert np.allclose(y.data, x.data, atol=1e-15)


def test_batchnorm_single_element_rejected():
    with pytest.raises(ValueError):
        batchnorm2d(T(np.zeros((1, 1, 1, 2))), T(np.ones(2)), T(np.zeros(2)), BatchNormState(2), "train")


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batchnorm_gradcheck(rng, mode):
    x = T(rng.normal(size=(2, 3, 3, 2)))
    g, b = T(rng.normal(size=2)), T(rng.normal(size=2))
    st_ = BatchNormState(2)
    st_.running_mean, st_.running_var = rng.normal(size=2), rng.uniform(0.5, 2, size=2)
    grad_check(probe(lambda: batchnorm2d(x, g, b, st_, mode), rng), {"x": x, "g": g, "b": b}, tol=1e-5)


def test_layernorm_properties(rng):
    one, zero = T(np.ones(4)), T(np.zeros(4))
    assert np.array_equal(layernorm(T(np.full((2, 4), 7.0)), one, zero).data, np.zeros((2, 4)))
    x = rng.normal(size=(3, 4))
    a = layernorm(T(x), one, zero).data
    b = layernorm(T(x + 5.0), one, zero).data
    assert np.allclose(a, b, atol=1e-12)


def test_layernorm_gradcheck(rng):
    x, g, b = T(rng.normal(size=(3, 2, 5))), T(rng.normal(size=5)), T(rng.normal(size=5))
    grad_check(probe(lambda: layernorm(x, g, b), rng), {"x": x, "g": g, "b": b}, tol=1e-5)


# ---------------------------------------------------------------- attention

def test_attention_single_key(rng):
    D = 4
    P = attn_params(rng, D)
    kv = T(rng.normal(size=(2, 1, D)))
    out_a = multi_head_attention(T(rng.normal(size=(2, 3, D))), kv, P, 2).data
    out_b = multi_head_attention(T(rng.normal(size=(2, 3, D)) * 10), kv, P, 2).data
    ref = (kv.data @ P["v"][0].data + P["v"][1].data) @ P["out"][0].data + P["out"][1].data
    assert np.allclose(out_a, np.broadcast_to(ref, out_a.shape), atol=1e-12)
    assert np.allclose(out_a, out_b, atol=1e-12)


def test_attention_identical_queries(rng):
    D = 4
    P = attn_params(rng, D)
    q = T(np.repeat(rng.normal(size=(1, 1, D)), 3, axis=1))
    out = multi_head_attention(q, T(rng.normal(size=(1, 4, D))), P, 2).data
    assert np.allclose(out, out[:, :1], atol=1e-14)


@pytest.mark.parametrize("heads,Lq,Lk", [(1, 3, 3), (2, 4, 2), (4, 1, 4), (2, 2, 4)])
def test_attention_matches_dense_oracle(rng, heads, Lq, Lk):
    D = 4
    P = attn_params(rng, D)
    q, kv = rng.normal(size=(2, Lq, D)), rng.normal(size=(2, Lk, D))
    out = multi_head_attention(T(q), T(kv), P, heads).data
    assert np.max(np.abs(out - dense_attention(q, kv, raw(P), heads))) < 1e-10


def test_attention_heads_must_divide():
    with pytest.raises(ValueError):
        multi_head_attention(T(np.zeros((1, 2, 6))), T(np.zeros((1, 2, 6))), {}, 4)


def test_attention_gradcheck(rng):
    D = 4
    P = attn_params(rng, D)
    q, kv = T(rng.normal(size=(2, 3, D))), T(rng.normal(size=(2, 4, D)))
    inputs = {"q": q, "kv": kv}
    for k, (w, b) in P.items():
        inputs[f"{k}.w"], inputs[f"{k}.b"] = w, b
    grad_check(probe(lambda: multi_head_attention(q, kv, P, 2), rng), inputs, tol=1e-6)


# ---------------------------------------------------------------- losses

def test_cross_entropy_values():
    assert cross_entropy(T(np.zeros((3, 4))), [0, 1, 3]).data == pytest.approx(math.log(4), abs=1e-12)
    big = np.array([[200.0, 0.0, 0.0]])
    assert cross_entropy(T(big), [0]).data == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        cross_entropy(T(np.zeros((1, 3))), [3])


def test_cross_entropy_gradient(rng):
    z = T(rng.normal(size=(4, 3)), grad=True)
    t = np.array([0, 2, 1, 2])
    cross_entropy(z, t).backward()
    p = np.exp(z.data) / np.exp(z.data).sum(axis=1, keepdims=True)
    expected = (p - np.eye(3)[t]) / 4
    assert np.allclose(z.grad, expected, atol=1e-14)
    grad_check(lambda: cross_entropy(z, t), z, tol=1e-6)


def test_bce_values_and_grad(rng):
    assert bce_with_logits(T([[0.0]]), [[1.0]]).data == pytest.approx(math.log(2), abs=1e-12)
    z = T([[60.0, -60.0]])
    assert bce_with_logits(z, [[1.0, 0.0]]).data == pytest.approx(0.0, abs=1e-20)
    with pytest.raises(ValueError):
        bce_with_logits(T([[0.0]]), [[0.5]])
    z = T(rng.normal(size=(3, 4)))
    t = (rng.random((3, 4)) > 0.5).astype(float)
    grad_check(lambda: bce_with_logits(z, t), z, tol=1e-6)


# ---------------------------------------------------------------- backward semantics

def test_backward_sum_and_fanout(rng):
    x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))
    x.grad = None
    (x + x).sum().backward()
    assert np.array_equal(x.grad, np.full((2, 3), 2.0))


def test_backward_twice_raises(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(RuntimeError):
        loss.backward()


def test_no_grad_records_nothing(rng):
    x = Tensor(rng.normal(size=3), requires_grad=True)
    with no_grad():
        y = (x * x).sum()
    assert not y.requires_grad


def test_forward_is_deterministic(rng):
    D = 4
    P = attn_params(rng, D)
    q = T(rng.normal(size=(2, 3, D)))
    a = multi_head_attention(q, q, P, 2).data
    b = multi_head_attention(q, q, P, 2).data
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- harness itself

def test_grad_check_square():
    x = T([3.0], grad=True)
    (x * x).sum().backward()
    assert x.grad[0] == pytest.approx(6.0, abs=1e-6)
    rep = grad_check(lambda: (x * x).sum(), x)
    assert rep.max_abs_err < 1e-6 and rep.checked == 1


def test_grad_check_flags_kink():
    x = T([1e-5, 0.7, -0.4])
    rep = grad_check(lambda: absolute(x).sum(), x, tol=1e-6)
    assert rep.flagged == [("x", 0)]
    assert rep.checked == 2


def test_grad_check_samples_subset(rng):
    x = T(rng.normal(size=100))
    rep = grad_check(lambda: (x * x).sum(), x, n_coords=32, seed=5)
    assert rep.checked == 32


def test_grad_check_detects_wrong_gradient(rng):
    from ssft.autograd.tensor import make_node

    x = T(rng.normal(size=4))

    def bad_square(t):
        return make_node(t.data ** 2, (t,), lambda g: (g * 3 * t.data,))

    with pytest.raises(AssertionError):
        grad_check(lambda: bad_square(x).sum(), x, tol=1e-6)
