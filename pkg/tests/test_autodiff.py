import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import gradcheck, numeric_grad, rel_error
from myot2.autodiff import Graph, ParamStore, Tensor, adam_step, backward, kaiming_init, ops


# --- conv2d -----------------------------------------------------------------

def test_conv2d_counts_overlapping_ones():
    out = ops.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), 1, 1)
    assert out.shape == (1, 1, 4, 4)
    assert out.data[0, 0, 0, 0] == 4.0
    assert out.data[0, 0, 1, 1] == 9.0
    assert out.data[0, 0, 0, 1] == 6.0


def test_conv2d_identity_kernel(rng):
    x = rng.normal(size=(1, 1, 4, 4))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(ops.conv2d(Tensor(x), Tensor(k), 1, 1).data, x)


def test_conv2d_gradient(rng):
    x, k = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3))
    assert gradcheck(lambda a, b: ops.conv2d(a, b, 1, 1), [x, k]) < 1e-6


@pytest.mark.parametrize("k,stride,pad,h", [(1, 1, 0, 6), (3, 1, 0, 7), (3, 2, 1, 9), (5, 1, 2, 6)])
def test_conv2d_gradient_variants(rng, k, stride, pad, h):
    x, w, b = rng.normal(size=(2, 2, h, h)), rng.normal(size=(3, 2, k, k)), rng.normal(size=3)
    assert gradcheck(lambda a, c, d: ops.conv2d(a, c, stride, pad, d), [x, w, b]) < 1e-6


def test_conv2d_errors():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    with pytest.raises(ValueError):
        ops.conv2d(x, Tensor(np.zeros((1, 3, 3, 3))), 1, 1)  # channel mismatch
    with pytest.raises(ValueError):
        ops.conv2d(x, Tensor(np.zeros((1, 2, 2, 2))), 1, 0)  # even kernel
    with pytest.raises(ValueError):
        ops.conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), 2, 0)  # (4-3)/2 not exact


def test_conv2d_matches_direct_loop(rng):
    x, w = rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3))
    out = ops.conv2d(Tensor(x), Tensor(w), 1, 1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 5, 5))
    for o in range(3):
        for i in range(5):
            for j in range(5):
                ref[0, o, i, j] = (xp[0, :, i:i + 3, j:j + 3] * w[o]).sum()
    np.testing.assert_allclose(out, ref, atol=1e-12)


# --- matmul / linear / bmm --------------------------------------------------

def test_matmul_examples(rng):
    x = rng.normal(size=(2, 3))
    np.testing.assert_array_equal(ops.matmul(Tensor(np.eye(2)), Tensor(x)).data, x)
    out = ops.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_gradient(rng):
    assert gradcheck(ops.matmul, [rng.normal(size=(5, 4)), rng.normal(size=(4, 3))]) < 1e-6


def test_matmul_shape_error():
    with pytest.raises(ValueError):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_linear_and_bmm_gradients(rng):
    assert gradcheck(ops.linear, [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)),
                                  rng.normal(size=5)]) < 1e-6
    assert gradcheck(ops.bmm, [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2))]) < 1e-6


# --- normalization ------------------------------------------------------------

def test_layer_norm_examples():
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    np.testing.assert_array_equal(ops.layer_norm(Tensor(np.full((2, 3), 7.0)), one, zero).data, 0.0)
    out = ops.layer_norm(Tensor([1.0, 2.0, 3.0]), one, zero, eps=1e-14).data
    np.testing.assert_allclose(out, [-math.sqrt(1.5), 0.0, math.sqrt(1.5)], atol=1e-12)


def test_layer_norm_gradient(rng):
    assert gradcheck(lambda x, g, b: ops.layer_norm(x, g, b),
                     [rng.normal(size=(2, 3, 6)), rng.normal(size=6), rng.normal(size=6)]) < 1e-6


def test_layer_norm_mismatch():
    with pytest.raises(ValueError):
        ops.layer_norm(Tensor(np.zeros((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


def test_batch_norm_examples():
    g, b = Tensor(np.ones(2)), Tensor(np.array([0.5, -1.0]))
    out = ops.batch_norm(Tensor(np.full((2, 2, 3, 3), 4.0)), g, b)
    np.testing.assert_array_equal(out.data[:, 0], 0.5)
    np.testing.assert_array_equal(out.data[:, 1], -1.0)
    # one channel holding {1, 3}: mean 2, population sd 1
    x = Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1, 1))
    out = ops.batch_norm(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), eps=1e-14)
    np.testing.assert_allclose(out.data.ravel(), [-1.0, 1.0], atol=1e-12)


def test_batch_norm_gradient_and_error(rng):
    assert gradcheck(lambda x, g, b: ops.batch_norm(x, g, b),
                     [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=3), rng.normal(size=3)]) < 1e-6
    with pytest.raises(ValueError):
        ops.batch_norm(Tensor(np.zeros((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


# --- activations -------------------------------------------------------------

def test_relu_softmax_dropout_examples(rng):
    np.testing.assert_array_equal(ops.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])
    np.testing.assert_array_equal(ops.softmax_lastaxis(Tensor(np.zeros(4))).data, 0.25)
    x = Tensor(rng.normal(size=(3, 5)))
    assert ops.dropout(x, 0.5, seed=1, training=False) is x
    kept = ops.dropout(Tensor(np.ones((200, 200))), 0.5, seed=1, training=True).data
    assert set(np.unique(kept)) <= {0.0, 2.0}
    with pytest.raises(ValueError):
        ops.dropout(x, 1.0, seed=0, training=True)
    with pytest.raises(ValueError):
        ops.dropout(x, -0.1, seed=0, training=True)


def test_elementwise_gradients(rng):
    a = rng.uniform(0.5, 2.0, size=(3, 4))
    b = rng.uniform(0.5, 2.0, size=(3, 4))
    bias = rng.normal(size=4)
    for fn in (ops.add, ops.sub, ops.mul, ops.div):
        assert gradcheck(fn, [a, b]) < 1e-6
        assert gradcheck(fn, [a, bias + 3.0]) < 1e-6
    for fn in (ops.exp, ops.log, ops.square, ops.sigmoid, ops.neg, ops.softmax_lastaxis):
        assert gradcheck(fn, [a]) < 1e-6
    x = rng.normal(size=(3, 4))
    x[np.abs(x) < 0.1] = 0.5  # keep away from the kink
    assert gradcheck(ops.relu, [x]) < 1e-6
    assert gradcheck(lambda t: ops.dropout(t, 0.3, 5, True), [x]) < 1e-6


def test_shape_op_gradients(rng):
    x = rng.normal(size=(2, 3, 4))
    assert gradcheck(lambda t: ops.reshape(t, (6, 4)), [x]) < 1e-6
    assert gradcheck(lambda t: ops.transpose(t, (2, 0, 1)), [x]) < 1e-6
    assert gradcheck(lambda t: ops.sum(t, axis=1), [x]) < 1e-6
    assert gradcheck(lambda t: ops.mean(t, axis=(0, 2)), [x]) < 1e-6
    assert gradcheck(lambda a, b: ops.concat([a, b], axis=1), [x, rng.normal(size=(2, 2, 4))]) < 1e-6
    assert gradcheck(lambda t: ops.avg_pool2d(t, 2), [rng.normal(size=(1, 2, 4, 6))]) < 1e-6


def test_softmax_cross_entropy_gradient(rng):
    labels = rng.integers(0, 4, size=(2, 3, 3))
    assert gradcheck(lambda t: ops.softmax_cross_entropy(t, labels),
                     [rng.normal(size=(2, 4, 3, 3))]) < 1e-6


@given(st.integers(1, 5), st.integers(2, 7), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(rows, cols, seed):
    x = np.random.default_rng(seed).normal(scale=20.0, size=(rows, cols))
    out = ops.softmax_lastaxis(Tensor(x)).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


# --- bilinear resize -----------------------------------------------------------

def _direct_bilinear(img, oh, ow):
    h, w = img.shape
    out = np.zeros((oh, ow))
    for i in range(oh):
        for j in range(ow):
            y = min(max((i + 0.5) * h / oh - 0.5, 0.0), h - 1.0)
            x = min(max((j + 0.5) * w / ow - 0.5, 0.0), w - 1.0)
            y0, x0 = int(math.floor(y)), int(math.floor(x))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            dy, dx = y - y0, x - x0
            out[i, j] = ((1 - dy) * (1 - dx) * img[y0, x0] + (1 - dy) * dx * img[y0, x1]
                         + dy * (1 - dx) * img[y1, x0] + dy * dx * img[y1, x1])
    return out


def test_bilinear_examples(rng):
    x = Tensor(rng.normal(size=(1, 2, 5, 5)))
    assert ops.bilinear_resize(x, 5, 5) is x
    const = ops.bilinear_resize(Tensor(np.full((1, 1, 3, 3), 2.5)), 7, 4).data
    np.testing.assert_allclose(const, 2.5, atol=1e-15)
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    out = ops.bilinear_resize(Tensor(img[None, None]), 4, 4).data[0, 0]
    np.testing.assert_allclose(out, _direct_bilinear(img, 4, 4), atol=1e-15)
    # frozen values from the half-pixel formula
    np.testing.assert_allclose(out[0], [0.0, 0.25, 0.75, 1.0])
    np.testing.assert_allclose(out[1], [0.5, 0.75, 1.25, 1.5])


def test_bilinear_gradient(rng):
    assert gradcheck(lambda t: ops.bilinear_resize(t, 7, 3), [rng.normal(size=(1, 2, 4, 5))]) < 1e-6


# --- attention -----------------------------------------------------------------

def _attn_params(rng, d):
    return {k: rng.normal(size=(d, d)) for k in ("wq", "wk", "wv", "wo")} | {"bo": rng.normal(size=d)}


def test_attention_single_token(rng):
    p = {k: Tensor(v) for k, v in _attn_params(rng, 4).items()}
    x = Tensor(rng.normal(size=(1, 1, 4)))
    out, w = ops.multi_head_attention(x, 2, p, return_weights=True)
    np.testing.assert_array_equal(w, 1.0)
    ref = x.data @ p["wv"].data @ p["wo"].data + p["bo"].data
    np.testing.assert_allclose(out.data, ref, atol=1e-12)


def test_attention_identical_tokens(rng):
    p = {k: Tensor(v) for k, v in _attn_params(rng, 4).items()}
    x = Tensor(np.repeat(rng.normal(size=(1, 1, 4)), 5, axis=1))
    out, w = ops.multi_head_attention(x, 2, p, return_weights=True)
    np.testing.assert_allclose(out.data - out.data[:, :1], 0.0, atol=1e-12)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)


def test_attention_gradient(rng):
    vals = _attn_params(rng, 4)
    names = list(vals)

    def build(x, *ps):
        return ops.multi_head_attention(x, 2, dict(zip(names, ps)))

    assert gradcheck(build, [rng.normal(size=(1, 3, 4))] + [vals[k] for k in names]) < 1e-5


def test_attention_divisibility():
    with pytest.raises(ValueError):
        ops.multi_head_attention(Tensor(np.zeros((1, 2, 5))), 2, {})


# --- tape semantics --------------------------------------------------------------

def test_backward_square():
    w = Tensor(np.array(3.0), requires_grad=True)
    with Graph() as g:
        loss = ops.mul(w, w)
    assert backward(g, loss)[w] == pytest.approx(6.0)


def test_backward_requires_scalar():
    w = Tensor(np.ones(2), requires_grad=True)
    with Graph() as g:
        y = ops.mul(w, 2.0)
    with pytest.raises(ValueError):
        backward(g, y)


def test_chain_equals_composed_jacobians(rng):
    x0 = rng.normal(size=(3, 4))
    w0 = rng.normal(size=(4, 2))
    x = Tensor(x0, requires_grad=True)
    w = Tensor(w0, requires_grad=True)
    with Graph() as g:
        y = ops.sigmoid(ops.matmul(x, w))
        loss = ops.sum(y)
    gx = backward(g, loss)[x]
    # manual chain: d/dx sum(sigmoid(xw)) = (s(1-s)) @ w.T
    s = 1 / (1 + np.exp(-(x0 @ w0)))
    np.testing.assert_allclose(gx, (s * (1 - s)) @ w0.T, atol=1e-12)
    num = numeric_grad(lambda: float(ops.sigmoid(ops.matmul(x, w)).data.sum()), x.data)
    assert rel_error(gx, num) < 1e-6


def test_nonfinite_is_an_error():
    with pytest.raises(FloatingPointError):
        ops.log(Tensor(np.array([0.0])))
    with pytest.raises(FloatingPointError):
        ops.exp(Tensor(np.array([1000.0])))


def test_every_parameter_gets_a_gradient(rng):
    store = ParamStore(seed=0)
    a = store.add("a", (3, 2))
    store.add("unused", (2,))
    with Graph() as g:
        loss = ops.sum(ops.matmul(Tensor(rng.normal(size=(4, 3))), a))
    grads = store.collect(backward(g, loss))
    assert set(grads) == {"a", "unused"}
    assert grads["a"].shape == (3, 2)
    np.testing.assert_array_equal(grads["unused"], 0.0)


# --- Adam and init --------------------------------------------------------------

def test_adam_first_step_moves_by_lr():
    store = ParamStore(seed=0)
    p = store.add("w", (3,), init="constant", value=1.0)
    adam_step(store, {"w": np.array([0.3, -2.0, 1e-3])}, lr=1e-3)
    np.testing.assert_allclose(p.data, [1 - 1e-3, 1 + 1e-3, 1 - 1e-3], atol=1e-8)
    assert store.state["w"].step == 1


def test_adam_decreases_quadratic():
    store = ParamStore(seed=0)
    p = store.add("w", (1,), init="constant", value=2.0)
    losses = []
    for _ in range(10):
        with Graph() as g:
            loss = ops.sum(ops.square(p))
        losses.append(loss.item())
        adam_step(store, store.collect(backward(g, loss)), lr=0.1)
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_adam_missing_gradient():
    store = ParamStore(seed=0)
    store.add("w", (1,))
    with pytest.raises(KeyError):
        adam_step(store, {})


def test_param_store_names_unique():
    store = ParamStore(seed=0)
    store.add("w", (2,))
    with pytest.raises(KeyError):
        store.add("w", (2,))


def test_kaiming():
    assert math.sqrt(2 / 2) == 1.0
    big = kaiming_init((100_000,), fan_in=8, seed=3).data
    assert abs(big.std() - 0.5) / 0.5 < 0.02
    np.testing.assert_array_equal(kaiming_init((4, 4), 2, 7).data, kaiming_init((4, 4), 2, 7).data)
    with pytest.raises(ValueError):
        kaiming_init((2,), 0, 0)


def test_kaiming_target_std_fan_in_2():
    x = kaiming_init((200_000,), fan_in=2, seed=0).data
    assert abs(x.std() - 1.0) < 0.01
