import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import conv_loop_oracle, numeric_grad, rel_error
from xray_ensemble.nn import (
    ShapeError,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    dropout,
    maxpool2d,
    maxpool2d_backward,
    relu,
    relu_backward,
    softmax,
)
from xray_ensemble.nn.layers import dropout_backward


# conv ----------------------------------------------------------------------


def test_conv_ones_valid():
    out = conv2d_forward(np.ones((3, 3, 1)), np.ones((2, 2, 1, 1)), np.zeros(1), "valid")
    assert out.shape == (2, 2, 1)
    np.testing.assert_array_equal(out[..., 0], np.full((2, 2), 4.0))


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(6, 5, 1))
    out = conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(out, x)


def test_conv_matches_loop_oracle_5x5(rng):
    x = rng.normal(size=(5, 5, 1))
    k = rng.normal(size=(3, 3, 1, 2))
    b = rng.normal(size=2)
    for padding in ("same", "valid"):
        np.testing.assert_allclose(conv2d_forward(x, k, b, padding), conv_loop_oracle(x, k, b, padding),
                                   rtol=1e-12, atol=1e-12)


def test_conv_same_even_kernel_padding(rng):
    # even kernels put the extra pad row/column at the bottom/right
    x = rng.integers(-4, 5, size=(4, 5, 2)).astype(np.float64)
    k = rng.integers(-4, 5, size=(2, 2, 2, 3)).astype(np.float64)
    b = np.zeros(3)
    np.testing.assert_array_equal(conv2d_forward(x, k, b), conv_loop_oracle(x, k, b))


def test_conv_batched_equals_per_image(rng):
    x = rng.normal(size=(3, 6, 6, 2))
    k = rng.normal(size=(3, 3, 2, 4))
    b = rng.normal(size=4)
    batched = conv2d_forward(x, k, b)
    for i in range(3):
        np.testing.assert_allclose(batched[i], conv2d_forward(x[i], k, b), rtol=1e-12)


def test_conv_shape_errors(rng):
    with pytest.raises(ShapeError):
        conv2d_forward(rng.normal(size=(5, 5, 2)), rng.normal(size=(3, 3, 1, 2)), np.zeros(2))
    with pytest.raises(ShapeError):
        conv2d_forward(rng.normal(size=(5, 5, 1)), rng.normal(size=(3, 3, 1, 2)), np.zeros(3))


def test_conv_backward_zero_upstream(rng):
    x = rng.normal(size=(5, 5, 2))
    k = rng.normal(size=(3, 3, 2, 3))
    gx, gk, gb = conv2d_backward(np.zeros((5, 5, 3)), x, k)
    assert not gx.any() and not gk.any() and not gb.any()


@pytest.mark.parametrize("padding", ["same", "valid"])
def test_conv_backward_matches_finite_differences(rng, padding):
    x = rng.normal(size=(4, 4, 1))
    k = rng.normal(size=(2, 2, 1, 1))
    b = rng.normal(size=1)
    w = rng.normal(size=conv2d_forward(x, k, b, padding).shape)

    def f():
        return float(np.sum(conv2d_forward(x, k, b, padding) * w))

    gx, gk, gb = conv2d_backward(w, x, k, padding)
    assert rel_error(gk, numeric_grad(f, k)) < 1e-4
    assert rel_error(gx, numeric_grad(f, x)) < 1e-4
    assert rel_error(gb, numeric_grad(f, b)) < 1e-4


def test_conv_backward_locality(rng):
    x = rng.normal(size=(7, 7, 1))
    k = rng.normal(size=(3, 3, 1, 1)) + 5.0  # no zero taps
    g = np.zeros((7, 7, 1))
    g[3, 4, 0] = 1.0
    gx, _, _ = conv2d_backward(g, x, k)
    nz = np.argwhere(gx[..., 0] != 0)
    assert nz[:, 0].min() >= 2 and nz[:, 0].max() <= 4
    assert nz[:, 1].min() >= 3 and nz[:, 1].max() <= 5
    assert len(nz) == 9


# relu ----------------------------------------------------------------------


def test_relu_values():
    np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])
    x = np.array([0.5, 3.0, 1e-9])
    np.testing.assert_array_equal(relu(x), x)


def test_relu_backward_finite_differences(rng):
    x = rng.normal(size=(20,))
    x[np.abs(x) < 1e-3] = 0.5
    w = rng.normal(size=20)
    num = numeric_grad(lambda: float(np.sum(relu(x) * w)), x)
    np.testing.assert_allclose(relu_backward(w, x), num, rtol=1e-6, atol=1e-8)


# pooling -------------------------------------------------------------------


def test_pool_block():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
    assert maxpool2d(x)[0, 0, 0] == 4.0


def test_pool_constant_and_odd_size():
    out = maxpool2d(np.full((5, 7, 2), 3.0))
    assert out.shape == (2, 3, 2)
    assert np.all(out == 3.0)


def _pool_backward_enumerated(grad, x, window=2):
    """Route each window's gradient to its first (row-major) maximum."""
    out = np.zeros_like(x)
    ho, wo = x.shape[0] // window, x.shape[1] // window
    for i in range(ho):
        for j in range(wo):
            for c in range(x.shape[2]):
                block = x[i * window:(i + 1) * window, j * window:(j + 1) * window, c]
                flat = block.ravel()
                best = max(range(len(flat)), key=lambda t: (flat[t], -t))
                r, s = divmod(best, window)
                out[i * window + r, j * window + s, c] += grad[i, j, c]
    return out


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 9), st.integers(2, 9), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_pool_backward_matches_enumeration(h, w, c, seed):
    r = np.random.default_rng(seed)
    x = r.integers(0, 3, size=(h, w, c)).astype(np.float64)  # many ties
    g = r.normal(size=(h // 2, w // 2, c))
    np.testing.assert_array_equal(maxpool2d_backward(g, x), _pool_backward_enumerated(g, x))


def test_pool_backward_tie_goes_to_first():
    x = np.ones((2, 2, 1))
    g = maxpool2d_backward(np.full((1, 1, 1), 5.0), x)
    np.testing.assert_array_equal(g[..., 0], [[5.0, 0.0], [0.0, 0.0]])


# dense ---------------------------------------------------------------------


def test_dense_identity_and_hand_values(rng):
    x = rng.normal(size=4)
    np.testing.assert_array_equal(dense_forward(x, np.eye(4), np.zeros(4)), x)
    out = dense_forward(np.array([1.0, 1.0]), np.array([[1.0, 2.0], [3.0, 4.0]]), np.zeros(2))
    np.testing.assert_array_equal(out, [4.0, 6.0])


def test_dense_backward_finite_differences(rng):
    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(5, 4))
    b = rng.normal(size=4)
    up = rng.normal(size=(3, 4))

    def f():
        return float(np.sum(dense_forward(x, w, b) * up))

    gx, gw, gb = dense_backward(up, x, w)
    assert rel_error(gx, numeric_grad(f, x)) < 1e-4
    assert rel_error(gw, numeric_grad(f, w)) < 1e-4
    assert rel_error(gb, numeric_grad(f, b)) < 1e-4


# dropout -------------------------------------------------------------------


def test_dropout_inference_and_rate_zero(rng):
    x = rng.normal(size=(10, 10))
    out, mask = dropout(x, 0.7, rng, training=False)
    assert out is x and mask is None
    out, _ = dropout(x, 0.0, rng, training=True)
    np.testing.assert_array_equal(out, x)


def test_dropout_statistics():
    x = np.ones(100_000)
    out, mask = dropout(x, 0.7, np.random.default_rng(0), training=True)
    kept = out != 0
    assert 0.29 <= kept.mean() <= 0.31
    np.testing.assert_allclose(out[kept], 1.0 / 0.3)
    np.testing.assert_array_equal(dropout_backward(np.ones_like(x), mask), out)


def test_dropout_rejects_bad_rate(rng):
    with pytest.raises(ValueError):
        dropout(np.ones(3), 1.0, rng)


# softmax -------------------------------------------------------------------


def test_softmax_values():
    np.testing.assert_allclose(softmax(np.array([0.0, 0.0])), [0.5, 0.5])
    e = np.e
    np.testing.assert_allclose(softmax(np.array([1.0, 0.0])), [e / (e + 1), 1 / (e + 1)], atol=1e-12)
    np.testing.assert_allclose(softmax(np.array([1.0, 0.0])), [0.7311, 0.2689], atol=1e-4)


@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-500, 500))
def test_softmax_shift_invariant(a, b, c):
    p = softmax(np.array([a, b]))
    q = softmax(np.array([a + c, b + c]))
    np.testing.assert_allclose(p, q, atol=1e-9)
    assert abs(p.sum() - 1.0) < 1e-12


def test_softmax_large_logits_finite():
    p = softmax(np.array([[1000.0, -1000.0]]))
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p, [[1.0, 0.0]])
