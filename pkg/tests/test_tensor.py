import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from udcnet import tensor as T
from udcnet.tensor import AutogradError, ShapeError, Tensor

from oracles import bilinear_direct, conv2d_loops, depthwise_loops, gradcheck, leaf

TOL = 1e-5


# ---------------------------------------------------------------- forward


def test_conv_matches_loops_exactly_on_integers(rng):
    x = rng.integers(-5, 6, size=(2, 3, 7, 6)).astype(np.float64)
    w = rng.integers(-3, 4, size=(4, 3, 3, 3)).astype(np.float64)
    b = rng.integers(-3, 4, size=4).astype(np.float64)
    for stride, pad in [(1, 0), (1, 1), (2, 1), (2, 0)]:
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
        np.testing.assert_array_equal(got, conv2d_loops(x, w, b, stride, pad))


def test_conv_single_pixel_closed_form():
    # 1x1 conv is a per-pixel matrix product
    x = np.arange(12, dtype=np.float64).reshape(1, 3, 2, 2)
    w = np.array([[1.0, 2.0, 3.0]]).reshape(1, 3, 1, 1)
    got = T.conv2d(Tensor(x), Tensor(w)).data
    np.testing.assert_array_equal(got[0, 0], x[0, 0] + 2 * x[0, 1] + 3 * x[0, 2])


def test_depthwise_matches_loops_exactly(rng):
    x = rng.integers(-5, 6, size=(2, 4, 8, 7)).astype(np.float64)
    w = rng.integers(-3, 4, size=(4, 1, 3, 3)).astype(np.float64)
    for stride, pad in [(1, 1), (2, 1), (1, 0)]:
        got = T.depthwise_conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad).data
        np.testing.assert_array_equal(got, depthwise_loops(x, w, stride, pad))


def test_depthwise_rectangular_kernels(rng):
    x = rng.integers(-4, 5, size=(1, 2, 12, 12)).astype(np.float64)
    for shape in [(2, 1, 1, 11), (2, 1, 11, 1)]:
        w = rng.integers(-2, 3, size=shape).astype(np.float64)
        np.testing.assert_array_equal(T.depthwise_conv2d(Tensor(x), Tensor(w)).data, depthwise_loops(x, w))


@pytest.mark.parametrize("scale", [2, 0.5])
def test_bilinear_matches_direct_formula(rng, scale):
    x = rng.integers(-8, 9, size=(2, 3, 6, 8)).astype(np.float64)
    ho, wo = int(6 * scale), int(8 * scale)
    np.testing.assert_array_equal(T.bilinear_resize(Tensor(x), scale).data, bilinear_direct(x, ho, wo))


def test_bilinear_preserves_constants():
    x = np.full((1, 2, 5, 7), 0.3)
    np.testing.assert_allclose(T.bilinear_resize(Tensor(x), 2).data, 0.3, rtol=0, atol=1e-15)


def test_bilinear_rejects_other_scales():
    with pytest.raises(ValueError):
        T.bilinear_resize(Tensor(np.zeros((1, 1, 4, 4))), 3)


def test_activations_forward():
    x = np.array([-2.0, -0.5, 0.0, 0.5, 7.0])
    t = Tensor(x)
    np.testing.assert_array_equal(T.relu(t).data, np.maximum(x, 0))
    np.testing.assert_array_equal(T.activation(t, "relu6").data, np.clip(x, 0, 6))
    np.testing.assert_allclose(T.sigmoid(t).data, 1 / (1 + np.exp(-x)), rtol=1e-15)
    np.testing.assert_allclose(T.tanh(t).data, np.tanh(x), rtol=1e-15)
    with pytest.raises(ValueError):
        T.activation(t, "gelu")


def test_pools_forward(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    t = Tensor(x)
    np.testing.assert_allclose(T.global_pool(t, "avg").data, x.mean(axis=(2, 3), keepdims=True))
    np.testing.assert_array_equal(T.global_pool(t, "max").data, x.max(axis=(2, 3), keepdims=True))
    np.testing.assert_allclose(T.channel_pool(t, "avg").data, x.mean(axis=1, keepdims=True))
    np.testing.assert_array_equal(T.channel_pool(t, "max").data, x.max(axis=1, keepdims=True))


def test_batch_norm_training_normalises(rng):
    x = rng.standard_normal((4, 3, 5, 5)) * 3 + 2
    gamma, beta = Tensor(np.ones(3)), Tensor(np.zeros(3))
    rm, rv = np.zeros(3), np.ones(3)
    y = T.batch_norm(Tensor(x), gamma, beta, rm, rv, training=True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, rtol=1e-4)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))


def test_batch_norm_inference_uses_running_stats():
    x = np.full((1, 2, 2, 2), 5.0)
    y = T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), np.array([1.0, 5.0]),
                     np.array([4.0, 1.0]), training=False, eps=0.0).data
    np.testing.assert_allclose(y[0, 0], 2.0)
    np.testing.assert_allclose(y[0, 1], 0.0)


# --------------------------------------------------------------- gradients


def test_grad_conv(rng):
    x, w, b = leaf(rng, 2, 3, 6, 5), leaf(rng, 4, 3, 3, 3), leaf(rng, 4)
    for stride, pad in [(1, 1), (2, 1), (1, 0)]:
        assert gradcheck(lambda: T.conv2d(x, w, b, stride=stride, padding=pad), [x, w, b]) < TOL


def test_grad_depthwise(rng):
    x, w, b = leaf(rng, 2, 4, 6, 6), leaf(rng, 4, 1, 3, 3), leaf(rng, 4)
    for stride in (1, 2):
        assert gradcheck(lambda: T.depthwise_conv2d(x, w, stride=stride, padding=1, bias=b), [x, w, b]) < TOL


@pytest.mark.parametrize("scale", [2, 0.5])
def test_grad_bilinear(rng, scale):
    x = leaf(rng, 2, 3, 4, 6)
    assert gradcheck(lambda: T.bilinear_resize(x, scale), [x]) < TOL


@pytest.mark.parametrize("training", [True, False])
def test_grad_batch_norm(rng, training):
    x, g, b = leaf(rng, 2, 3, 4, 4), leaf(rng, 3), leaf(rng, 3)
    rm, rv = rng.standard_normal(3), rng.random(3) + 0.5

    def f():
        return T.batch_norm(x, g, b, rm.copy(), rv.copy(), training)

    assert gradcheck(f, [x, g, b]) < TOL


@pytest.mark.parametrize("kind", ["relu", "relu6", "sigmoid", "tanh"])
def test_grad_activations(rng, kind):
    x = leaf(rng, 2, 3, 4, 4, scale=4.0)
    assert gradcheck(lambda: T.activation(x, kind), [x]) < TOL


def test_grad_elementwise(rng):
    a, b = leaf(rng, 2, 3, 4, 4), leaf(rng, 2, 3, 4, 4)
    b.data += np.sign(b.data) * 0.5  # keep away from zero for division
    for op in ("add", "sub", "mul", "div"):
        assert gradcheck(lambda: T.elementwise(a, b, op), [a, b]) < TOL
    assert gradcheck(lambda: T.square(a) * 3.0 - 1.5, [a]) < TOL
    assert gradcheck(lambda: T.absolute(a), [a]) < TOL
    assert gradcheck(lambda: 2.0 - a / 4.0, [a]) < TOL


def test_grad_shape_ops(rng):
    a, b = leaf(rng, 2, 2, 4, 5), leaf(rng, 2, 3, 4, 5)
    assert gradcheck(lambda: T.concat_channels([a, b, a]), [a, b]) < TOL
    assert gradcheck(lambda: T.crop(b, 1, 2, 3, 2), [b]) < TOL
    g = leaf(rng, 2, 3, 1, 1)
    assert gradcheck(lambda: T.expand(g, (2, 3, 4, 5)), [g]) < TOL


@pytest.mark.parametrize("mode", ["avg", "max"])
def test_grad_pools(rng, mode):
    x = leaf(rng, 2, 4, 4, 4)
    assert gradcheck(lambda: T.global_pool(x, mode), [x]) < TOL
    assert gradcheck(lambda: T.channel_pool(x, mode), [x]) < TOL


def test_grad_reduce_and_clip(rng):
    x = leaf(rng, 2, 3, 4, 4)
    assert gradcheck(lambda: T.reduce(x, "mean"), [x]) < TOL
    assert gradcheck(lambda: T.reduce(x, "sum"), [x]) < TOL
    assert gradcheck(lambda: T.clip(x, -0.5, 0.7), [x]) < TOL


def test_max_pool_ties_split_gradient():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    T.backward(T.reduce(T.global_pool(x, "max"), "sum"))
    np.testing.assert_allclose(x.grad, 0.25)


def test_float32_grad_close_to_float64(rng):
    x64, w64 = leaf(rng, 1, 2, 5, 5), leaf(rng, 3, 2, 3, 3)
    x32 = Tensor(x64.data.astype(np.float32), requires_grad=True)
    w32 = Tensor(w64.data.astype(np.float32), requires_grad=True)
    for x, w in ((x64, w64), (x32, w32)):
        T.backward(T.reduce(T.tanh(T.conv2d(x, w, padding=1)), "mean"))
    assert x32.grad.dtype == np.float32
    np.testing.assert_allclose(x32.grad, x64.grad, rtol=1e-3, atol=1e-6)
    np.testing.assert_allclose(w32.grad, w64.grad, rtol=1e-3, atol=1e-6)


# ----------------------------------------------------------- graph rules


def test_gradients_accumulate(rng):
    x = leaf(rng, 1, 1, 2, 2)
    T.backward(T.reduce(x * 2.0, "sum"))
    T.backward(T.reduce(x * 3.0, "sum"))
    np.testing.assert_allclose(x.grad, 5.0)


def test_shared_subexpression(rng):
    x = leaf(rng, 1, 2, 3, 3)
    y = x * x
    T.backward(T.reduce(y + y, "sum"))
    np.testing.assert_allclose(x.grad, 4 * x.data)


def test_second_backward_on_same_graph_fails(rng):
    x = leaf(rng, 1, 1, 2, 2)
    loss = T.reduce(x * x, "sum")
    T.backward(loss)
    with pytest.raises(AutogradError):
        T.backward(loss)


def test_backward_needs_scalar(rng):
    x = leaf(rng, 1, 1, 2, 2)
    with pytest.raises(AutogradError):
        T.backward(x * 2.0)


def test_backward_without_grad_fails():
    with pytest.raises(AutogradError):
        T.backward(T.reduce(Tensor(np.ones((1, 1, 2, 2))), "sum"))


def test_no_grad_records_nothing(rng):
    x = leaf(rng, 1, 1, 2, 2)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_unused_leaf_gets_zero_grad(rng):
    x, unused = leaf(rng, 1, 1, 2, 2), leaf(rng, 3)
    T.backward(T.reduce(x, "sum"), leaves=[x, unused])
    np.testing.assert_array_equal(unused.grad, 0.0)


def test_shape_errors_name_the_dimension():
    with pytest.raises(ShapeError, match="dimension 1"):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 2, 3, 3))))
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 3))))
    with pytest.raises(ShapeError):
        T.concat_channels([Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 2)))])


def test_count_ops_reports_conv_flops():
    seen = []
    with T.count_ops(lambda name, f: seen.append((name, f))):
        T.conv2d(Tensor(np.zeros((1, 3, 256, 256))), Tensor(np.zeros((16, 3, 3, 3))), padding=1)
    assert seen == [("conv2d", 2 * 9 * 3 * 16 * 256 * 256)]


# ---------------------------------------------------------------- properties

small = st.integers(min_value=1, max_value=3)


@settings(max_examples=25, deadline=None)
@given(n=small, ci=small, co=small, h=st.integers(3, 7), w=st.integers(3, 7), seed=st.integers(0, 2**16),
       a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_conv_is_linear_in_input(n, ci, co, h, w, seed, a, b):
    r = np.random.default_rng(seed)
    x1, x2 = r.standard_normal((n, ci, h, w)), r.standard_normal((n, ci, h, w))
    k = Tensor(r.standard_normal((co, ci, 3, 3)))

    def f(x):
        return T.conv2d(Tensor(x), k, padding=1).data

    np.testing.assert_allclose(f(a * x1 + b * x2), a * f(x1) + b * f(x2), atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(c=small, h=st.integers(1, 6), w=st.integers(1, 6), seed=st.integers(0, 2**16),
       scale=st.sampled_from([2, 0.5]))
def test_bilinear_output_is_convex_combination(c, h, w, seed, scale):
    if scale == 0.5 and (h < 2 or w < 2):
        return
    x = np.random.default_rng(seed).standard_normal((1, c, h, w))
    y = T.bilinear_resize(Tensor(x), scale).data
    assert y.min() >= x.min() - 1e-12 and y.max() <= x.max() + 1e-12


@settings(max_examples=25, deadline=None)
@given(shape=st.tuples(small, small, st.integers(1, 5), st.integers(1, 5)), seed=st.integers(0, 2**16))
def test_sum_gradient_is_ones(shape, seed):
    x = Tensor(np.random.default_rng(seed).standard_normal(shape), requires_grad=True)
    T.backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones(shape))
