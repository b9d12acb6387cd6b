import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from floodssl import tensor as T
from floodssl.tensor import ShapeError, Tensor, finite_diff_grad


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


def grad_of(fn, *arrays):
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = fn(*ts)
    T.backward(out)
    return [t.grad for t in ts]


def check_grads(fn, arrays, tol=1e-4):
    analytic = grad_of(fn, *arrays)
    for i, a in enumerate(arrays):
        def f(x, i=i):
            args = [Tensor(arr) for arr in arrays]
            args[i] = Tensor(x)
            return fn(*args).item()
        numeric = finite_diff_grad(f, a, 1e-5)
        assert rel_err(analytic[i], numeric) < tol, (i, analytic[i], numeric)


# -- construction ---------------------------------------------------------------

def test_create_fill_and_data():
    assert np.array_equal(Tensor.full([2, 2], 0).data, np.zeros((2, 2)))
    v = Tensor.from_data([3], [1, 2, 3])
    assert v.shape == (3,) and list(v.data) == [1, 2, 3]
    assert not v.requires_grad


def test_create_seeded_uniform_is_bit_identical():
    a = Tensor.uniform([2], -1, 1, seed=7)
    b = Tensor.uniform([2], -1, 1, seed=7)
    assert a.data.tobytes() == b.data.tobytes()
    assert np.all((a.data >= -1) & (a.data < 1))


def test_create_errors():
    with pytest.raises(ShapeError):
        Tensor.from_data([2, 2], [1, 2, 3])
    with pytest.raises(ShapeError):
        Tensor.full([0, 2], 1.0)


# -- elementwise ----------------------------------------------------------------

def test_relu_sigmoid_values():
    assert list(T.relu(Tensor([-1.0, 0.0, 2.0])).data) == [0, 0, 2]
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5
    big = T.sigmoid(Tensor([800.0, -800.0])).data
    assert np.all(np.isfinite(big)) and big[0] == 1.0 and big[1] == 0.0


def test_add_backward_of_sum():
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0, 4.0], requires_grad=True)
    c = a + b
    assert list(c.data) == [4, 6]
    T.backward(T.sum(c))
    assert list(a.grad) == [1, 1] and list(b.grad) == [1, 1]


def test_shape_mismatch_and_log_domain():
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]) + Tensor([1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        T.log(Tensor([1.0, 0.0]))
    # clamping first makes it legal
    assert np.isfinite(T.safe_log(Tensor([0.0])).data).all()


@pytest.mark.parametrize("kind", ["add", "sub", "mul", "div"])
def test_binary_elementwise_grads(kind):
    rng = np.random.default_rng(0)
    fn = {"add": T.add, "sub": T.sub, "mul": T.mul, "div": T.div}[kind]
    for _ in range(20):
        a = rng.uniform(-2, 2, (3, 4))
        b = rng.uniform(0.5, 2, (3, 4)) * rng.choice([-1, 1], (3, 4))
        check_grads(lambda x, y: T.sum(fn(x, y) * fn(x, y)), [a, b])


@pytest.mark.parametrize("kind", ["neg", "relu", "sigmoid", "exp", "log", "clamp"])
def test_unary_elementwise_grads(kind):
    rng = np.random.default_rng(1)
    fns = {
        "neg": T.neg, "relu": T.relu, "sigmoid": T.sigmoid, "exp": T.exp,
        "log": T.log, "clamp": lambda x: T.clamp(x, -1.0, 1.0),
    }
    fn = fns[kind]
    weights = rng.normal(size=(4, 5))
    for _ in range(20):
        x = rng.uniform(-2, 2, (4, 5))
        if kind == "log":
            x = np.abs(x) + 0.1
        if kind in ("relu", "clamp"):
            # keep clear of kinks so central differences are valid
            x = np.where(np.abs(x) < 1e-3, 0.5, x)
            x = np.where(np.abs(np.abs(x) - 1) < 1e-3, 0.5, x)
        check_grads(lambda t: T.sum(fn(t) * weights), [x])


def test_square_backward_hand_derivative():
    x = Tensor([3.0], requires_grad=True)
    T.backward(T.sum(x * x))
    assert x.grad[0] == 6.0


def test_disconnected_param_gets_no_gradient():
    x = Tensor([3.0], requires_grad=True)
    p = Tensor([5.0], requires_grad=True)
    T.backward(T.sum(x * 2.0))
    assert p.grad is None or np.all(p.grad == 0)


def test_gradients_overwritten_not_accumulated():
    x = Tensor([3.0], requires_grad=True)
    T.backward(T.sum(x * x))
    T.backward(T.sum(x * x))
    assert x.grad[0] == 6.0


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        T.backward(x * 2.0)


def test_shared_subexpression_visited_once():
    x = Tensor([2.0], requires_grad=True)
    y = x * x          # used twice below
    z = T.sum(y * y + y)
    T.backward(z)
    # d/dx (x^4 + x^2) = 4x^3 + 2x
    assert x.grad[0] == pytest.approx(4 * 8 + 4)


# -- matmul ---------------------------------------------------------------------

def test_matmul_values():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    assert T.matmul(a, b).data.tolist() == [[19, 22], [43, 50]]
    m = np.random.default_rng(0).normal(size=(3, 3))
    assert np.array_equal(T.matmul(Tensor(m), Tensor(np.eye(3))).data, m)


def test_matmul_errors():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_vs_finite_differences():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a, b = rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (4, 2))
        ga, gb = grad_of(lambda x, y: T.sum(T.matmul(x, y)), a, b)
        num = finite_diff_grad(lambda x: (x @ b).sum(), a)
        assert np.max(np.abs(ga - num)) < 1e-6
        check_grads(lambda x, y: T.sum(T.matmul(x, y) * T.matmul(x, y)), [a, b])


def test_linear_grads():
    rng = np.random.default_rng(3)
    for _ in range(20):
        x, w, b = rng.uniform(-2, 2, (4, 3)), rng.uniform(-2, 2, (3, 2)), rng.uniform(-2, 2, 2)
        check_grads(lambda x_, w_, b_: T.sum(T.sigmoid(T.linear(x_, w_, b_))), [x, w, b])


# -- conv / pool / upsample / concat / softmax ---------------------------------

def test_conv2d_hand_value_and_identity():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))), Tensor([0.0]))
    assert out.shape == (1, 1, 2, 2) and np.all(out.data == 4)
    x = np.random.default_rng(0).normal(size=(1, 1, 4, 5))
    ident = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor([0.0]))
    assert np.array_equal(ident.data, x)


def test_conv2d_output_size_and_errors():
    out = T.conv2d(Tensor(np.ones((2, 3, 7, 6))), Tensor(np.ones((4, 3, 3, 3))), Tensor(np.zeros(4)),
                   stride=2, pad=1)
    assert out.shape == (2, 4, (7 + 2 - 3) // 2 + 1, (6 + 2 - 3) // 2 + 1)
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.ones((1, 3, 3, 3))), Tensor([0.0]))
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]))


def _conv_direct(x, k, b, stride, pad):
    # nested-loop reference, independent of the im2col path
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[ni, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[ni, oi, i, j] = (patch * k[oi]).sum() + b[oi]
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_matches_direct_loops(stride, pad):
    rng = np.random.default_rng(4)
    x, k, b = rng.normal(size=(2, 3, 6, 5)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    assert np.allclose(T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, pad).data,
                       _conv_direct(x, k, b, stride, pad), atol=1e-12)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_grads(stride, pad):
    rng = np.random.default_rng(5)
    w_out = None
    for trial in range(20):
        x = rng.uniform(-2, 2, (1, 2, 5, 5))
        k = rng.uniform(-2, 2, (3, 2, 3, 3))
        b = rng.uniform(-2, 2, 3)
        if w_out is None:
            w_out = rng.normal(size=T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride, pad).shape)
        check_grads(lambda x_, k_, b_: T.sum(T.conv2d(x_, k_, b_, stride, pad) * w_out), [x, k, b])


def test_maxpool_values_ties_and_backward():
    x = Tensor([[[[1.0, 2.0], [3.0, 4.0]]]], requires_grad=True)
    out = T.maxpool2d(x)
    assert out.data.tolist() == [[[[4.0]]]]
    T.backward(T.sum(out))
    assert x.grad.tolist() == [[[[0, 0], [0, 1]]]]
    const = Tensor(np.full((1, 1, 4, 4), 3.0), requires_grad=True)
    assert np.all(T.maxpool2d(const).data == 3.0)
    T.backward(T.sum(T.maxpool2d(const)))
    # tie -> first position in row-major scan of each window
    assert const.grad[0, 0].tolist() == [[1, 0, 1, 0], [0, 0, 0, 0], [1, 0, 1, 0], [0, 0, 0, 0]]
    with pytest.raises(ShapeError):
        T.maxpool2d(Tensor(np.ones((1, 1, 3, 4))))


def test_maxpool_grads():
    rng = np.random.default_rng(6)
    w = rng.normal(size=(2, 2, 2, 3))
    for _ in range(20):
        x = rng.uniform(-2, 2, (2, 2, 4, 6))
        check_grads(lambda t: T.sum(T.maxpool2d(t) * w), [x])


def test_upsample_values_and_backward():
    assert T.upsample_nearest(Tensor([[[[1.0]]]])).data.tolist() == [[[[1, 1], [1, 1]]]]
    const = np.full((1, 2, 4, 4), 0.7)
    assert np.array_equal(T.maxpool2d(T.upsample_nearest(T.maxpool2d(Tensor(const)))).data,
                          T.maxpool2d(Tensor(const)).data)
    assert np.array_equal(T.upsample_nearest(T.maxpool2d(Tensor(const))).data, const)
    x = Tensor(np.ones((1, 1, 2, 3)), requires_grad=True)
    T.backward(T.sum(T.upsample_nearest(x)))
    assert np.all(x.grad == 4)


def test_upsample_grads():
    rng = np.random.default_rng(7)
    w = rng.normal(size=(1, 2, 6, 4))
    for _ in range(20):
        check_grads(lambda t: T.sum(T.upsample_nearest(t) * w), [rng.uniform(-2, 2, (1, 2, 3, 2))])


def test_concat_shapes_round_trip_and_backward():
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=(2, 1, 3, 3)), rng.normal(size=(2, 2, 3, 3))
    out = T.concat_channels(Tensor(a), Tensor(b))
    assert out.shape == (2, 3, 3, 3)
    assert np.array_equal(out.data[:, :1], a) and np.array_equal(out.data[:, 1:], b)
    with pytest.raises(ShapeError):
        T.concat_channels(Tensor(a), Tensor(np.ones((2, 2, 4, 3))))
    ta = Tensor([[[[1.0]]]], requires_grad=True)
    tb = Tensor([[[[2.0]]]], requires_grad=True)
    g = np.array([[[[3.0]], [[-4.0]]]])
    T.backward(T.sum(T.concat_channels(ta, tb) * g))
    assert ta.grad.ravel()[0] == 3.0 and tb.grad.ravel()[0] == -4.0
    assert ta.grad.ravel()[0] ** 2 + tb.grad.ravel()[0] ** 2 == (g ** 2).sum()


def test_concat_grads():
    rng = np.random.default_rng(9)
    w = rng.normal(size=(1, 3, 2, 2))
    for _ in range(20):
        a, b = rng.uniform(-2, 2, (1, 1, 2, 2)), rng.uniform(-2, 2, (1, 2, 2, 2))
        check_grads(lambda x, y: T.sum(T.concat_channels(x, y) * w), [a, b])


def test_softmax_values():
    eq = T.softmax_channels(Tensor(np.zeros((1, 10, 2, 2)))).data
    assert np.allclose(eq, 0.1, atol=1e-15)
    big = T.softmax_channels(Tensor(np.array([1000.0, 0.0]).reshape(1, 2, 1, 1))).data.ravel()
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0) and big[1] < 1e-300
    r = T.softmax_channels(Tensor(np.random.default_rng(0).normal(size=(1, 4, 3, 3)))).data
    assert np.all(np.abs(r.sum(axis=1) - 1) <= 1e-9)


def test_softmax_grads():
    rng = np.random.default_rng(10)
    w = rng.normal(size=(1, 4, 2, 3))
    for _ in range(20):
        check_grads(lambda t: T.sum(T.softmax_channels(t) * w), [rng.uniform(-2, 2, (1, 4, 2, 3))])


def test_reduction_grads():
    rng = np.random.default_rng(11)
    w = rng.normal(size=(2, 3))
    for _ in range(20):
        x = rng.uniform(-2, 2, (2, 3, 2, 2))
        check_grads(lambda t: T.sum(T.global_avg_pool(t) * w), [x])
        check_grads(lambda t: T.mean(T.reshape(t, (6, 4)) * T.reshape(t, (6, 4))), [x])


# -- finite differences ---------------------------------------------------------

def test_finite_diff_oracle_basics():
    x = np.random.default_rng(0).normal(size=5)
    assert np.allclose(finite_diff_grad(lambda v: v.sum(), x), 1.0)
    assert np.allclose(finite_diff_grad(lambda v: (v ** 2).sum(), np.array([1.0, 2.0])), [2, 4],
                       atol=1e-8)


# -- properties -----------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (1, 3, 2, 2), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(x):
    s = T.softmax_channels(Tensor(x)).data
    assert np.all(s >= 0) and np.all(s <= 1)
    assert np.all(np.abs(s.sum(axis=1) - 1) <= 1e-9)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, (1, 2, 4, 4), elements=st.floats(-1e3, 1e3)))
def test_forward_ops_stay_finite(x):
    t = Tensor(x)
    k = Tensor(np.full((2, 2, 3, 3), 0.1))
    outs = [T.relu(t), T.sigmoid(t), T.maxpool2d(t), T.upsample_nearest(t),
            T.softmax_channels(t), T.conv2d(t, k, Tensor(np.zeros(2)), 1, 1),
            T.safe_log(T.sigmoid(t))]
    assert all(np.all(np.isfinite(o.data)) for o in outs)
