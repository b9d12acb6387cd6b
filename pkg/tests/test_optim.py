import numpy as np
import pytest
from hypothesis import given, strategies as st

from floodssl import tensor as T
from floodssl.optim import SGD, Adam, StepLRSchedule, make_optimizer, step_lr
from floodssl.tensor import ShapeError, Tensor


def _param(v):
    return Tensor(np.array(v, dtype=float), requires_grad=True)


def test_sgd_hand_update():
    p = _param([1.0])
    p.grad = np.array([2.0])
    SGD([p], lr=0.1, momentum=0.0).step()
    assert p.data[0] == pytest.approx(0.8)


def test_sgd_first_momentum_step_equals_plain_step():
    a, b = _param([1.0, -2.0]), _param([1.0, -2.0])
    a.grad = b.grad = np.array([0.5, 3.0])
    SGD([a], lr=0.1, momentum=0.9).step()
    SGD([b], lr=0.1, momentum=0.0).step()
    assert np.array_equal(a.data, b.data)


def test_sgd_momentum_recurrence():
    p = _param([0.0])
    opt = SGD([p], lr=1.0, momentum=0.5)
    p.grad = np.array([1.0]); opt.step()      # v=1, p=-1
    p.grad = np.array([1.0]); opt.step()      # v=1.5, p=-2.5
    assert p.data[0] == -2.5


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_gradient_leaves_params(kind):
    p = _param([1.0, 2.0])
    opt = make_optimizer(kind, [p], lr=0.1)
    for _ in range(5):
        p.grad = np.zeros(2)
        opt.step()
    assert np.array_equal(p.data, [1.0, 2.0])


def test_adam_first_step_magnitude():
    for g in (-5.0, 0.01, 3.0):
        p = _param([1.0])
        p.grad = np.array([g])
        Adam([p], lr=0.001).step()
        assert abs(p.data[0] - 1.0) == pytest.approx(0.001, rel=1e-5)
        assert np.sign(1.0 - p.data[0]) == np.sign(g)


def test_adam_deterministic_trajectory():
    def run():
        rng = np.random.default_rng(0)
        p = _param(rng.normal(size=3))
        opt = Adam([p], lr=0.01)
        for _ in range(20):
            p.grad = rng.normal(size=3)
            opt.step()
        return p.data.tobytes()
    assert run() == run()


def test_shape_mismatch_and_bad_lr():
    p = _param([1.0, 2.0])
    p.grad = np.ones(3)
    with pytest.raises(ShapeError):
        SGD([p]).step()
    with pytest.raises(ValueError):
        SGD([p], lr=0.0)
    with pytest.raises(ValueError):
        make_optimizer("rmsprop", [p], 0.1)


def test_state_is_lazy_and_persists():
    p = _param([1.0])
    opt = SGD([p], lr=0.1)
    assert opt.state == {}
    p.grad = np.array([1.0]); opt.step()
    buf = opt.state[0]["velocity"]
    opt.step()
    assert opt.state[0]["velocity"] is buf and opt.steps == 2


def test_sgd_converges_on_square():
    p = _param([1.0])
    opt = SGD([p], lr=0.1, momentum=0.0)
    for _ in range(50):
        T.backward(T.sum(p * p))
        opt.step()
    assert abs(p.data[0]) < 1e-4


def test_step_lr_examples():
    s = StepLRSchedule(0.01, (10, 30, 50), 0.1)
    assert step_lr(s, 0) == 0.01
    assert step_lr(s, 9) == 0.01
    assert step_lr(s, 10) == pytest.approx(0.001)
    assert step_lr(s, 55) == pytest.approx(1e-5)
    flat = StepLRSchedule(0.3)
    assert all(flat.lr_at(e) == 0.3 for e in range(100))


def test_step_lr_validation():
    with pytest.raises(ValueError):
        StepLRSchedule(0.1, (10, 10))
    with pytest.raises(ValueError):
        StepLRSchedule(0.1, (10,), gamma=0.0)


@given(st.lists(st.integers(1, 200), min_size=0, max_size=5, unique=True),
       st.floats(0.05, 1.0))
def test_step_lr_non_increasing_with_jumps_at_milestones(ms, gamma):
    ms = sorted(ms)
    s = StepLRSchedule(1.0, tuple(ms), gamma)
    lrs = [s.lr_at(e) for e in range(205)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    for e in range(1, 205):
        if lrs[e] != lrs[e - 1]:
            assert e in ms
