import math

import numpy as np
import pytest

from floodssl import tensor as T
from floodssl.losses import (LossWeights, bce, bce_with_logits, combined_seg_loss, dice_loss,
                             semi_supervised_loss)
from floodssl.tensor import ShapeError, Tensor, finite_diff_grad


def _rel(a, b):
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


def _check(loss_fn, x, tol=1e-4):
    t = Tensor(x.copy(), requires_grad=True)
    T.backward(loss_fn(t))
    num = finite_diff_grad(lambda v: loss_fn(Tensor(v)).item(), x, 1e-6)
    assert _rel(t.grad, num) < tol


def _onehot(rng, shape):
    n, c, h, w = shape
    labels = rng.integers(0, c, (n, h, w))
    return np.moveaxis(np.eye(c)[labels], -1, 1)


def test_bce_examples():
    assert bce(Tensor([0.5]), Tensor([1.0])).item() == pytest.approx(math.log(2), abs=1e-12)
    assert bce(Tensor([0.9]), Tensor([1.0])).item() == pytest.approx(-math.log(0.9), abs=1e-12)
    assert bce(Tensor([0.9]), Tensor([1.0])).item() == pytest.approx(0.10536, abs=1e-5)
    assert math.isfinite(bce(Tensor([0.0, 1.0]), Tensor([1.0, 0.0])).item())


def test_bce_shape_mismatch():
    with pytest.raises(ShapeError):
        bce(Tensor([0.5, 0.5]), Tensor([1.0]))


def test_bce_with_logits_zero_logit():
    assert bce_with_logits(Tensor([0.0, 0.0]), [0.0, 1.0]).item() == pytest.approx(math.log(2))


def test_dice_examples():
    t = np.ones((1, 1, 2, 2))
    assert dice_loss(Tensor(t), t).item() == pytest.approx(0.0, abs=1e-9)
    # disjoint support -> coefficient ~0
    p = np.zeros((1, 1, 2, 2)); p[0, 0, 0, 0] = 1
    q = np.zeros((1, 1, 2, 2)); q[0, 0, 1, 1] = 1
    assert dice_loss(Tensor(p), q).item() == pytest.approx(1.0, abs=1e-6)
    # half-probability everywhere on a full target: 2*2 / (2 + 4) -> loss 1/3
    assert dice_loss(Tensor(np.full((1, 1, 2, 2), 0.5)), t).item() == pytest.approx(1 / 3, abs=1e-6)


def test_dice_two_class_average():
    # class 0 perfect (loss 0), class 1 disjoint (loss 1) -> mean 0.5
    pred = np.zeros((1, 2, 1, 2)); pred[0, 0, 0, 0] = 1; pred[0, 1, 0, 1] = 1
    tgt = np.zeros((1, 2, 1, 2)); tgt[0, 0, 0, 0] = 1; tgt[0, 1, 0, 0] = 1
    assert dice_loss(Tensor(pred), tgt).item() == pytest.approx(0.5, abs=1e-6)


def test_combined_weights_linear():
    rng = np.random.default_rng(0)
    logits, tgt = rng.normal(size=(2, 3, 4, 4)), _onehot(rng, (2, 3, 4, 4))
    b = bce(T.sigmoid(Tensor(logits)), tgt).item()
    d = dice_loss(T.softmax_channels(Tensor(logits)), tgt).item()
    assert combined_seg_loss(Tensor(logits), tgt, LossWeights(1, 0)).item() == pytest.approx(b, abs=1e-12)
    assert combined_seg_loss(Tensor(logits), tgt, LossWeights(0, 1)).item() == pytest.approx(d, abs=1e-12)
    assert combined_seg_loss(Tensor(logits), tgt).item() == pytest.approx(0.5 * b + 0.5 * d, abs=1e-12)
    # toy example: contributions 0.2 + 0.1 = 0.3
    assert 0.5 * 0.4 + 0.5 * 0.2 == pytest.approx(0.3)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(-1, 1)
    with pytest.raises(ValueError):
        LossWeights(0, 0)


def test_semi_supervised_loss():
    sup, pse = Tensor(0.7), Tensor(0.4)
    assert semi_supervised_loss(sup, pse, 0.0) is sup
    assert semi_supervised_loss(sup, None, 0.5) is sup
    assert semi_supervised_loss(sup, pse, 0.5).item() == pytest.approx(0.9)
    with pytest.raises(ValueError):
        semi_supervised_loss(sup, pse, -0.1)


@pytest.mark.parametrize("trial", range(20))
def test_bce_grad(trial):
    rng = np.random.default_rng(100 + trial)
    p = rng.uniform(0.05, 0.95, (3, 4))
    y = rng.integers(0, 2, (3, 4)).astype(float)
    _check(lambda t: bce(t, y), p)
    _check(lambda t: bce_with_logits(t, y), rng.normal(size=(3, 4)))


@pytest.mark.parametrize("trial", range(20))
def test_dice_grad(trial):
    rng = np.random.default_rng(200 + trial)
    p = rng.uniform(0.05, 0.95, (2, 3, 3, 3))
    _check(lambda t: dice_loss(t, _onehot(rng_fixed(trial), (2, 3, 3, 3))), p)


def rng_fixed(trial):
    return np.random.default_rng(300 + trial)


@pytest.mark.parametrize("trial", range(20))
def test_combined_loss_grad(trial):
    rng = np.random.default_rng(400 + trial)
    logits = rng.normal(size=(2, 4, 3, 3))
    tgt = _onehot(rng, (2, 4, 3, 3))
    _check(lambda t: combined_seg_loss(t, tgt), logits)
    w = LossWeights(0.3, 0.7)
    _check(lambda t: semi_supervised_loss(combined_seg_loss(t, tgt, w),
                                          combined_seg_loss(t * 2.0, tgt, w), 0.4), logits)
