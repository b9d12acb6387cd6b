"""BCE, Dice and the weighted/pseudo-label composites built on them."""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .tensor import ShapeError, Tensor

PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class LossWeights:
    w_bce: float = 0.5
    w_dice: float = 0.5
    dice_smooth: float = 1e-6

    def __post_init__(self):
        if self.w_bce < 0 or self.w_dice < 0 or self.w_bce + self.w_dice <= 0:
            raise ValueError("loss weights must be nonnegative with a positive sum")
        if self.dice_smooth <= 0:
            raise ValueError("dice_smooth must be positive")


def _same_shape(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")


def bce(pred_prob: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy of probabilities against {0,1} targets."""
    target = T.as_tensor(target)
    _same_shape(pred_prob, target)
    p = T.clamp(pred_prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
    t = target.data
    ll = T.log(p) * t + T.log(1.0 - p) * (1.0 - t)
    return -T.mean(ll)


def bce_with_logits(logits: Tensor, target) -> Tensor:
    return bce(T.sigmoid(logits), T.as_tensor(target))


def dice_loss(pred_prob: Tensor, target_onehot, smooth: float = 1e-6) -> Tensor:
    """1 - mean over classes of the soft Dice coefficient.

    Sums run over batch and spatial axes, so each class contributes one
    coefficient regardless of how many pixels it owns.
    """
    target_onehot = T.as_tensor(target_onehot)
    _same_shape(pred_prob, target_onehot)
    if pred_prob.ndim != 4:
        raise ShapeError("dice_loss expects N×C×H×W tensors")
    axes = (0, 2, 3)
    inter = T.sum(pred_prob * target_onehot, axis=axes)
    denom = T.sum(pred_prob, axis=axes) + T.sum(target_onehot, axis=axes)
    coeff = (inter * 2.0 + smooth) / (denom + smooth)
    return 1.0 - T.mean(coeff)


def combined_seg_loss(pred_logits: Tensor, target_onehot, weights: LossWeights = LossWeights()) -> Tensor:
    """w_bce * channelwise sigmoid-BCE + w_dice * softmax Dice."""
    target_onehot = T.as_tensor(target_onehot)
    _same_shape(pred_logits, target_onehot)
    total = None
    if weights.w_bce:
        total = bce(T.sigmoid(pred_logits), target_onehot) * weights.w_bce
    if weights.w_dice:
        d = dice_loss(T.softmax_channels(pred_logits), target_onehot, weights.dice_smooth) * weights.w_dice
        total = d if total is None else total + d
    return total


def semi_supervised_loss(sup_loss: Tensor, pseudo_loss: Tensor | None, alpha: float) -> Tensor:
    """sup_loss + alpha * pseudo_loss; the pseudo term is dropped when alpha is 0."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if pseudo_loss is None or alpha == 0:
        return sup_loss
    return sup_loss + pseudo_loss * alpha
