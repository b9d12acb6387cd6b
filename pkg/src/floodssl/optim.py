"""SGD with momentum, Adam, and a milestone step-LR schedule."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor


class Optimizer:
    kind = ""

    def __init__(self, params: Sequence[Tensor], lr: float):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.params = list(params)
        self.lr = lr
        self.steps = 0
        self.state: dict[int, dict[str, np.ndarray]] = {}

    def _grad(self, p: Tensor) -> np.ndarray:
        if p.grad is None:
            return np.zeros_like(p.data)
        if p.grad.shape != p.data.shape:
            raise ShapeError(f"gradient shape {p.grad.shape} != parameter shape {p.data.shape}")
        return p.grad

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.steps += 1
        for i, p in enumerate(self.params):
            self._update(p, self._grad(p), self.state.setdefault(i, {}))

    def _update(self, p: Tensor, g: np.ndarray, state: dict) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    """v <- momentum * v + g;  p <- p - lr * v."""

    kind = "sgd"

    def __init__(self, params, lr: float = 0.01, momentum: float = 0.9):
        super().__init__(params, lr)
        if not 0 <= momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        self.momentum = momentum

    def _update(self, p, g, state):
        if "velocity" not in state:
            state["velocity"] = np.zeros_like(p.data)
        v = state["velocity"]
        v *= self.momentum
        v += g
        p.data = p.data - self.lr * v


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def _update(self, p, g, state):
        if "m" not in state:
            state["m"] = np.zeros_like(p.data)
            state["v"] = np.zeros_like(p.data)
        m, v = state["m"], state["v"]
        m *= self.beta1
        m += (1 - self.beta1) * g
        v *= self.beta2
        v += (1 - self.beta2) * g * g
        m_hat = m / (1 - self.beta1 ** self.steps)
        v_hat = v / (1 - self.beta2 ** self.steps)
        p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind: str, params, lr: float, momentum: float = 0.9) -> Optimizer:
    if kind == "sgd":
        return SGD(params, lr=lr, momentum=momentum)
    if kind == "adam":
        return Adam(params, lr=lr)
    raise ValueError(f"unknown optimizer {kind!r}")


@dataclass(frozen=True)
class StepLRSchedule:
    base_lr: float
    milestones: tuple[int, ...] = field(default_factory=tuple)
    gamma: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly ascending")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")

    def lr_at(self, epoch: int) -> float:
        return step_lr(self, epoch)


def step_lr(schedule: StepLRSchedule, epoch: int) -> float:
    passed = bisect.bisect_right(schedule.milestones, epoch)
    return schedule.base_lr * schedule.gamma ** passed
