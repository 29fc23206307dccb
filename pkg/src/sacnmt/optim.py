"""Adam with decoupled weight decay, and global-norm gradient clipping."""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from .autodiff import Tensor

log = logging.getLogger(__name__)


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Scale ``grads`` so their joint L2 norm is at most ``max_norm``.

    Returns the (possibly rescaled) gradients and the norm measured before clipping.
    """
    if max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    norm = float(np.sqrt(np.sum([np.sum(g * g) for g in grads]))) if grads else 0.0
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return list(grads), norm


def clip_param_grads(params: Sequence[Tensor], max_norm: float) -> float:
    clipped, norm = clip_global_norm([p.grad for p in params], max_norm)
    for p, g in zip(params, clipped):
        p.grad = g
    return norm


class Adam:
    """Adam (Kingma & Ba) with bias correction and AdamW-style decoupled decay.

    ``step()`` reads ``p.grad`` for each parameter. If any gradient is
    non-finite the whole step is skipped and ``False`` is returned.
    """

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float = 4e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 1e-5,
    ):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.first_moment = [np.zeros_like(p.data) for p in self.params]
        self.second_moment = [np.zeros_like(p.data) for p in self.params]
        self.skipped = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> bool:
        grads = [p.grad for p in self.params]
        if not all(np.all(np.isfinite(g)) for g in grads):
            self.skipped += 1
            log.warning("Adam step skipped: non-finite gradient (skip #%d)", self.skipped)
            return False
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(self.params, grads, self.first_moment, self.second_moment):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True

    def state_dict(self) -> dict:
        return {
            "lr": self.lr,
            "step_count": self.step_count,
            "first_moment": [m.copy() for m in self.first_moment],
            "second_moment": [v.copy() for v in self.second_moment],
        }

    def load_state_dict(self, state: dict) -> None:
        self.lr = float(state["lr"])
        self.step_count = int(state["step_count"])
        self.first_moment = [np.array(m, dtype=np.float64) for m in state["first_moment"]]
        self.second_moment = [np.array(v, dtype=np.float64) for v in state["second_moment"]]
