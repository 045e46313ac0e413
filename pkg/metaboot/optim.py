from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node

_LOGGER = logging.getLogger("optim")

OPTIMIZERS = ("sgd", "adam")


@dataclass
class InnerOptimState:
    """Optimizer state for plain (non-differentiable) parameter updates.

    ema_decay > 0 smooths the raw gradient before the optimizer sees it.
    """
    tag: str
    lr: float
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-4
    ema_decay: float = 0.0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)
    ema: List[np.ndarray] = field(default_factory=list)
    t: int = 0

    def __post_init__(self) -> None:
        if self.tag not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.tag!r}")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in [0, 1)")

    @classmethod
    def create(cls, tag: str, params: Sequence[np.ndarray], lr: float, **kw: float) -> "InnerOptimState":
        state = cls(tag=tag, lr=lr, **kw)
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
        state.ema = [np.zeros_like(p) for p in params]
        return state

    def smooth(self, grads: Sequence[np.ndarray]) -> List[np.ndarray]:
        if self.ema_decay == 0.0:
            return [np.asarray(g) for g in grads]
        d = self.ema_decay
        self.ema = [d * e + (1.0 - d) * g for e, g in zip(self.ema, grads)]
        return list(self.ema)

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> List[np.ndarray]:
        """Return new parameter arrays; the inputs are left untouched."""
        grads = self.smooth(grads)
        if self.tag == "sgd":
            return [p - self.lr * g for p, g in zip(params, grads)]
        self.t += 1
        b1, b2 = self.b1, self.b2
        self.m = [b1 * m + (1.0 - b1) * g for m, g in zip(self.m, grads)]
        self.v = [b2 * v + (1.0 - b2) * g * g for v, g in zip(self.v, grads)]
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        return [p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
                for p, m, v in zip(params, self.m, self.v)]


def differentiable_sgd(params: Sequence[Node], grads: Sequence[Node], lr: float) -> List[Node]:
    """x - lr * g as new graph nodes, so later losses stay functions of w."""
    return [ad.sub(p, ad.mul(lr, g)) for p, g in zip(params, grads)]


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(np.sum([np.sum(np.square(g)) for g in grads])))
