from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .tensor import Parameter

logger = logging.getLogger(__name__)


@dataclass
class Adamax:
    """Adamax (infinity-norm Adam) over a list of named parameters.

    Parameters with ``requires_grad=False`` or no gradient are skipped, so
    frozen subnetworks stay bitwise unchanged.
    """

    params: list[Parameter]
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        self.params = list(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adamax_step(self.params, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)


def adamax_step(
    params: Iterable[Parameter],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    for p in params:
        if not p.requires_grad or p.grad is None:
            continue
        if p.m is None or p.u is None:
            p.reset_state()
        g = p.grad.astype(p.data.dtype, copy=False)
        p.t += 1
        p.m = beta1 * p.m + (1 - beta1) * g
        p.u = np.maximum(beta2 * p.u, np.abs(g))
        step_size = lr / (1 - beta1**p.t)
        p.data = (p.data - step_size * p.m / (p.u + eps)).astype(p.data.dtype, copy=False)


def step_lr(initial: float, factor: float, every: int, epoch: int) -> float:
    """Learning rate for 1-based ``epoch`` under a step-decay schedule."""
    if epoch < 1:
        raise ValueError(f"epochs are 1-based, got {epoch}")
    return initial * factor ** ((epoch - 1) // every)
