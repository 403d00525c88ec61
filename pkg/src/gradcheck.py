"""Central finite-difference gradient checking (float64 only)."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class GradFailure:
    tensor: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    tolerance: float
    failures: list[GradFailure] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        status = "ok" if self.passed else f"{len(self.failures)} element(s) over tolerance"
        return f"grad check: {self.checked} elements, max rel err {self.max_rel_error:.3e} ({status})"


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    tolerance: float = 1e-6,
    h: float = 1e-5,
    names: Optional[Sequence[str]] = None,
    max_per_tensor: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients of the scalar ``fn()`` with central differences.

    ``fn`` must rebuild its graph from the current ``.data`` of ``tensors`` on
    every call. When ``max_per_tensor`` is set, a seeded random subset of
    elements is checked per tensor instead of every element.
    """
    for t in tensors:
        if t.precision != "f64":
            raise ValueError("grad_check requires float64 tensors")
    names = list(names) if names is not None else [getattr(t, "name", f"tensor{i}") for i, t in enumerate(tensors)]
    for t in tensors:
        t.requires_grad = True
        t.grad = None

    out = fn()
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    rng = np.random.default_rng(seed)
    failures: list[GradFailure] = []
    worst, checked = 0.0, 0
    for name, t, grad in zip(names, tensors, analytic):
        flat_indices = np.arange(t.data.size)
        if max_per_tensor is not None and t.data.size > max_per_tensor:
            flat_indices = rng.choice(t.data.size, size=max_per_tensor, replace=False)
        for flat in flat_indices:
            idx = np.unravel_index(int(flat), t.data.shape)
            original = t.data[idx]
            t.data[idx] = original + h
            plus = fn().item()
            t.data[idx] = original - h
            minus = fn().item()
            t.data[idx] = original
            numeric = (plus - minus) / (2 * h)
            err = relative_error(float(grad[idx]), numeric, floor)
            worst = max(worst, err)
            checked += 1
            if err > tolerance:
                failures.append(GradFailure(name, tuple(int(i) for i in idx), float(grad[idx]), numeric, err))

    report = GradCheckReport(max_rel_error=worst, checked=checked, tolerance=tolerance, failures=failures)
    logger.debug(report.summary())
    return report


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    """Reduce ``out`` to a scalar ``sum(out * weights)`` through the graph."""
    from .tensor import bmm, reshape

    flat = reshape(out, (1, 1, out.data.size))
    w = Tensor(weights.reshape(1, out.data.size, 1), dtype=out.dtype)
    return reshape(bmm(flat, w), (1,))
