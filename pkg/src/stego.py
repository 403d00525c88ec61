"""Content-adaptive ternary embedding simulation.

Costs come from a registered cost model, change probabilities from the
Gibbs form ``beta = exp(-lambda * rho) / Z`` with ``lambda`` chosen so the
ternary entropy matches the requested payload, and changes are sampled
independently per pixel.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy import ndimage
from scipy.special import entr

from .errors import EmbeddingError

logger = logging.getLogger(__name__)

LAMBDA_BRACKET = (1e-6, 1e4)
LAMBDA_LIMITS = (1e-300, 1e300)
MAX_ITERATIONS = 200
PAYLOAD_TOL = 1e-6
MIN_IMAGE_SIZE = 16

ImageGray = np.ndarray  # (H, W) uint8


def check_image(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 2 or min(arr.shape) < MIN_IMAGE_SIZE:
        raise EmbeddingError(f"expected a 2-D image of at least {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}, got {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255 or not np.array_equal(arr, np.round(arr)):
            raise EmbeddingError("pixel values must be integers in [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


@dataclass
class CostMap:
    """Per-pixel costs of +1 and -1 changes; ``inf`` marks a wet direction."""

    rho_plus: np.ndarray
    rho_minus: np.ndarray

    def __post_init__(self) -> None:
        if self.rho_plus.shape != self.rho_minus.shape:
            raise EmbeddingError("rho_plus and rho_minus must have the same shape")
        if (self.rho_plus < 0).any() or (self.rho_minus < 0).any():
            raise EmbeddingError("costs must be non-negative")

    @property
    def wet_plus(self) -> np.ndarray:
        return np.isinf(self.rho_plus)

    @property
    def wet_minus(self) -> np.ndarray:
        return np.isinf(self.rho_minus)

    @property
    def size(self) -> int:
        return self.rho_plus.size


@dataclass
class ChangeProbMap:
    beta_plus: np.ndarray
    beta_minus: np.ndarray

    def __post_init__(self) -> None:
        if (self.beta_plus < 0).any() or (self.beta_minus < 0).any():
            raise EmbeddingError("change probabilities must be non-negative")
        if (self.beta_plus + self.beta_minus > 1 + 1e-12).any():
            raise EmbeddingError("beta_plus + beta_minus exceeds 1")

    @classmethod
    def zeros(cls, shape: tuple[int, ...]) -> "ChangeProbMap":
        return cls(np.zeros(shape), np.zeros(shape))


# --------------------------------------------------------------------------- cost models


def inverse_variance_cost(image: ImageGray, window: int = 3) -> CostMap:
    """rho = 1 / (local variance + 1); wet -1 at 0 and wet +1 at 255."""
    arr = check_image(image)
    x = arr.astype(np.float64)
    mean = ndimage.uniform_filter(x, size=window, mode="reflect")
    mean_sq = ndimage.uniform_filter(x * x, size=window, mode="reflect")
    variance = np.clip(mean_sq - mean * mean, 0.0, None)
    rho = 1.0 / (variance + 1.0)
    rho_plus, rho_minus = rho.copy(), rho.copy()
    rho_plus[arr == 255] = np.inf
    rho_minus[arr == 0] = np.inf
    return CostMap(rho_plus, rho_minus)


def _external_cost(name: str, reference: str) -> Callable[[ImageGray], CostMap]:
    def _cost(image: ImageGray) -> CostMap:
        raise EmbeddingError(
            f"cost model {name!r} is a placeholder: plug in the cost function from {reference} "
            f"with register_cost_model({name!r}, fn)"
        )

    return _cost


COST_MODELS: dict[str, Callable[[ImageGray], CostMap]] = {
    "inverse_variance": inverse_variance_cost,
    "wow": _external_cost("wow", "the WOW directional-filter reference"),
    "s_uniward": _external_cost("s_uniward", "the UNIWARD wavelet reference"),
    "hill": _external_cost("hill", "the HILL high-pass/low-pass reference"),
    "mipod": _external_cost("mipod", "the MiPOD Gaussian-model reference"),
}


def register_cost_model(name: str, fn: Callable[[ImageGray], CostMap]) -> None:
    COST_MODELS[name] = fn


def get_cost_model(name: str) -> Callable[[ImageGray], CostMap]:
    try:
        return COST_MODELS[name]
    except KeyError:
        raise EmbeddingError(f"unknown cost model {name!r}; registered: {', '.join(sorted(COST_MODELS))}") from None


# --------------------------------------------------------------------------- payload solver


def ternary_entropy(beta: ChangeProbMap) -> float:
    """Total entropy in bits, with 0 log 0 = 0."""
    p0 = np.clip(1.0 - beta.beta_plus - beta.beta_minus, 0.0, 1.0)
    nats = entr(beta.beta_plus).sum() + entr(beta.beta_minus).sum() + entr(p0).sum()
    return float(nats / math.log(2))


def change_probabilities(cost: CostMap, lam: float) -> ChangeProbMap:
    # exp(-lam * inf) == 0 marks wet directions
    with np.errstate(over="ignore", invalid="ignore"):
        e_plus = np.exp(-lam * cost.rho_plus)
        e_minus = np.exp(-lam * cost.rho_minus)
    z = 1.0 + e_plus + e_minus
    return ChangeProbMap(e_plus / z, e_minus / z)


def max_payload(cost: CostMap) -> float:
    """Entropy per pixel in the lambda -> 0 limit (uniform over allowed changes)."""
    allowed = 1.0 + (~cost.wet_plus).astype(np.float64) + (~cost.wet_minus).astype(np.float64)
    return float(np.log2(allowed).sum() / cost.size)


def solve_lambda(
    cost: CostMap,
    payload_bpp: float,
    tol: float = PAYLOAD_TOL,
    max_iter: int = MAX_ITERATIONS,
) -> tuple[float, ChangeProbMap]:
    """Find lambda so the per-pixel ternary entropy equals ``payload_bpp``.

    The bracket starts at ``LAMBDA_BRACKET``, is widened geometrically until it
    encloses the target, then bisected in log space.
    """
    n = cost.size
    capacity = max_payload(cost)
    if payload_bpp < 0 or payload_bpp > capacity:
        raise EmbeddingError(f"payload {payload_bpp} bpp is infeasible (capacity {capacity:.6f} bpp)")
    if payload_bpp >= capacity - tol:
        # uniform over the allowed changes; lambda = 0 would turn wet costs into nan
        lam = LAMBDA_LIMITS[0]
        return lam, change_probabilities(cost, lam)

    def bpp(lam: float) -> float:
        return ternary_entropy(change_probabilities(cost, lam)) / n

    lo, hi = LAMBDA_BRACKET
    iterations = 0
    target = max(payload_bpp, 0.0)
    # entropy decreases with lambda
    while bpp(hi) > target + (tol if payload_bpp == 0 else 0.0):
        hi *= 10.0
        iterations += 1
        if hi > LAMBDA_LIMITS[1] or iterations > max_iter:
            raise EmbeddingError(f"lambda exceeded {LAMBDA_LIMITS[1]:g} while searching for {payload_bpp} bpp")
    if payload_bpp == 0:
        return hi, change_probabilities(cost, hi)
    while bpp(lo) < target:
        lo /= 10.0
        iterations += 1
        if lo < LAMBDA_LIMITS[0] or iterations > max_iter:
            raise EmbeddingError(f"lambda fell below {LAMBDA_LIMITS[0]:g} while searching for {payload_bpp} bpp")

    lam = math.sqrt(lo * hi)
    for _ in range(max_iter):
        lam = math.sqrt(lo * hi)
        if bpp(lam) > target:
            lo = lam
        else:
            hi = lam
        if hi - lo <= 1e-13 * hi:
            break
    lam = math.sqrt(lo * hi)
    beta = change_probabilities(cost, lam)
    achieved = ternary_entropy(beta) / n
    if abs(achieved - payload_bpp) > tol:
        raise EmbeddingError(
            f"bisection did not converge after {max_iter} iterations: {achieved:.9f} bpp vs {payload_bpp} bpp"
        )
    return lam, beta


# --------------------------------------------------------------------------- sampling


def image_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for image ``index`` under run seed ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def simulate_embedding(cover: ImageGray, beta: ChangeProbMap, seed: int | np.random.Generator) -> ImageGray:
    cover = check_image(cover)
    if beta.beta_plus.shape != cover.shape:
        raise EmbeddingError(f"probability map {beta.beta_plus.shape} does not match image {cover.shape}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    u = rng.random(cover.shape)
    change = np.zeros(cover.shape, dtype=np.int16)
    change[u < beta.beta_plus] = 1
    change[(u >= beta.beta_plus) & (u < beta.beta_plus + beta.beta_minus)] = -1
    stego = cover.astype(np.int16) + change
    if stego.min() < 0 or stego.max() > 255:
        raise EmbeddingError("embedding changed a wet direction")
    return stego.astype(np.uint8)


class EmbedResult(NamedTuple):
    stego: ImageGray
    noise: np.ndarray  # stego - cover, int16
    lam: float
    bpp: float


def embed(
    cover: ImageGray,
    cost_model_id: str,
    payload_bpp: float,
    seed: int | np.random.Generator,
) -> EmbedResult:
    cover = check_image(cover)
    cost_fn = get_cost_model(cost_model_id)
    cost = cost_fn(cover)
    lam, beta = solve_lambda(cost, payload_bpp)
    if payload_bpp == 0:
        beta = ChangeProbMap.zeros(cover.shape)
    stego = simulate_embedding(cover, beta, seed)
    achieved = ternary_entropy(beta) / cover.size
    logger.debug("embedded %s at %.6f bpp (target %.6f, lambda %.6g)", cost_model_id, achieved, payload_bpp, lam)
    return EmbedResult(stego, stego.astype(np.int16) - cover.astype(np.int16), lam, achieved)
