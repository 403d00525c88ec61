"""Self-check suite run by ``mcnet verify``: gradients, solver and metric oracles, persistence."""
from __future__ import annotations

import logging
import math
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import optimize, stats

from . import tensor as T
from .checkpoint import read_checkpoint, save_checkpoint
from .errors import CheckpointError, McnetError
from .filters import gabor_bank, gabor_kernel, read_bank, srm_bank, write_bank
from .gradcheck import grad_check, weighted_sum
from .metrics import RocCurve, ScoreSet, auc, pe_min, roc, wauc
from .model import SelfAttention, build_mcnet, desk_config
from .stego import CostMap, change_probabilities, solve_lambda, ternary_entropy
from .tensor import BatchNormState, Parameter, Tensor, default_dtype

logger = logging.getLogger(__name__)

CHECKS: dict[str, Callable[[np.random.Generator], None]] = {}

# elements sampled per parameter tensor in the full-network check; smaller tensors are checked whole
NETWORK_SAMPLES_PER_TENSOR = 6


def check(name: str):
    def _register(fn: Callable[[np.random.Generator], None]):
        CHECKS[name] = fn
        return fn

    return _register


@dataclass
class VerifyResult:
    seed: int
    passed: list[str] = field(default_factory=list)
    failures: list[tuple[str, str]] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        lines = [f"verify: {len(self.passed)} passed, {len(self.failures)} failed in {self.seconds:.1f}s (seed {self.seed})"]
        lines += [f"  FAIL {name}: {message}" for name, message in self.failures]
        return "\n".join(lines)


def _away_from_zero(rng: np.random.Generator, shape: tuple[int, ...], low: float = 0.1) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, 1.0, size=shape)


def _expect(report, label: str) -> None:
    if not report.passed:
        first = report.failures[0]
        raise AssertionError(
            f"{label}: max rel err {report.max_rel_error:.3e} > {report.tolerance:g} "
            f"(first at {first.tensor}{list(first.index)}: analytic {first.analytic:.6g}, numeric {first.numeric:.6g})"
        )


@check("layer gradients")
def check_layer_gradients(rng: np.random.Generator) -> None:
    with default_dtype(np.float64):
        x = Tensor(rng.normal(size=(2, 3, 6, 6)))
        w = Parameter("w", rng.normal(size=(4, 3, 3, 3)))
        b = Parameter("b", rng.normal(size=4))
        weights = rng.normal(size=(2, 4, 6, 6))
        for method in ("im2col", "direct"):
            r = grad_check(lambda: weighted_sum(T.conv2d(x, w, b, padding=1, method=method), weights), [x, w, b])
            _expect(r, f"conv2d[{method}]")

        gamma, beta = Parameter("gamma", rng.uniform(0.5, 1.5, 3)), Parameter("beta", rng.normal(size=3))
        bn_weights = rng.normal(size=(2, 3, 6, 6))
        r = grad_check(lambda: weighted_sum(T.batch_norm(x, gamma, beta, BatchNormState()), bn_weights), [x, gamma, beta])
        _expect(r, "batch_norm")

        xa = Tensor(_away_from_zero(rng, (2, 3, 4, 4)))
        act_weights = rng.normal(size=(2, 3, 4, 4))
        alpha = Parameter("alpha", np.full(3, 0.25))
        for kind in ("sigmoid", "tanh", "relu", "lrelu"):
            _expect(grad_check(lambda: weighted_sum(T.activation(xa, kind), act_weights), [xa]), kind)
        _expect(grad_check(lambda: weighted_sum(T.activation(xa, "prelu", alpha), act_weights), [xa, alpha]), "prelu")
        _expect(grad_check(lambda: weighted_sum(T.abs_layer(xa), act_weights), [xa]), "abs")

        a, c = Tensor(rng.normal(size=(2, 2, 4, 4))), Tensor(rng.normal(size=(2, 3, 4, 4)))
        cat_weights = rng.normal(size=(2, 5, 4, 4))
        _expect(grad_check(lambda: weighted_sum(T.concat_channels([a, c]), cat_weights), [a, c]), "concat")

        pool_weights = rng.normal(size=(2, 3, 3, 3))
        _expect(grad_check(lambda: weighted_sum(T.avg_pool(xa, 3, 2, 1), pool_weights), [xa]), "avg_pool")
        gap_weights = rng.normal(size=(2, 3))
        _expect(grad_check(lambda: weighted_sum(T.global_avg_pool(xa), gap_weights), [xa]), "global_avg_pool")

        feats = Tensor(rng.normal(size=(4, 5)))
        fc_w, fc_b = Parameter("fc_w", rng.normal(size=(2, 5))), Parameter("fc_b", rng.normal(size=2))
        labels = np.array([0, 1, 1, 0])
        r = grad_check(
            lambda: T.bce_loss(T.select_column(T.softmax(T.fully_connected(feats, fc_w, fc_b)), 1), labels),
            [feats, fc_w, fc_b],
        )
        _expect(r, "fc+softmax+bce")

        pred, target = Tensor(rng.normal(size=(2, 1, 4, 4))), Tensor(rng.normal(size=(2, 1, 4, 4)))
        r = grad_check(lambda: T.mse_loss(pred, target), [pred], tolerance=1e-8)
        _expect(r, "mse")

        layer = SelfAttention(8, rng)
        layer.gamma.data[:] = 0.7
        xs = Tensor(rng.normal(size=(1, 8, 4, 4)))
        att_weights = rng.normal(size=(1, 8, 4, 4))
        tensors = [xs] + layer.parameters()
        r = grad_check(lambda: weighted_sum(layer(xs), att_weights), tensors, tolerance=1e-5)
        _expect(r, "self_attention")


@check("conv paths agree")
def check_conv_paths(rng: np.random.Generator) -> None:
    x = Tensor(rng.normal(size=(2, 4, 16, 16)).astype(np.float32))
    w = Tensor(rng.normal(size=(6, 4, 5, 5)).astype(np.float32))
    b = Tensor(rng.normal(size=6).astype(np.float32))
    fast = T.conv2d(x, w, b, padding=2, method="im2col").data
    slow = T.conv2d(x, w, b, padding=2, method="direct").data
    err = float(np.abs(fast - slow).max())
    if err > 1e-4 * max(1.0, float(np.abs(slow).max())) and err > 1e-5:
        raise AssertionError(f"im2col and direct convolution differ by {err:.3e}")


@check("full network gradient")
def check_network_gradient(rng: np.random.Generator, max_per_tensor: int = NETWORK_SAMPLES_PER_TENSOR) -> None:
    with default_dtype(np.float64):
        config = desk_config(end_to_end=True)
        model = build_mcnet(config, seed=rng)
        model.attention.gamma.data[:] = 0.5
        images = Tensor(rng.integers(0, 256, size=(2, 1, 64, 64)).astype(np.float64))
        weights = rng.normal(size=(2, 2))
        named = model.named_parameters()
        r = grad_check(
            lambda: weighted_sum(model(images), weights),
            [p for _, p in named],
            tolerance=1e-4,
            names=[n for n, _ in named],
            max_per_tensor=max_per_tensor,
            seed=int(rng.integers(2**31)),
        )
    logger.info("full network gradient: %d elements over %d tensors", r.checked, len(named))
    _expect(r, "mcnet desk")


@check("kernel banks")
def check_kernel_banks(rng: np.random.Generator) -> None:
    srm = srm_bank()
    if len(srm) != 30 or srm.max_abs_sum() > 1e-9:
        raise AssertionError(f"SRM bank: {len(srm)} kernels, max |sum| {srm.max_abs_sum():.3e}")
    gabor = gabor_bank()
    if len(gabor) != 30 or gabor.max_abs_sum() > 1e-9:
        raise AssertionError(f"Gabor bank: {len(gabor)} kernels, max |sum| {gabor.max_abs_sum():.3e}")
    if gabor_kernel(1.0, 0.0)[2, 2] != 1.0:
        raise AssertionError("Gabor kernel centre must be 1 before mean subtraction")
    with tempfile.TemporaryDirectory() as tmp:
        for bank in (srm, gabor):
            path = Path(tmp) / f"{bank.source}.txt"
            write_bank(bank, path)
            back = read_bank(path)
            if not np.array_equal(back.kernels, bank.kernels) or back.names != bank.names:
                raise AssertionError(f"{bank.source} bank does not survive the text format")


def _constant_cost_lambda(c: float, payload: float) -> float:
    def gap(lam: float) -> float:
        e = math.exp(-lam * c)
        beta = e / (1 + 2 * e)
        p0 = 1 - 2 * beta
        bits = -2 * beta * math.log2(beta) - (p0 * math.log2(p0) if p0 > 0 else 0.0)
        return bits - payload

    return optimize.brentq(gap, 1e-9, 1e4, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)


@check("payload solver")
def check_payload_solver(rng: np.random.Generator) -> None:
    c = float(rng.uniform(0.1, 2.0))
    shape = (32, 32)
    cost = CostMap(np.full(shape, c), np.full(shape, c))
    lam, _ = solve_lambda(cost, 0.4)
    expected = _constant_cost_lambda(c, 0.4)
    if abs(lam - expected) / expected > 1e-9:
        raise AssertionError(f"constant-cost lambda {lam!r} vs closed form {expected!r}")
    for payload in (0.1, 0.2, 0.3, 0.4, 0.5):
        rho = rng.uniform(0.01, 5.0, size=shape)
        cost = CostMap(rho, rho.copy())
        _, beta = solve_lambda(cost, payload)
        achieved = ternary_entropy(beta) / rho.size
        if abs(achieved - payload) > 1e-6:
            raise AssertionError(f"payload {payload}: achieved {achieved:.9f} bpp")
    lam0, beta0 = solve_lambda(cost, 0.0)
    if ternary_entropy(beta0) / rho.size > 1e-6:
        raise AssertionError(f"zero payload left {ternary_entropy(beta0)} bits at lambda {lam0:g}")
    if not (change_probabilities(cost, 1.0).beta_plus >= 0).all():
        raise AssertionError("negative change probability")


def brute_force_pe(s: ScoreSet) -> float:
    """Exhaustive threshold enumeration, O(n^2)."""
    distinct = np.unique(s.scores)
    taus = [-np.inf] + [(a + b) / 2 for a, b in zip(distinct[:-1], distinct[1:])] + [np.inf]
    covers, stegos = s.covers, s.stegos
    best = 1.0
    for tau in taus:
        fa = int(np.sum(covers > tau))
        md = int(np.sum(stegos <= tau))
        best = min(best, 0.5 * (fa / covers.size + md / stegos.size))
    return best


def numeric_wauc(curve: RocCurve, orientation: str = "reference", points: int = 2_000_001) -> float:
    """Fine-grid integration of the band-weighted area."""
    weights = (2.0, 1.0) if orientation == "reference" else (1.0, 2.0)
    x = np.linspace(0.0, 1.0, points)
    y = np.interp(x, curve.fpr, curve.tpr)
    dx = x[1] - x[0]
    total = 0.0
    for w, (lo, hi) in zip(weights, ((0.0, 0.4), (0.4, 1.0))):
        band = np.clip(y, lo, hi) - lo
        total += w * float(np.sum((band[1:] + band[:-1]) / 2) * dx)
    return total / (weights[0] * 0.4 + weights[1] * 0.6)


@check("metric oracles")
def check_metric_oracles(rng: np.random.Generator) -> None:
    for _ in range(5):
        n = 200
        s = ScoreSet(np.round(rng.random(n), 2), rng.integers(0, 2, n))
        if (s.labels == 0).all() or (s.labels == 1).all():
            continue
        if pe_min(s) != brute_force_pe(s):
            raise AssertionError(f"pe_min {pe_min(s)} != exhaustive {brute_force_pe(s)}")
        u = stats.mannwhitneyu(s.stegos, s.covers, alternative="two-sided").statistic
        expected = u / (s.stegos.size * s.covers.size)
        if abs(auc(roc(s)) - expected) > 1e-12:
            raise AssertionError(f"AUC {auc(roc(s))} vs Mann-Whitney {expected}")
    diagonal = RocCurve(np.array([0.0, 1.0]), np.array([0.0, 1.0]))
    if abs(wauc(diagonal) - numeric_wauc(diagonal)) > 1e-9:
        raise AssertionError(f"chance WAUC {wauc(diagonal)} vs numeric {numeric_wauc(diagonal)}")


@check("checkpoint integrity")
def check_checkpoint(rng: np.random.Generator) -> None:
    config = desk_config(attention=True)
    model = build_mcnet(config, seed=rng)
    model.train()
    model(rng.integers(0, 256, size=(2, 64, 64)))
    with tempfile.TemporaryDirectory() as tmp:
        path = save_checkpoint(Path(tmp) / "model.ckpt", model, config, {"epoch": 3})
        back = read_checkpoint(path).params()
        for name, value in model.state_dict().items():
            if not np.array_equal(back[name], value):
                raise AssertionError(f"{name} changed across save/load")
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        try:
            read_checkpoint(path)
        except CheckpointError:
            pass
        else:
            raise AssertionError("corrupted checkpoint was not detected")


@check("attention gate")
def check_attention_gate(rng: np.random.Generator) -> None:
    layer = SelfAttention(16, rng)
    x = Tensor(rng.normal(size=(2, 16, 4, 4)).astype(np.float32))
    out = layer(x)
    if not np.array_equal(out.data, x.data):
        raise AssertionError("self-attention with gamma=0 is not the identity")
    rows = layer.last_attention.sum(axis=-1)
    if np.abs(rows - 1).max() > 1e-6:
        raise AssertionError("attention rows do not sum to 1")


def run_checks(seed: int = 0, only: Optional[list[str]] = None) -> VerifyResult:
    result = VerifyResult(seed=seed)
    start = time.perf_counter()
    for index, (name, fn) in enumerate(CHECKS.items()):
        if only and name not in only:
            continue
        rng = np.random.default_rng([seed, index])
        try:
            fn(rng)
        except (AssertionError, McnetError) as e:
            logger.error("check %r failed (seed %d): %s", name, seed, e)
            result.failures.append((name, str(e)))
            continue
        logger.info("check %r passed", name)
        result.passed.append(name)
    result.seconds = time.perf_counter() - start
    return result
