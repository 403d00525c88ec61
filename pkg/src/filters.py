"""Fixed preprocessing kernels (SRM, KV, Gabor) and random initializers."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import KernelBankError
from .tensor import Tensor, get_default_dtype

logger = logging.getLogger(__name__)

KERNEL_SIZE = 5
SRM_SHA256 = "67d4013f00e207b74930cc23b43e69abed84ef0d2f35f20bb95d9b401e0fe7d7"
ZERO_SUM_TOL = 1e-9

BANK_SOURCES = ("srm", "kv", "gabor", "learned")


@dataclass(frozen=True, eq=False)
class KernelBank:
    """An ordered set of 5x5 kernels with per-kernel names."""

    kernels: np.ndarray  # (n, 5, 5) float64
    names: tuple[str, ...]
    source: str

    def __post_init__(self) -> None:
        if self.kernels.ndim != 3 or self.kernels.shape[1:] != (KERNEL_SIZE, KERNEL_SIZE):
            raise KernelBankError(f"kernels must be (n, 5, 5), got {self.kernels.shape}")
        if len(self.names) != len(self.kernels):
            raise KernelBankError(f"{len(self.names)} names for {len(self.kernels)} kernels")
        if self.source not in BANK_SOURCES:
            raise KernelBankError(f"unknown bank source {self.source!r}")

    def __len__(self) -> int:
        return len(self.kernels)

    def as_weight(self, dtype=None) -> np.ndarray:
        """Kernels shaped as a single-input-channel conv weight ``(n, 1, 5, 5)``."""
        return self.kernels[:, None, :, :].astype(dtype or get_default_dtype())

    def max_abs_sum(self) -> float:
        return float(np.abs(self.kernels.sum(axis=(1, 2))).max())


def pad_to_5x5(kernel: np.ndarray) -> np.ndarray:
    """Zero-pad an odd square kernel symmetrically to 5x5."""
    k = kernel.shape[0]
    if kernel.shape != (k, k) or k % 2 == 0 or k > KERNEL_SIZE:
        raise KernelBankError(f"cannot pad kernel of shape {kernel.shape} to 5x5")
    margin = (KERNEL_SIZE - k) // 2
    return np.pad(kernel, margin)


# --------------------------------------------------------------------------- text format


def _parse_bank(text: str, default_source: str = "learned") -> KernelBank:
    source = default_source
    names: list[str] = []
    kernels: list[np.ndarray] = []
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line:
            continue
        if line.startswith("#"):
            body = line.lstrip("#").strip()
            if body.startswith("source:"):
                source = body.split(":", 1)[1].strip()
            continue
        parts = line.split()
        if parts[0] != "kernel" or len(parts) < 3:
            raise KernelBankError(f"line {i}: expected 'kernel <name> <rows>x<cols> [/divisor]', got {line!r}")
        name = parts[1]
        rows, cols = (int(v) for v in parts[2].lower().split("x"))
        divisor = float(parts[3].lstrip("/")) if len(parts) > 3 else 1.0
        values = []
        for _ in range(rows):
            row = [float(v) for v in lines[i].split()]
            i += 1
            if len(row) != cols:
                raise KernelBankError(f"line {i}: kernel {name} expects {cols} values per row")
            values.append(row)
        kernel = np.array(values, dtype=np.float64)
        if divisor != 1.0:
            kernel = kernel / divisor
        names.append(name)
        kernels.append(pad_to_5x5(kernel) if kernel.shape != (KERNEL_SIZE, KERNEL_SIZE) else kernel)
    if not kernels:
        raise KernelBankError("no kernels found")
    return KernelBank(np.stack(kernels), tuple(names), source)


def format_bank(bank: KernelBank) -> str:
    """Render a bank in the plain-text matrix format (shortest round-trip decimals)."""
    out = [f"# source: {bank.source}"]
    for name, kernel in zip(bank.names, bank.kernels):
        out.append(f"kernel {name} {KERNEL_SIZE}x{KERNEL_SIZE}")
        for row in kernel:
            out.append(" ".join(repr(float(v)) for v in row))
        out.append("")
    return "\n".join(out)


def write_bank(bank: KernelBank, path: str | Path) -> None:
    Path(path).write_text(format_bank(bank), encoding="utf-8")


def read_bank(path: str | Path) -> KernelBank:
    return _parse_bank(Path(path).read_text(encoding="utf-8"))


def _check_zero_sum(bank: KernelBank) -> KernelBank:
    worst = bank.max_abs_sum()
    if worst > ZERO_SUM_TOL:
        raise KernelBankError(f"{bank.source} bank is not zero-sum (max |sum| = {worst:.3e})")
    return bank


# --------------------------------------------------------------------------- banks


def srm_bank() -> KernelBank:
    """The 30 SRM residual kernels, zero-padded to 5x5."""
    raw = resources.files("src").joinpath("data", "srm_kernels.txt").read_bytes()
    digest = hashlib.sha256(raw).hexdigest()
    if digest != SRM_SHA256:
        raise KernelBankError(f"SRM data file checksum mismatch: {digest}")
    bank = _parse_bank(raw.decode("utf-8"), default_source="srm")
    if len(bank) != 30:
        raise KernelBankError(f"SRM bank must hold 30 kernels, found {len(bank)}")
    return _check_zero_sum(bank)


_KV = np.array(
    [
        [-1, 2, -2, 2, -1],
        [2, -6, 8, -6, 2],
        [-2, 8, -12, 8, -2],
        [2, -6, 8, -6, 2],
        [-1, 2, -2, 2, -1],
    ],
    dtype=np.float64,
)


def kv_kernel() -> KernelBank:
    return _check_zero_sum(KernelBank((_KV / 12.0)[None], ("kv",), "kv"))


def gabor_kernel(sigma: float, theta: float, gamma: float = 0.5, psi: float = 0.0) -> np.ndarray:
    """Even Gabor kernel on the integer grid x, y in [-2, 2] (rows index y)."""
    wavelength = sigma / 0.56
    half = KERNEL_SIZE // 2
    y, x = np.mgrid[-half : half + 1, -half : half + 1].astype(np.float64)
    x_rot = x * math.cos(theta) + y * math.sin(theta)
    y_rot = -x * math.sin(theta) + y * math.cos(theta)
    envelope = np.exp(-(x_rot**2 + gamma**2 * y_rot**2) / (2 * sigma**2))
    return envelope * np.cos(2 * math.pi * x_rot / wavelength + psi)


def gabor_bank(
    sigmas: Sequence[float] = (0.5, 1.0),
    gamma: float = 0.5,
    orientations: int = 15,
    zero_mean: bool = True,
) -> KernelBank:
    """Scales outer, orientations inner; theta = k*pi/orientations."""
    kernels, names = [], []
    for sigma in sigmas:
        for k in range(orientations):
            theta = k * math.pi / orientations
            g = gabor_kernel(sigma, theta, gamma)
            if zero_mean:
                g = g - g.mean()
            kernels.append(g)
            names.append(f"gabor_s{sigma:g}_o{k}")
    bank = KernelBank(np.stack(kernels), tuple(names), "gabor")
    return _check_zero_sum(bank) if zero_mean else bank


# --------------------------------------------------------------------------- initializers

INIT_KINDS = ("xavier", "kaiming", "gaussian")


def _fans(shape: Sequence[int]) -> tuple[int, int]:
    if len(shape) == 2:
        return shape[1], shape[0]
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def random_init(
    shape: Sequence[int],
    kind: str,
    seed: int | np.random.Generator,
    mean: float = 0.0,
    std: float = 0.01,
    dtype=None,
) -> Tensor:
    """Deterministic random tensor; ``seed`` may be an int or a shared Generator."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shape = tuple(int(s) for s in shape)
    if kind == "xavier":
        fan_in, fan_out = _fans(shape)
        values = rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=shape)
    elif kind == "kaiming":
        fan_in, _ = _fans(shape)
        values = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    elif kind == "gaussian":
        values = rng.normal(mean, std, size=shape)
    else:
        raise ValueError(f"unknown init kind {kind!r} (expected one of {INIT_KINDS})")
    return Tensor(values, dtype=dtype or get_default_dtype())
