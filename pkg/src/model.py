"""Denoiser subnetwork, multi-context classifier and self-attention."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Any, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, KernelBankError, ShapeError
from .filters import gabor_bank, kv_kernel, srm_bank
from .layers import Activation, BatchNorm2d, Conv2d, Linear, Module
from .tensor import Parameter, Tensor, get_default_dtype

logger = logging.getLogger(__name__)

PREPROCESSING = ("none", "kv", "srm", "gabor", "learned_dn")
DN_INITS = ("srm", "gabor", "kaiming", "xavier")
DN_TARGETS = ("residual", "image")
MODEL_ACTIVATIONS = ("sigmoid", "tanh", "relu", "lrelu", "prelu", "tanh_then_relu")
KERNEL_CHOICES = (1, 3, 5)
POOL_WINDOW, POOL_STRIDE, POOL_PADDING = 3, 2, 1

# fields that do not change the parameter layout
_RUNTIME_FIELDS = ("end_to_end", "conv_method")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; every ablation is a different instance of this."""

    preprocessing: str = "learned_dn"
    dn_filters: int = 30
    dn_filter_size: int = 5
    dn_init: str = "srm"
    dn_target: str = "residual"
    end_to_end: bool = False
    depth: int = 6
    kernel_set: tuple[int, ...] = (1, 3, 5)
    branch_width: int = 32
    head_channels: int = 256
    activation: str = "prelu"
    attention: bool = True
    input_size: int = 256
    abs_blocks: tuple[int, ...] = (1,)
    pool_after: tuple[int, ...] = (2, 3, 4, 5)
    conv_method: str = "im2col"

    def __post_init__(self) -> None:
        for name in ("kernel_set", "abs_blocks", "pool_after"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.preprocessing not in PREPROCESSING:
            raise ConfigError(f"preprocessing must be one of {PREPROCESSING}, got {self.preprocessing!r}")
        if self.dn_init not in DN_INITS:
            raise ConfigError(f"dn_init must be one of {DN_INITS}, got {self.dn_init!r}")
        if self.dn_target not in DN_TARGETS:
            raise ConfigError(f"dn_target must be one of {DN_TARGETS}, got {self.dn_target!r}")
        if self.dn_filters < 1 or self.dn_filter_size not in (3, 5):
            raise ConfigError(f"dn_filters must be >= 1 and dn_filter_size 3 or 5, got {self.dn_filters}/{self.dn_filter_size}")
        if not 2 <= self.depth <= 8:
            raise ConfigError(f"depth must be in [2, 8], got {self.depth}")
        if not self.kernel_set or any(k not in KERNEL_CHOICES for k in self.kernel_set):
            raise ConfigError(f"kernel_set must be a non-empty subset of {KERNEL_CHOICES}, got {self.kernel_set}")
        if len(set(self.kernel_set)) != len(self.kernel_set):
            raise ConfigError(f"kernel_set has duplicates: {self.kernel_set}")
        if self.branch_width < 1 or self.head_channels < self.branch_width:
            raise ConfigError(f"head_channels ({self.head_channels}) must be >= branch_width ({self.branch_width}) >= 1")
        if self.activation not in MODEL_ACTIVATIONS:
            raise ConfigError(f"activation must be one of {MODEL_ACTIVATIONS}, got {self.activation!r}")
        if self.attention and self.head_channels % 8:
            raise ConfigError(f"head_channels must be divisible by 8 for attention, got {self.head_channels}")
        if any(b < 1 for b in self.abs_blocks + self.pool_after):
            raise ConfigError("abs_blocks and pool_after use 1-based block numbers")
        if self.conv_method not in ("im2col", "direct"):
            raise ConfigError(f"conv_method must be 'im2col' or 'direct', got {self.conv_method!r}")
        if self.input_size < 16:
            raise ConfigError(f"input_size must be >= 16, got {self.input_size}")
        if self.attention and self.head_size() < 2:
            raise ConfigError(f"attention needs a spatial size >= 2 at the head, got {self.head_size()}")

    @property
    def block_width(self) -> int:
        return len(self.kernel_set) * self.branch_width

    def pools_per_block(self) -> dict[int, int]:
        """Pooling count after each multi-context block.

        Pools scheduled after a block that does not exist (shallow models) are
        applied after the last multi-context block, so the head always sees
        the same spatial size.
        """
        last = self.depth - 1
        counts: dict[int, int] = {}
        for b in self.pool_after:
            target = min(b, last)
            counts[target] = counts.get(target, 0) + 1
        return counts

    def spatial_sizes(self) -> list[int]:
        """Spatial size after each multi-context block (blocks 1..depth-1)."""
        size, sizes = self.input_size, []
        pools = self.pools_per_block()
        for b in range(1, self.depth):
            for _ in range(pools.get(b, 0)):
                size = (size + 2 * POOL_PADDING - POOL_WINDOW) // POOL_STRIDE + 1
            sizes.append(size)
        return sizes

    def head_size(self) -> int:
        return self.spatial_sizes()[-1]

    def activation_for(self, block: int) -> str:
        if self.activation == "tanh_then_relu":
            return "tanh" if block <= 2 else "relu"
        return self.activation

    def to_dict(self) -> dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def architecture(self) -> dict[str, Any]:
        return {k: v for k, v in self.to_dict().items() if k not in _RUNTIME_FIELDS}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


def desk_config(**overrides: Any) -> ModelConfig:
    """Laptop-scale configuration: 64x64 inputs, 8 channels per branch."""
    base = dict(input_size=64, branch_width=8, head_channels=64)
    base.update(overrides)
    return ModelConfig(**base)


def as_batch(images: Any) -> Tensor:
    """Accept (N,H,W) or (N,1,H,W) arrays (any numeric dtype) or tensors."""
    if isinstance(images, Tensor):
        return images
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise ShapeError(f"expected a batch of grayscale images, got shape {arr.shape}")
    return Tensor(arr.astype(get_default_dtype()))


class Denoiser(Module):
    """Two convolutions: ``dn_filters`` maps, then a single residual estimate."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator) -> None:
        n, k = config.dn_filters, config.dn_filter_size
        weight = None
        if config.dn_init in ("srm", "gabor"):
            if (n, k) != (30, 5):
                raise KernelBankError(f"{config.dn_init} init needs 30 filters of size 5, got {n} of size {k}")
            bank = srm_bank() if config.dn_init == "srm" else gabor_bank()
            weight = bank.as_weight()
        self.layer1 = Conv2d(1, n, k, rng, init=config.dn_init if weight is None else "xavier",
                             weight=weight, method=config.conv_method)
        self.layer2 = Conv2d(n, 1, 5, rng, method=config.conv_method)
        self.assign_names()

    def features(self, x: Any) -> Tensor:
        return self.layer1(as_batch(x))

    def forward(self, x: Any) -> Tensor:
        return self.layer2(self.features(x))


def build_denoiser(config: ModelConfig, seed: int | np.random.Generator = 0) -> Denoiser:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return Denoiser(config, rng)


def denoiser_features(denoiser: Denoiser, images: Any) -> Tensor:
    return denoiser.features(images)


class FixedFilters(Module):
    """Constant preprocessing bank (no trainable parameters)."""

    def __init__(self, kind: str, rng: np.random.Generator, method: str) -> None:
        bank = {"kv": kv_kernel, "srm": srm_bank, "gabor": gabor_bank}[kind]()
        self.conv = Conv2d(1, len(bank), 5, rng, weight=bank.as_weight(), constant=True, method=method)
        self.out_channels = len(bank)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class MultiContextBlock(Module):
    def __init__(self, in_channels: int, index: int, config: ModelConfig, rng: np.random.Generator) -> None:
        self.index = index
        self.branches = [
            Conv2d(in_channels, config.branch_width, k, rng, method=config.conv_method) for k in config.kernel_set
        ]
        self.use_abs = index in config.abs_blocks
        self.bn = BatchNorm2d(config.block_width)
        self.act = Activation(config.activation_for(index), config.block_width)
        self.pools = config.pools_per_block().get(index, 0)

    def forward(self, x: Tensor) -> Tensor:
        out = T.concat_channels([branch(x) for branch in self.branches])
        if self.use_abs:
            out = T.abs_layer(out)
        out = self.act(self.bn(out))
        for _ in range(self.pools):
            out = T.avg_pool(out, POOL_WINDOW, POOL_STRIDE, POOL_PADDING)
        return out


class HeadBlock(Module):
    """1x1 convolution to ``head_channels`` followed by BN and activation."""

    def __init__(self, in_channels: int, config: ModelConfig, rng: np.random.Generator) -> None:
        self.conv = Conv2d(in_channels, config.head_channels, 1, rng, method=config.conv_method)
        self.bn = BatchNorm2d(config.head_channels)
        self.act = Activation(config.activation_for(config.depth), config.head_channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.act(self.bn(self.conv(x)))


class SelfAttention(Module):
    """Non-local attention over spatial positions with a zero-initialized gate.

    Query and key are 1x1 projections to C/8 channels, value keeps C. The
    attention matrix is a row-wise softmax of ``Q^T K`` and each output
    position aggregates value columns with its own attention row.
    """

    def __init__(self, channels: int, rng: np.random.Generator, method: str = "im2col") -> None:
        if channels % 8:
            raise ShapeError(f"self-attention needs channels divisible by 8, got {channels}")
        reduced = channels // 8
        self.query = Conv2d(channels, reduced, 1, rng, method=method)
        self.key = Conv2d(channels, reduced, 1, rng, method=method)
        self.value = Conv2d(channels, channels, 1, rng, method=method)
        self.gamma = Parameter("gamma", np.zeros(1, dtype=get_default_dtype()))
        self.last_attention: Optional[np.ndarray] = None

    def forward(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        positions = h * w
        q = T.reshape(self.query(x), (n, c // 8, positions))
        k = T.reshape(self.key(x), (n, c // 8, positions))
        v = T.reshape(self.value(x), (n, c, positions))
        energy = T.bmm(T.permute(q, (0, 2, 1)), k)
        attention = T.softmax(energy)
        self.last_attention = attention.data
        out = T.bmm(v, T.permute(attention, (0, 2, 1)))
        out = T.reshape(out, (n, c, h, w))
        return T.add(x, T.scale(out, self.gamma))


def self_attention(layer: SelfAttention, x: Tensor) -> Tensor:
    return layer(x)


class MCNet(Module):
    """Preprocessing, multi-context blocks, 1x1 head, attention, GAP, FC, softmax."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator) -> None:
        self.config = config
        if config.preprocessing == "learned_dn":
            self.denoiser = Denoiser(config, rng)
            self.denoiser.set_trainable(config.end_to_end)
            channels = config.dn_filters
        elif config.preprocessing == "none":
            channels = 1
        else:
            self.fixed = FixedFilters(config.preprocessing, rng, config.conv_method)
            channels = self.fixed.out_channels

        self.blocks = []
        for index in range(1, config.depth):
            self.blocks.append(MultiContextBlock(channels, index, config, rng))
            channels = config.block_width
        self.head = HeadBlock(channels, config, rng)
        if config.attention:
            self.attention = SelfAttention(config.head_channels, rng, method=config.conv_method)
        self.fc = Linear(config.head_channels, 2, rng)
        self.assign_names()

    def preprocess(self, x: Tensor) -> Tensor:
        if hasattr(self, "denoiser"):
            return self.denoiser.features(x)
        if hasattr(self, "fixed"):
            return self.fixed(x)
        return x

    def forward(self, images: Any, return_features: bool = False):
        x = as_batch(images)
        size = self.config.input_size
        if x.shape[2:] != (size, size):
            raise ShapeError(f"model expects {size}x{size} inputs, got {x.shape[2]}x{x.shape[3]}")
        out = self.preprocess(x)
        for block in self.blocks:
            out = block(out)
        head = self.head(out)
        features = {f"block{self.config.depth}": head.data}
        out = head
        if hasattr(self, "attention"):
            out = self.attention(out)
            features["attention"] = out.data
        probs = T.softmax(self.fc(T.global_avg_pool(out)))
        return (probs, features) if return_features else probs


def build_mcnet(config: ModelConfig, seed: int | np.random.Generator = 0) -> MCNet:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    model = MCNet(config, rng)
    logger.debug(
        "built model: depth=%d kernels=%s width=%d params=%d head=%dx%d",
        config.depth, config.kernel_set, config.block_width, model.num_parameters(),
        config.head_size(), config.head_size(),
    )
    return model


def forward(model: MCNet, images: Any) -> Tensor:
    return model(images)
