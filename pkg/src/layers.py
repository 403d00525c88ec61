"""Stateful layer objects built from the functional ops in :mod:`src.tensor`."""
from __future__ import annotations

import logging
from typing import Any, Iterator, Optional

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .filters import random_init
from .tensor import BatchNormState, Parameter, Tensor, get_default_dtype

logger = logging.getLogger(__name__)

PRELU_INIT = 0.25


class Module:
    """Base class: parameter discovery, train/eval switching and state snapshots.

    Parameters and sub-modules are found by walking instance attributes in
    definition order (lists and dicts of modules included), which keeps
    dotted names such as ``blocks.0.branches.1.weight`` stable across runs.
    """

    training: bool = True

    def forward(self, *args: Any, **kwargs: Any) -> Any:
        raise NotImplementedError

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, Any]]:
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module, BatchNormState)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{i}", item
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{k}", item

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Parameter]]:
        out: list[tuple[str, Parameter]] = []
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                out.append((name, value))
            elif isinstance(value, Module):
                out.extend(value.named_parameters(prefix=f"{name}."))
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def named_buffers(self, prefix: str = "") -> list[tuple[str, BatchNormState]]:
        out: list[tuple[str, BatchNormState]] = []
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, BatchNormState):
                out.append((name, value))
            elif isinstance(value, Module):
                out.extend(value.named_buffers(prefix=f"{name}."))
        return out

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def assign_names(self) -> "Module":
        for name, p in self.named_parameters():
            p.name = name
        return self

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of all parameters and batch-norm running statistics."""
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        for name, bn in self.named_buffers():
            if bn.initialized:
                state[f"{name}.running_mean"] = bn.running_mean.copy()
                state[f"{name}.running_var"] = bn.running_var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        seen = set()
        for name, p in params.items():
            if name not in state:
                if strict:
                    raise ShapeError(f"missing tensor {name!r} in state")
                continue
            value = state[name]
            if value.shape != p.data.shape:
                raise ShapeError(f"{name}: expected shape {p.data.shape}, got {value.shape}")
            p.data = np.array(value, dtype=p.data.dtype, copy=True)
            seen.add(name)
        for name, bn in buffers.items():
            mean, var = state.get(f"{name}.running_mean"), state.get(f"{name}.running_var")
            if mean is not None and var is not None:
                bn.running_mean, bn.running_var = mean.copy(), var.copy()
                seen.update({f"{name}.running_mean", f"{name}.running_var"})
        extra = set(state) - seen
        if strict and extra:
            raise ShapeError(f"unexpected tensors in state: {sorted(extra)[:5]}")


class Conv2d(Module):
    """Same-padded convolution; ``constant=True`` stores the weights as plain tensors."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        init: str = "xavier",
        weight: Optional[np.ndarray] = None,
        constant: bool = False,
        method: str = "im2col",
    ) -> None:
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        if weight is None:
            weight = random_init(shape, init, rng).data
        elif weight.shape != shape:
            raise ShapeError(f"conv weight must be {shape}, got {weight.shape}")
        dtype = get_default_dtype()
        bias = np.zeros(out_channels, dtype=dtype)
        if constant:
            self.weight_const = Tensor(weight, dtype=dtype)
            self.bias_const = Tensor(bias, dtype=dtype)
        else:
            self.weight = Parameter("weight", weight, dtype=dtype)
            self.bias = Parameter("bias", bias, dtype=dtype)
        self.constant = constant
        self.padding = kernel_size // 2
        self.method = method
        self.out_channels = out_channels

    def forward(self, x: Tensor) -> Tensor:
        if self.constant:
            w, b = self.weight_const, self.bias_const
        else:
            w, b = self.weight, self.bias
        return T.conv2d(x, w, b, stride=1, padding=self.padding, method=self.method)


class BatchNorm2d(Module):
    def __init__(self, channels: int) -> None:
        dtype = get_default_dtype()
        self.gamma = Parameter("gamma", np.ones(channels, dtype=dtype))
        self.beta = Parameter("beta", np.zeros(channels, dtype=dtype))
        self.state = BatchNormState()

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.state, mode="train" if self.training else "eval")


class Activation(Module):
    """Pointwise nonlinearity; PReLU owns one learnable slope per channel."""

    def __init__(self, kind: str, channels: int) -> None:
        if kind not in T.ACTIVATIONS:
            raise ValueError(f"unknown activation {kind!r} (expected one of {T.ACTIVATIONS})")
        self.kind = kind
        if kind == "prelu":
            self.alpha = Parameter("alpha", np.full(channels, PRELU_INIT, dtype=get_default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return T.activation(x, self.kind, getattr(self, "alpha", None))


class Linear(Module):
    """Fully connected layer, weights drawn from Gaussian(0, 0.01)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator) -> None:
        weight = random_init((out_features, in_features), "gaussian", rng, mean=0.0, std=0.01).data
        self.weight = Parameter("weight", weight)
        self.bias = Parameter("bias", np.zeros(out_features, dtype=get_default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return T.fully_connected(x, self.weight, self.bias)
