"""Minimal dense-tensor autograd engine.

Only the forward/backward operations the detector needs are provided. Every
op is a :class:`Function` subclass whose ``forward`` works on raw numpy arrays
and whose ``backward`` returns one gradient (or ``None``) per input tensor.
Training runs in float32; float64 exists for finite-difference checks and is
selected with :func:`default_dtype`.
"""
from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass
from typing import Any, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import BatchNormStateError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

_default_dtype: type = np.float32

ACTIVATIONS = ("sigmoid", "tanh", "relu", "lrelu", "prelu")
LRELU_SLOPE = 0.01


@contextlib.contextmanager
def default_dtype(dtype: Any) -> Iterator[None]:
    """Temporarily switch the dtype used for newly created tensors."""
    global _default_dtype
    previous = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = previous


def get_default_dtype() -> type:
    return _default_dtype


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{where} produced non-finite values")


class Function:
    """Base class for differentiable operations."""

    def __init__(self, *tensors: "Tensor") -> None:
        self.tensors = tensors

    def forward(self, *args: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, grad: np.ndarray) -> tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        func = cls(*tensors)
        out = func.forward(*(t.data for t in tensors), **kwargs)
        _check_finite(out, f"{cls.__name__}.forward")
        requires_grad = any(t.requires_grad for t in tensors)
        return Tensor(out, requires_grad=requires_grad, creator=func if requires_grad else None)


class Tensor:
    """N-dimensional array with an optional gradient slot."""

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        creator: Optional[Function] = None,
        dtype: Any = None,
    ) -> None:
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _default_dtype
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.creator = creator
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def precision(self) -> str:
        return "f64" if self.data.dtype == np.float64 else "f32"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Back-propagate from this tensor through the recorded graph."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node.creator is not None:
                for parent in node.creator.tensors:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.creator is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            input_grads = node.creator.backward(g)
            for parent, pg in zip(node.creator.tensors, input_grads):
                if pg is None or not parent.requires_grad:
                    continue
                _check_finite(pg, f"{type(node.creator).__name__}.backward")
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, precision={self.precision}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A trainable tensor with a dotted name and Adamax optimizer state."""

    def __init__(self, name: str, data: Any, requires_grad: bool = True, dtype: Any = None) -> None:
        super().__init__(data, requires_grad=requires_grad, dtype=dtype)
        self.name = name
        self.m: Optional[np.ndarray] = None
        self.u: Optional[np.ndarray] = None
        self.t = 0

    def reset_state(self) -> None:
        self.m = np.zeros_like(self.data)
        self.u = np.zeros_like(self.data)
        self.t = 0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# --------------------------------------------------------------------------- convolution


def _pad_spatial(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _output_extent(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


class Conv2d(Function):
    def forward(
        self,
        x: np.ndarray,
        w: np.ndarray,
        b: np.ndarray,
        stride: int = 1,
        padding: int = 0,
        method: str = "im2col",
    ) -> np.ndarray:
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {w.shape}")
        n, c, h, wd = x.shape
        k, wc, kh, kw = w.shape
        if wc != c:
            raise ShapeError(f"conv2d: input has {c} channels but weight expects {wc}")
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
        if b.shape != (k,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {k} kernels")
        ho, wo = _output_extent(h, kh, stride, padding), _output_extent(wd, kw, stride, padding)
        if ho <= 0 or wo <= 0:
            raise ShapeError(f"conv2d: zero-size output for input {h}x{wd}, kernel {kh}x{kw}, stride {stride}")

        xp = _pad_spatial(x, padding)
        self.stride, self.padding, self.method = stride, padding, method
        self.x_shape, self.out_hw = x.shape, (ho, wo)
        self.xp, self.w = xp, w

        if method == "im2col":
            windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
            self.windows = windows
            out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))  # N,Ho,Wo,K
            out = out.transpose(0, 3, 1, 2)
        elif method == "direct":
            out = np.zeros((n, k, ho, wo), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
                    out += np.einsum("nchw,kc->nkhw", patch, w[:, :, i, j], optimize=True)
        else:
            raise ValueError(f"unknown convolution method {method!r}")
        return np.ascontiguousarray(out + b[None, :, None, None], dtype=x.dtype)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        w, xp, s = self.w, self.xp, self.stride
        ho, wo = self.out_hw
        _, _, kh, kw = w.shape

        db = grad.sum(axis=(0, 2, 3))
        if self.method == "im2col":
            dw = np.tensordot(grad, self.windows, axes=([0, 2, 3], [0, 2, 3]))
        else:
            dw = np.empty_like(w)
            for i in range(kh):
                for j in range(kw):
                    patch = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
                    dw[:, :, i, j] = np.einsum("nkhw,nchw->kc", grad, patch, optimize=True)

        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += np.einsum(
                    "nkhw,kc->nchw", grad, w[:, :, i, j], optimize=True
                )
        p = self.padding
        h, wd = self.x_shape[2], self.x_shape[3]
        dx = dxp[:, :, p : p + h, p : p + wd] if p else dxp
        return np.ascontiguousarray(dx), dw.astype(w.dtype, copy=False), db


def conv2d(
    input: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0, method: str = "im2col"
) -> Tensor:
    return Conv2d.apply(input, weight, bias, stride=stride, padding=padding, method=method)


# --------------------------------------------------------------------------- batch norm


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer (``None`` until the first train step)."""

    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    momentum: float = 0.9
    eps: float = 1e-5

    @property
    def initialized(self) -> bool:
        return self.running_mean is not None and self.running_var is not None


class BatchNorm(Function):
    def forward(
        self, x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, state: BatchNormState, training: bool = True
    ) -> np.ndarray:
        c = x.shape[1]
        if gamma.shape != (c,) or beta.shape != (c,):
            raise ShapeError(f"batch_norm: gamma/beta must have shape ({c},)")
        axes = (0,) + tuple(range(2, x.ndim))
        view = (1, c) + (1,) * (x.ndim - 2)
        count = x.size // c
        self.axes, self.view, self.training, self.count = axes, view, training, count

        if training:
            if count < 2:
                raise ShapeError(f"batch_norm: need at least 2 values per channel in train mode, got {count}")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            unbiased = var * count / (count - 1)
            if state.initialized:
                state.running_mean = state.momentum * state.running_mean + (1 - state.momentum) * mean
                state.running_var = state.momentum * state.running_var + (1 - state.momentum) * unbiased
            else:
                state.running_mean, state.running_var = mean.copy(), unbiased.copy()
        else:
            if not state.initialized:
                raise BatchNormStateError("batch_norm: eval mode requested before any training step")
            mean = state.running_mean.astype(x.dtype, copy=False)
            var = state.running_var.astype(x.dtype, copy=False)

        inv_std = 1.0 / np.sqrt(var + state.eps)
        x_hat = (x - mean.reshape(view)) * inv_std.reshape(view)
        self.x_hat, self.inv_std, self.gamma = x_hat, inv_std, gamma
        return gamma.reshape(view) * x_hat + beta.reshape(view)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        axes, view, x_hat = self.axes, self.view, self.x_hat
        dgamma = (grad * x_hat).sum(axis=axes)
        dbeta = grad.sum(axis=axes)
        dx_hat = grad * self.gamma.reshape(view)
        inv_std = self.inv_std.reshape(view)
        if not self.training:
            return dx_hat * inv_std, dgamma, dbeta
        m = self.count
        dx = (inv_std / m) * (
            m * dx_hat
            - dx_hat.sum(axis=axes).reshape(view)
            - x_hat * (dx_hat * x_hat).sum(axis=axes).reshape(view)
        )
        return dx, dgamma, dbeta


def batch_norm(input: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    return BatchNorm.apply(input, gamma, beta, state=state, training=mode == "train")


# --------------------------------------------------------------------------- activations


class Sigmoid(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.out = expit(x)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * self.out * (1 - self.out),)


class Tanh(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.out = np.tanh(x)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * (1 - self.out**2),)


class LeakyReLU(Function):
    """``x`` for ``x > 0``, ``slope * x`` otherwise (slope 0 gives ReLU)."""

    def forward(self, x: np.ndarray, slope: float = 0.0) -> np.ndarray:
        self.positive = x > 0
        self.slope = slope
        return np.where(self.positive, x, x * x.dtype.type(slope))

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (np.where(self.positive, grad, grad * grad.dtype.type(self.slope)),)


class PReLU(Function):
    def forward(self, x: np.ndarray, alpha: np.ndarray) -> np.ndarray:
        c = x.shape[1]
        if alpha.shape != (c,):
            raise ShapeError(f"prelu: expected {c} slopes, got shape {alpha.shape}")
        self.view = (1, c) + (1,) * (x.ndim - 2)
        self.axes = (0,) + tuple(range(2, x.ndim))
        self.x, self.alpha = x, alpha
        self.positive = x > 0
        return np.where(self.positive, x, x * alpha.reshape(self.view))

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        dx = np.where(self.positive, grad, grad * self.alpha.reshape(self.view))
        dalpha = np.where(self.positive, 0, grad * self.x).sum(axis=self.axes)
        return dx, dalpha.astype(self.alpha.dtype, copy=False)


def activation(input: Tensor, kind: str, alpha: Optional[Tensor] = None) -> Tensor:
    if kind == "sigmoid":
        return Sigmoid.apply(input)
    if kind == "tanh":
        return Tanh.apply(input)
    if kind == "relu":
        return LeakyReLU.apply(input, slope=0.0)
    if kind == "lrelu":
        return LeakyReLU.apply(input, slope=LRELU_SLOPE)
    if kind == "prelu":
        if alpha is None:
            raise ShapeError("prelu needs a per-channel alpha tensor")
        return PReLU.apply(input, alpha)
    raise ValueError(f"unknown activation {kind!r} (expected one of {ACTIVATIONS})")


# --------------------------------------------------------------------------- elementwise / structural


class Abs(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.sign = np.sign(x)
        return np.abs(x)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad * self.sign,)


def abs_layer(input: Tensor) -> Tensor:
    return Abs.apply(input)


class ConcatChannels(Function):
    def forward(self, *xs: np.ndarray) -> np.ndarray:
        ref = xs[0].shape
        for x in xs[1:]:
            if x.ndim != len(ref) or x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
                raise ShapeError(f"concat_channels: {x.shape} does not match {ref} outside the channel axis")
        self.sizes = [x.shape[1] for x in xs]
        return np.concatenate(xs, axis=1)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, ...]:
        bounds = np.cumsum(self.sizes)[:-1]
        return tuple(np.ascontiguousarray(g) for g in np.split(grad, bounds, axis=1))


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    return ConcatChannels.apply(*inputs)


class SliceChannels(Function):
    def forward(self, x: np.ndarray, start: int = 0, stop: int = 0) -> np.ndarray:
        self.x_shape, self.start, self.stop = x.shape, start, stop
        return x[:, start:stop].copy()

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        out = np.zeros(self.x_shape, dtype=grad.dtype)
        out[:, self.start : self.stop] = grad
        return (out,)


def split_channels(input: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if sum(sizes) != input.shape[1]:
        raise ShapeError(f"split_channels: sizes {list(sizes)} do not sum to {input.shape[1]}")
    pieces, start = [], 0
    for size in sizes:
        pieces.append(SliceChannels.apply(input, start=start, stop=start + size))
        start += size
    return pieces


class AvgPool(Function):
    def forward(self, x: np.ndarray, window: int = 3, stride: int = 2, padding: int = 0) -> np.ndarray:
        h, w = x.shape[2], x.shape[3]
        if window > h + 2 * padding or window > w + 2 * padding:
            raise ShapeError(f"avg_pool: window {window} exceeds padded extent {h}x{w}")
        ho, wo = _output_extent(h, window, stride, padding), _output_extent(w, window, stride, padding)
        xp = _pad_spatial(x, padding)
        windows = sliding_window_view(xp, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
        self.xp_shape, self.x_shape = xp.shape, x.shape
        self.window, self.stride, self.padding, self.out_hw = window, stride, padding, (ho, wo)
        return windows.mean(axis=(4, 5)).astype(x.dtype, copy=False)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        k, s, p = self.window, self.stride, self.padding
        ho, wo = self.out_hw
        share = grad / (k * k)
        dxp = np.zeros(self.xp_shape, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += share
        h, w = self.x_shape[2], self.x_shape[3]
        return (np.ascontiguousarray(dxp[:, :, p : p + h, p : p + w]),)


def avg_pool(input: Tensor, window: int, stride: int, padding: int = 0) -> Tensor:
    return AvgPool.apply(input, window=window, stride=stride, padding=padding)


class GlobalAvgPool(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.x_shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        n, c, h, w = self.x_shape
        return (np.broadcast_to(grad[:, :, None, None] / (h * w), self.x_shape).copy(),)


def global_avg_pool(input: Tensor) -> Tensor:
    return GlobalAvgPool.apply(input)


class Linear(Function):
    def forward(self, x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"fully_connected: input {x.shape} does not match weight {w.shape}")
        self.x, self.w = x, w
        return x @ w.T + b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return grad @ self.w, grad.T @ self.x, grad.sum(axis=0)


def fully_connected(input: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return Linear.apply(input, weight, bias)


class Softmax(Function):
    """Softmax along the last axis, stabilized by max-subtraction."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        s = self.out
        return (s * (grad - (grad * s).sum(axis=-1, keepdims=True)),)


def softmax(logits: Tensor) -> Tensor:
    return Softmax.apply(logits)


class Reshape(Function):
    def forward(self, x: np.ndarray, shape: tuple[int, ...] = ()) -> np.ndarray:
        self.x_shape = x.shape
        return x.reshape(shape)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (grad.reshape(self.x_shape),)


def reshape(input: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(input, shape=tuple(shape))


class Permute(Function):
    def forward(self, x: np.ndarray, axes: tuple[int, ...] = ()) -> np.ndarray:
        self.inverse = tuple(np.argsort(axes))
        return np.ascontiguousarray(x.transpose(axes))

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        return (np.ascontiguousarray(grad.transpose(self.inverse)),)


def permute(input: Tensor, axes: Sequence[int]) -> Tensor:
    return Permute.apply(input, axes=tuple(axes))


class BatchMatMul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"bmm: cannot multiply {a.shape} by {b.shape}")
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return np.matmul(grad, self.b.transpose(0, 2, 1)), np.matmul(self.a.transpose(0, 2, 1), grad)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    return BatchMatMul.apply(a, b)


class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ (no broadcasting)")
        return a + b

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return grad, grad


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


class ScalarGate(Function):
    """``gamma[0] * x`` for a one-element learnable ``gamma``."""

    def forward(self, x: np.ndarray, gamma: np.ndarray) -> np.ndarray:
        if gamma.size != 1:
            raise ShapeError(f"scalar gate expects one element, got shape {gamma.shape}")
        self.x, self.gamma = x, gamma
        return gamma.reshape(()) * x

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        dgamma = np.asarray((grad * self.x).sum(), dtype=self.gamma.dtype).reshape(self.gamma.shape)
        return grad * self.gamma.reshape(()), dgamma


def scale(input: Tensor, gamma: Tensor) -> Tensor:
    return ScalarGate.apply(input, gamma)


class SelectColumn(Function):
    def forward(self, x: np.ndarray, column: int = 0) -> np.ndarray:
        self.x_shape, self.column = x.shape, column
        return x[:, column].copy()

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        out = np.zeros(self.x_shape, dtype=grad.dtype)
        out[:, self.column] = grad
        return (out,)


def select_column(input: Tensor, column: int) -> Tensor:
    return SelectColumn.apply(input, column=column)


# --------------------------------------------------------------------------- losses


class MSELoss(Function):
    def forward(self, pred: np.ndarray, target: np.ndarray) -> np.ndarray:
        if pred.shape != target.shape:
            raise ShapeError(f"mse_loss: prediction {pred.shape} and target {target.shape} differ")
        self.diff = pred - target
        return np.asarray(np.mean(self.diff**2), dtype=pred.dtype)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g = grad * 2 * self.diff / self.diff.size
        return g, -g


def mse_loss(pred: Tensor, target: Tensor | np.ndarray) -> Tensor:
    return MSELoss.apply(pred, as_tensor(target))


BCE_EPS = 1e-7


class BCELoss(Function):
    def forward(self, p: np.ndarray, labels: Optional[np.ndarray] = None) -> np.ndarray:
        if p.size == 0:
            raise ShapeError("bce_loss: empty batch")
        y = np.asarray(labels, dtype=np.float64).reshape(p.shape)
        clamped = np.clip(p.astype(np.float64), BCE_EPS, 1 - BCE_EPS)
        self.y, self.clamped, self.p_dtype = y, clamped, p.dtype
        self.inside = (p >= BCE_EPS) & (p <= 1 - BCE_EPS)
        loss = -np.mean(y * np.log(clamped) + (1 - y) * np.log1p(-clamped))
        return np.asarray(loss, dtype=p.dtype)

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray]:
        y, q = self.y, self.clamped
        dp = -(y / q - (1 - y) / (1 - q)) / y.size
        dp = np.where(self.inside, dp, 0.0) * grad
        return (dp.astype(self.p_dtype),)


def bce_loss(probabilities: Tensor, labels: Sequence[int] | np.ndarray) -> Tensor:
    return BCELoss.apply(probabilities, labels=np.asarray(labels))
