"""Fixed layer zoo with explicit forward and backward passes.

All layers act on a leading batch axis and never mix samples: every
forward product is computed one sample at a time, so a batched forward is
bit-identical to stacking single-sample forwards. Parameter gradients are
reduced over the batch in ascending sample order (``Dense`` optionally by
row groups, see :meth:`Dense.backward`).

Kernels are dtype-generic; training runs in float32, gradient checks
in float64.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, ClassVar, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import Rng

MODES = ("train", "eval")


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class Layer:
    """Base class. Subclasses are frozen dataclasses holding hyper-parameters."""

    roles: ClassVar[tuple[str, ...]] = ()

    @property
    def name(self) -> str:
        return type(self).__name__

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        return {}

    def fans(self, role: str) -> tuple[int, int]:
        raise KeyError(role)

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Per-sample output shape (batch axis excluded)."""
        return tuple(in_shape)

    def check_input(self, in_shape: tuple[int, ...]) -> None:
        pass

    def forward(self, params, x, train: bool, rng: Rng | None):
        raise NotImplementedError

    def backward(self, params, cache, g, row_groups=None):
        raise NotImplementedError

    def _mismatch(self, expected, got) -> ShapeError:
        return ShapeError(f"{self!r}: expected per-sample input shape {expected}, got {tuple(got)}")


@dataclass(frozen=True)
class TemporalConv(Layer):
    """(C, T) -> (filters, C, T - kernel_len + 1); cross-correlation along time."""

    out_filters: int
    kernel_len: int
    roles: ClassVar[tuple[str, ...]] = ("weight", "bias")

    def __post_init__(self):
        if self.kernel_len < 1 or self.out_filters < 1:
            raise ValueError(f"invalid {self!r}")

    def param_shapes(self):
        return {"weight": (self.out_filters, self.kernel_len), "bias": (self.out_filters,)}

    def fans(self, role):
        return self.kernel_len, self.out_filters * self.kernel_len

    def check_input(self, in_shape):
        if len(in_shape) != 2 or in_shape[1] < self.kernel_len:
            raise self._mismatch(f"(C, T>={self.kernel_len})", in_shape)

    def output_shape(self, in_shape):
        c, t = in_shape
        return (self.out_filters, c, t - self.kernel_len + 1)

    def forward(self, params, x, train, rng):
        w, b = params["weight"], params["bias"]
        n, c, t = x.shape
        k = self.kernel_len
        out = np.empty((n, self.out_filters, c, t - k + 1), dtype=x.dtype)
        windows = []
        for i in range(n):
            win = sliding_window_view(x[i], k, axis=-1).reshape(-1, k)
            y = (win @ w.T).reshape(c, t - k + 1, self.out_filters)
            out[i] = y.transpose(2, 0, 1) + b[:, None, None]
            windows.append(win)
        return out, windows

    def backward(self, params, cache, g, row_groups=None):
        w = params["weight"]
        windows = cache
        n, f, c, tp = g.shape
        k = self.kernel_len
        dx = np.zeros((n, c, tp + k - 1), dtype=g.dtype)
        dw = np.zeros_like(w)
        db = np.zeros(f, dtype=g.dtype)
        for i in range(n):
            gt = g[i].transpose(1, 2, 0).reshape(-1, f)
            dw += gt.T @ windows[i]
            db += g[i].sum(axis=(1, 2))
            gw = (gt @ w).reshape(c, tp, k)
            for j in range(k):
                dx[i, :, j:j + tp] += gw[:, :, j]
        return dx, {"weight": dw, "bias": db}


@dataclass(frozen=True)
class SpatialConv(Layer):
    """(maps, C, T) -> (filters, 1, T): a full-height kernel over all maps and channels."""

    out_filters: int
    in_maps: int
    in_channels: int
    roles: ClassVar[tuple[str, ...]] = ("weight", "bias")

    def __post_init__(self):
        if min(self.out_filters, self.in_maps, self.in_channels) < 1:
            raise ValueError(f"invalid {self!r}")

    def param_shapes(self):
        return {"weight": (self.out_filters, self.in_maps, self.in_channels), "bias": (self.out_filters,)}

    def fans(self, role):
        return self.in_maps * self.in_channels, self.out_filters * self.in_channels

    def check_input(self, in_shape):
        if len(in_shape) != 3 or tuple(in_shape[:2]) != (self.in_maps, self.in_channels):
            raise self._mismatch(f"({self.in_maps}, {self.in_channels}, T)", in_shape)

    def output_shape(self, in_shape):
        return (self.out_filters, 1, in_shape[2])

    def forward(self, params, x, train, rng):
        w2 = params["weight"].reshape(self.out_filters, -1)
        b = params["bias"]
        n, _, _, t = x.shape
        out = np.empty((n, self.out_filters, 1, t), dtype=x.dtype)
        for i in range(n):
            out[i, :, 0] = w2 @ x[i].reshape(-1, t) + b[:, None]
        return out, x

    def backward(self, params, cache, g, row_groups=None):
        x = cache
        w = params["weight"]
        w2 = w.reshape(self.out_filters, -1)
        n, _, _, t = x.shape
        dx = np.empty_like(x)
        dw2 = np.zeros_like(w2)
        db = np.zeros(self.out_filters, dtype=g.dtype)
        for i in range(n):
            g2 = g[i, :, 0]
            dw2 += g2 @ x[i].reshape(-1, t).T
            db += g2.sum(axis=1)
            dx[i] = (w2.T @ g2).reshape(x.shape[1:])
        return dx, {"weight": dw2.reshape(w.shape), "bias": db}


@dataclass(frozen=True)
class Square(Layer):
    def forward(self, params, x, train, rng):
        return x * x, x

    def backward(self, params, cache, g, row_groups=None):
        return 2 * cache * g, {}


@dataclass(frozen=True)
class LogClamp(Layer):
    """``log(max(x, eps))``; the gradient is zero where the clamp is active."""

    eps: float = 1e-6

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"invalid {self!r}")

    def forward(self, params, x, train, rng):
        eps = x.dtype.type(self.eps)
        return np.log(np.maximum(x, eps)), x

    def backward(self, params, cache, g, row_groups=None):
        x = cache
        eps = x.dtype.type(self.eps)
        live = x > eps
        return np.where(live, g / np.where(live, x, 1), 0).astype(g.dtype), {}


@dataclass(frozen=True)
class AvgPool(Layer):
    """Mean over windows of ``pool_len`` along the last axis, hop ``stride``."""

    pool_len: int
    stride: int

    def __post_init__(self):
        if not self.pool_len >= self.stride >= 1:
            raise ValueError(f"invalid {self!r}: need pool_len >= stride >= 1")

    def check_input(self, in_shape):
        if len(in_shape) < 1 or in_shape[-1] < self.pool_len:
            raise self._mismatch(f"(..., T>={self.pool_len})", in_shape)

    def output_shape(self, in_shape):
        return tuple(in_shape[:-1]) + ((in_shape[-1] - self.pool_len) // self.stride + 1,)

    def forward(self, params, x, train, rng):
        t_in = x.shape[-1]
        t_out = (t_in - self.pool_len) // self.stride + 1
        span = self.stride * (t_out - 1) + 1
        # fixed left-to-right summation keeps every element batch-independent
        acc = x[..., 0:span:self.stride].copy()
        for j in range(1, self.pool_len):
            acc += x[..., j:j + span:self.stride]
        return acc / x.dtype.type(self.pool_len), t_in

    def backward(self, params, cache, g, row_groups=None):
        t_in = cache
        t_out = g.shape[-1]
        span = self.stride * (t_out - 1) + 1
        share = g / g.dtype.type(self.pool_len)
        dx = np.zeros(g.shape[:-1] + (t_in,), dtype=g.dtype)
        for j in range(self.pool_len):
            dx[..., j:j + span:self.stride] += share
        return dx, {}


@dataclass(frozen=True)
class Dropout(Layer):
    """Inverted dropout; identity in eval mode."""

    p: float = 0.5

    def __post_init__(self):
        if not 0 <= self.p < 1:
            raise ValueError(f"invalid {self!r}: need 0 <= p < 1")

    def forward(self, params, x, train, rng):
        if not train or self.p == 0:
            return x, None
        if rng is None:
            raise ValueError("Dropout in train mode needs an Rng")
        keep = rng.random(x.shape) >= self.p
        scale = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - self.p))
        return x * scale, scale

    def backward(self, params, cache, g, row_groups=None):
        if cache is None:
            return g, {}
        return g * cache, {}


@dataclass(frozen=True)
class Flatten(Layer):
    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, params, x, train, rng):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, cache, g, row_groups=None):
        return g.reshape(cache), {}


@dataclass(frozen=True)
class Dense(Layer):
    """``y = x @ weight + bias`` with ``weight`` of shape ``(in_dim, out_dim)``."""

    in_dim: int
    out_dim: int
    roles: ClassVar[tuple[str, ...]] = ("weight", "bias")

    def __post_init__(self):
        if min(self.in_dim, self.out_dim) < 1:
            raise ValueError(f"invalid {self!r}")

    def param_shapes(self):
        return {"weight": (self.in_dim, self.out_dim), "bias": (self.out_dim,)}

    def fans(self, role):
        return self.in_dim, self.out_dim

    def check_input(self, in_shape):
        if tuple(in_shape) != (self.in_dim,):
            raise self._mismatch((self.in_dim,), in_shape)

    def output_shape(self, in_shape):
        return (self.out_dim,)

    def forward(self, params, x, train, rng):
        w, b = params["weight"], params["bias"]
        out = np.empty((x.shape[0], self.out_dim), dtype=x.dtype)
        for i in range(x.shape[0]):
            out[i] = x[i] @ w + b
        return out, x

    def backward(self, params, cache, g, row_groups=None):
        """``row_groups`` is a list of ``(start, stop)`` row slices.

        Weight and bias gradients are reduced within each group and then
        summed across groups in list order. ``None`` means one group.
        """
        x = cache
        w = params["weight"]
        if row_groups is None:
            row_groups = [(0, x.shape[0])]
        dw = np.zeros_like(w)
        db = np.zeros(self.out_dim, dtype=g.dtype)
        for lo, hi in row_groups:
            dw += x[lo:hi].T @ g[lo:hi]
            db += g[lo:hi].sum(axis=0)
        dx = np.empty_like(x)
        for i in range(x.shape[0]):
            dx[i] = g[i] @ w.T
        return dx, {"weight": dw, "bias": db}


@dataclass(frozen=True)
class Elu(Layer):
    def forward(self, params, x, train, rng):
        return np.where(x > 0, x, np.expm1(np.minimum(x, 0))), x

    def backward(self, params, cache, g, row_groups=None):
        x = cache
        return np.where(x > 0, g, g * np.exp(np.minimum(x, 0))).astype(g.dtype), {}


@dataclass
class _Cache:
    layer: Layer
    params: dict[str, np.ndarray]
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    inner: Any


def _per_sample(shape) -> tuple[int, ...]:
    return tuple(int(s) for s in shape[1:])


def layer_forward(layer: Layer, params: dict[str, np.ndarray], x: np.ndarray,
                  mode: str = "train", rng: Rng | None = None) -> tuple[np.ndarray, _Cache]:
    """Run one layer on a batch ``x`` of shape ``(B, *sample_shape)``."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if x.ndim < 2:
        raise ShapeError(f"{layer!r}: input needs a batch axis, got shape {x.shape}")
    layer.check_input(_per_sample(x.shape))
    for role, shape in layer.param_shapes().items():
        if params[role].shape != shape:
            raise ShapeError(f"{layer!r}: parameter {role!r} has shape {params[role].shape}, expected {shape}")
    if not np.isfinite(x).all():
        raise NonFiniteError(f"{layer!r}: non-finite values in input")
    y, inner = layer.forward(params, x, mode == "train", rng)
    return y, _Cache(layer, params, tuple(x.shape), tuple(y.shape), inner)


def layer_backward(layer: Layer, cache: _Cache, grad_out: np.ndarray,
                   row_groups: Sequence[tuple[int, int]] | None = None):
    """Returns ``(grad_in, param_grads)`` for the forward call that made ``cache``."""
    if cache.layer != layer:
        raise ValueError(f"cache was produced by {cache.layer!r}, not {layer!r}")
    if tuple(grad_out.shape) != cache.out_shape:
        raise ShapeError(f"{layer!r}: grad_out shape {tuple(grad_out.shape)} does not match "
                         f"forward output shape {cache.out_shape}")
    dx, grads = layer.backward(cache.params, cache.inner, grad_out, row_groups)
    return dx, grads


def stack_output_shape(layers: Sequence[Layer], in_shape: tuple[int, ...]) -> tuple[int, ...]:
    shape = tuple(in_shape)
    for layer in layers:
        layer.check_input(shape)
        shape = layer.output_shape(shape)
    return shape


def forward_stack(layers, params, x, mode="train", rng: Rng | None = None):
    """Sequential forward. Layer ``i`` draws from ``rng.substream(str(i))``."""
    caches = []
    for i, layer in enumerate(layers):
        sub = rng.substream(str(i)) if (rng is not None and isinstance(layer, Dropout)) else None
        x, cache = layer_forward(layer, params[i], x, mode, sub)
        caches.append(cache)
    return x, caches


def backward_stack(layers, caches, g, row_groups=None):
    """Sequential backward. Returns ``(grad_in, [param_grads per layer])``."""
    grads: list[dict[str, np.ndarray]] = [{} for _ in layers]
    for i in range(len(layers) - 1, -1, -1):
        g, grads[i] = layer_backward(layers[i], caches[i], g, row_groups)
    return g, grads
