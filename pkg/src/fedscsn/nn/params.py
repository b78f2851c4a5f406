"""Parameter tensors, Glorot initialisation and Adam with coupled L2 decay."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .layers import Layer
from .rng import Rng


@dataclass
class ParamTensor:
    value: np.ndarray
    grad: np.ndarray = field(default=None)
    adam_m: np.ndarray = field(default=None)
    adam_v: np.ndarray = field(default=None)
    step_count: int = 0
    name: str = ""

    def __post_init__(self):
        for attr in ("grad", "adam_m", "adam_v"):
            arr = getattr(self, attr)
            if arr is None:
                setattr(self, attr, np.zeros_like(self.value))
            elif arr.shape != self.value.shape:
                raise ValueError(f"{self.name}: {attr} shape {arr.shape} != value shape {self.value.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def copy(self) -> "ParamTensor":
        return ParamTensor(self.value.copy(), self.grad.copy(), self.adam_m.copy(),
                           self.adam_v.copy(), self.step_count, self.name)

    def astype(self, dtype) -> "ParamTensor":
        return ParamTensor(self.value.astype(dtype), self.grad.astype(dtype), self.adam_m.astype(dtype),
                           self.adam_v.astype(dtype), self.step_count, self.name)


# one dict per layer, role -> tensor; param-free layers get {}
ModelParams = list[dict[str, ParamTensor]]


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def _glorot(shape, bound: float, rng: Rng) -> np.ndarray:
    w = ((2.0 * rng.random(shape) - 1.0) * bound).astype(np.float32)
    # float32 rounding may land a hair outside the float64 bound
    over = np.abs(w.astype(np.float64)) > bound
    if over.any():
        w[over] = np.nextafter(w[over], np.float32(0))
    return w


def init_params(layers: Sequence[Layer], rng: Rng, prefix: str = "") -> ModelParams:
    """Glorot-uniform weights, zero biases; one substream per ``<index>/<role>``."""
    out: ModelParams = []
    for i, layer in enumerate(layers):
        entry = {}
        for role, shape in layer.param_shapes().items():
            name = f"{prefix}{i}.{role}"
            if role == "bias":
                value = np.zeros(shape, dtype=np.float32)
            else:
                value = _glorot(shape, glorot_bound(*layer.fans(role)), rng.substream(f"{i}/{role}"))
            entry[role] = ParamTensor(value, name=name)
        out.append(entry)
    return out


def values(params: ModelParams) -> list[dict[str, np.ndarray]]:
    return [{role: p.value for role, p in entry.items()} for entry in params]


def iter_params(params: ModelParams) -> Iterable[ParamTensor]:
    for entry in params:
        yield from entry.values()


def accumulate_grads(params: ModelParams, grads: Sequence[dict[str, np.ndarray]]) -> None:
    for entry, g in zip(params, grads):
        for role, p in entry.items():
            p.grad += g[role]


class NonFiniteUpdate(FloatingPointError):
    pass


def adam_step(params: Iterable[ParamTensor], lr: float = 1e-3, weight_decay: float = 0.0,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam with bias correction. Weight decay is added to the gradient.

    Gradients are left as they are; callers zero them.
    """
    for p in params:
        t = p.step_count + 1
        g = p.grad + p.value * p.value.dtype.type(weight_decay) if weight_decay else p.grad
        m = beta1 * p.adam_m + (1 - beta1) * g
        v = beta2 * p.adam_v + (1 - beta2) * (g * g)
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        with np.errstate(invalid="ignore", over="ignore"):
            new = p.value - lr * m_hat / (np.sqrt(v_hat) + eps)
        if not np.isfinite(new).all():
            raise NonFiniteUpdate(f"non-finite Adam update for parameter {p.name or '<unnamed>'}")
        p.value[...] = new
        p.adam_m[...] = m
        p.adam_v[...] = v
        p.step_count = t
