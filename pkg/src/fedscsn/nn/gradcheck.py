"""Finite-difference verification of the analytic backward passes."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .layers import Dropout, Layer, LogClamp, layer_backward, layer_forward, stack_output_shape
from .params import init_params
from .rng import Rng


@dataclass
class LayerCheck:
    index: int
    layer: str
    input_error: float
    param_errors: dict[str, float] = field(default_factory=dict)
    passed: bool = True

    @property
    def max_error(self) -> float:
        return max([self.input_error, *self.param_errors.values()])


@dataclass
class GradCheckReport:
    tol: float
    layers: list[LayerCheck]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.layers)

    @property
    def max_error(self) -> float:
        return max((c.max_error for c in self.layers), default=0.0)

    def failures(self) -> list[LayerCheck]:
        return [c for c in self.layers if not c.passed]

    def format(self) -> str:
        lines = []
        for c in self.layers:
            params = " ".join(f"{k}={v:.2e}" for k, v in c.param_errors.items())
            status = "ok  " if c.passed else "FAIL"
            lines.append(f"{status} [{c.index:2d}] {c.layer:<48} input={c.input_error:.2e} {params}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute deviation scaled by the largest magnitude on either side."""
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def _run_from(layers, params, start, x, rng):
    for j in range(start, len(layers)):
        sub = rng.substream(str(j)) if isinstance(layers[j], Dropout) else None
        x, _ = layer_forward(layers[j], params[j], x, "train", sub)
    return x


def _probe(arr: np.ndarray, n: int, rng: Rng) -> np.ndarray:
    if arr.size <= n:
        return np.arange(arr.size)
    return rng.permutation(arr.size)[:n]


def check_stack(layers: Sequence[Layer], params: list[dict[str, np.ndarray]], x: np.ndarray,
                rng: Rng, tol: float = 1e-4, probes: int = 16, h: float = 1e-5) -> GradCheckReport:
    """Check every layer of ``layers`` at the given float64 ``params`` and input ``x``.

    The scalar objective is ``sum(output * R)`` for a fixed random ``R``.
    Up to ``probes`` coordinates per tensor are perturbed.
    """
    drop_rng = rng.substream("dropout")
    acts = [x]
    caches = []
    for j, layer in enumerate(layers):
        sub = drop_rng.substream(str(j)) if isinstance(layer, Dropout) else None
        y, cache = layer_forward(layer, params[j], acts[-1], "train", sub)
        acts.append(y)
        caches.append(cache)
    weight = rng.substream("objective").normal(acts[-1].shape)

    def objective(start, a):
        return float(np.sum(_run_from(layers, params, start, a, drop_rng) * weight))

    grads_in = [None] * len(layers)
    grads_p = [None] * len(layers)
    g = weight
    for j in range(len(layers) - 1, -1, -1):
        g, grads_p[j] = layer_backward(layers[j], caches[j], g)
        grads_in[j] = g

    probe_rng = rng.substream("probes")
    checks = []
    for j, layer in enumerate(layers):
        a = acts[j]
        idx = _probe(a, probes, probe_rng.substream(f"{j}/input"))
        numeric = np.empty(len(idx))
        for n, flat in enumerate(idx):
            pos = np.unravel_index(flat, a.shape)
            orig = a[pos]
            a[pos] = orig + h
            up = objective(j, a)
            a[pos] = orig - h
            down = objective(j, a)
            a[pos] = orig
            numeric[n] = (up - down) / (2 * h)
        check = LayerCheck(j, repr(layer), relative_error(grads_in[j].reshape(-1)[idx], numeric))
        for role, p in params[j].items():
            pidx = _probe(p, probes, probe_rng.substream(f"{j}/{role}"))
            numeric = np.empty(len(pidx))
            for n, flat in enumerate(pidx):
                pos = np.unravel_index(flat, p.shape)
                orig = p[pos]
                p[pos] = orig + h
                up = objective(j, a)
                p[pos] = orig - h
                down = objective(j, a)
                p[pos] = orig
                numeric[n] = (up - down) / (2 * h)
            check.param_errors[role] = relative_error(grads_p[j][role].reshape(-1)[pidx], numeric)
        check.passed = not (check.max_error >= tol) if math.isfinite(tol) else True
        checks.append(check)
    return GradCheckReport(tol, checks)


def default_input_shape(layers: Sequence[Layer]) -> tuple[int, ...]:
    from .layers import AvgPool, Dense, SpatialConv, TemporalConv

    first = layers[0]
    if isinstance(first, Dense):
        return (first.in_dim,)
    if isinstance(first, SpatialConv):
        return (first.in_maps, first.in_channels, 12)
    if isinstance(first, TemporalConv):
        return (3, first.kernel_len + 8)
    if isinstance(first, AvgPool):
        return (2, first.pool_len + 3 * first.stride)
    return (3, 7)


def grad_check(layers: Sequence[Layer], rng: Rng, tol: float = 1e-4,
               input_shape: tuple[int, ...] | None = None, batch: int = 2,
               probes: int = 16, h: float = 1e-5) -> GradCheckReport:
    """Gradient check of a layer stack at random float64 parameters and inputs."""
    if not tol > 0:
        raise ValueError(f"tol must be > 0, got {tol}")
    layers = list(layers)
    if input_shape is None:
        input_shape = default_input_shape(layers)
    stack_output_shape(layers, input_shape)
    params = []
    for j, entry in enumerate(init_params(layers, rng.substream("params"))):
        cast = {}
        for role, p in entry.items():
            v = p.value.astype(np.float64)
            if role == "bias":
                v = rng.substream(f"params/{j}/bias").uniform(-0.1, 0.1, v.shape)
            cast[role] = v
        params.append(cast)
    x = rng.substream("input").normal((batch, *input_shape))
    if isinstance(layers[0], LogClamp):
        x = np.abs(x) + 0.5
    return check_stack(layers, params, x, rng, tol, probes, h)
