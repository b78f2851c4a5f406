"""Shallow ConvNet baseline and the partitioned separate-common-separate model.

A bundle has, per branch, a *bottom* (feature extractor ending in a 50-d
linear projection) and a *top* (separate dense layers plus the branch's
classifier), and one shared *trunk*. The functions below are the single
implementation of the math; the monolithic reference and the federated
runtime both call them, in the same order, on the same arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .nn.layers import (AvgPool, Dense, Dropout, Elu, Flatten, Layer, LogClamp, SpatialConv, Square,
                        TemporalConv, backward_stack, forward_stack, stack_output_shape)
from .nn.params import ModelParams, ParamTensor, adam_step, init_params, iter_params, values
from .nn.rng import Rng


@dataclass(frozen=True)
class ExtractorSpec:
    in_channels: int = 17
    in_samples: int = 600
    temporal_filters: int = 40
    temporal_kernel: int = 25
    spatial_filters: int = 40
    pool_len: int = 75
    pool_stride: int = 15
    log_eps: float = 1e-6
    dropout_p: float = 0.5
    feature_dim: int = 50

    def conv_layers(self) -> list[Layer]:
        return [
            TemporalConv(self.temporal_filters, self.temporal_kernel),
            SpatialConv(self.spatial_filters, self.temporal_filters, self.in_channels),
            Square(),
            AvgPool(self.pool_len, self.pool_stride),
            LogClamp(self.log_eps),
            Dropout(self.dropout_p),
            Flatten(),
        ]

    @property
    def flat_dim(self) -> int:
        return stack_output_shape(self.conv_layers(), (self.in_channels, self.in_samples))[0]

    def layers(self) -> list[Layer]:
        return self.conv_layers() + [Dense(self.flat_dim, self.feature_dim)]

    def shape_chain(self) -> list[tuple[int, ...]]:
        shapes = [(self.in_channels, self.in_samples)]
        for layer in self.layers():
            shapes.append(layer.output_shape(shapes[-1]))
        return shapes

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExtractorSpec":
        return cls(**d)


@dataclass(frozen=True)
class BranchConfig:
    dataset_id: int
    num_classes: int
    extractor: ExtractorSpec = ExtractorSpec()
    top_widths: tuple[int, ...] = (50, 50, 50)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"branch {self.dataset_id}: num_classes must be >= 2, got {self.num_classes}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "BranchConfig":
        d = dict(d)
        if "extractor" in d:
            d["extractor"] = ExtractorSpec.from_dict(d["extractor"])
        if "top_widths" in d:
            d["top_widths"] = tuple(d["top_widths"])
        return cls(**d)


@dataclass(frozen=True)
class MfScsnConfig:
    """Dense layers of trunk and tops are each followed by ELU; classifiers are linear."""

    branches: tuple[BranchConfig, ...]
    trunk_widths: tuple[int, ...] = (50, 50, 50)

    def __post_init__(self):
        if not self.branches:
            raise ValueError("at least one branch is required")
        ids = [b.dataset_id for b in self.branches]
        if len(set(ids)) != len(ids) or min(ids) < 0 or max(ids) > 255:
            raise ValueError(f"branch ids must be unique and fit in a byte: {ids}")

    @property
    def trunk_in(self) -> int:
        return self.branches[0].extractor.feature_dim

    @property
    def trunk_out(self) -> int:
        return self.trunk_widths[-1] if self.trunk_widths else self.trunk_in

    @classmethod
    def from_dict(cls, d: Mapping) -> "MfScsnConfig":
        return cls(tuple(BranchConfig.from_dict(b) for b in d["branches"]),
                   tuple(d.get("trunk_widths", (50, 50, 50))))


def dense_elu_layers(in_dim: int, widths: Sequence[int]) -> list[Layer]:
    layers: list[Layer] = []
    for w in widths:
        layers += [Dense(in_dim, w), Elu()]
        in_dim = w
    return layers


@dataclass
class Partition:
    """A contiguous run of layers with their parameters."""

    layers: list[Layer]
    params: ModelParams

    def tensors(self) -> list[ParamTensor]:
        return list(iter_params(self.params))

    def param_count(self) -> int:
        return sum(p.value.size for p in self.tensors())

    def copy(self) -> "Partition":
        return Partition(list(self.layers), [{r: p.copy() for r, p in e.items()} for e in self.params])

    def astype(self, dtype) -> "Partition":
        return Partition(list(self.layers), [{r: p.astype(dtype) for r, p in e.items()} for e in self.params])


def make_partition(layers: Sequence[Layer], rng: Rng, prefix: str) -> Partition:
    return Partition(list(layers), init_params(layers, rng, prefix=prefix))


@dataclass
class ModelBundle:
    kind: str
    bottoms: dict[int, Partition]
    trunk: Partition
    tops: dict[int, Partition]
    num_classes: dict[int, int] = field(default_factory=dict)

    @property
    def branch_ids(self) -> list[int]:
        return sorted(self.bottoms)

    def partitions(self) -> list[tuple[str, Partition]]:
        out = []
        for k in self.branch_ids:
            out.append((f"branch{k}.bottom", self.bottoms[k]))
        out.append(("trunk", self.trunk))
        for k in self.branch_ids:
            out.append((f"branch{k}.top", self.tops[k]))
        return out

    def named_tensors(self) -> dict[str, ParamTensor]:
        return {p.name: p for _, part in self.partitions() for p in part.tensors()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_tensors().items()}

    def load_state(self, tensors: Mapping[str, np.ndarray]) -> None:
        mine = self.named_tensors()
        missing = sorted(set(mine) - set(tensors))
        extra = sorted(set(tensors) - set(mine))
        if missing or extra:
            raise KeyError(f"checkpoint mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in mine.items():
            if tensors[name].shape != p.value.shape:
                raise ValueError(f"{name}: checkpoint shape {tensors[name].shape} != model shape {p.value.shape}")
            p.value[...] = tensors[name]

    def copy(self) -> "ModelBundle":
        return ModelBundle(self.kind, {k: v.copy() for k, v in self.bottoms.items()}, self.trunk.copy(),
                           {k: v.copy() for k, v in self.tops.items()}, dict(self.num_classes))

    def astype(self, dtype) -> "ModelBundle":
        return ModelBundle(self.kind, {k: v.astype(dtype) for k, v in self.bottoms.items()},
                           self.trunk.astype(dtype), {k: v.astype(dtype) for k, v in self.tops.items()},
                           dict(self.num_classes))

    def param_count(self) -> int:
        return sum(part.param_count() for _, part in self.partitions())

    def summary(self) -> str:
        """Human-readable architecture dump: partition, layer, output shape, parameter count."""
        lines = [f"{self.kind} bundle, branches {self.branch_ids}"]
        for name, part in self.partitions():
            lines += _describe(name, part)
        lines.append(f"total parameters: {self.param_count()}")
        return "\n".join(lines)


def _describe(prefix: str, part: Partition) -> list[str]:
    lines = []
    for i, layer in enumerate(part.layers):
        n = sum(p.value.size for p in part.params[i].values())
        shapes = ", ".join(f"{r}{tuple(p.value.shape)}" for r, p in part.params[i].items())
        lines.append(f"  {prefix}.{i:<2d} {layer!r:<56} {shapes:<28} params={n}")
    return lines


def build_baseline(num_classes: int, rng: Rng, extractor: ExtractorSpec = ExtractorSpec(),
                   branch_id: int = 0) -> ModelBundle:
    """Extractor, 50-d projection, linear classifier; the trunk is empty."""
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    k = branch_id
    bottom = make_partition(extractor.layers(), rng.substream(f"branch{k}/bottom"), f"branch{k}.bottom.")
    top = make_partition([Dense(extractor.feature_dim, num_classes)], rng.substream(f"branch{k}/top"),
                         f"branch{k}.top.")
    return ModelBundle("baseline", {k: bottom}, Partition([], []), {k: top}, {k: num_classes})


def build_trunk(cfg: MfScsnConfig, rng: Rng) -> Partition:
    return make_partition(dense_elu_layers(cfg.trunk_in, cfg.trunk_widths), rng.substream("trunk"), "trunk.")


def build_branch(cfg: MfScsnConfig, branch: BranchConfig, rng: Rng) -> tuple[Partition, Partition]:
    """``(bottom, top)`` of one branch; draws only from that branch's substreams."""
    if branch.extractor.feature_dim != cfg.trunk_in:
        raise ValueError(f"branch {branch.dataset_id}: feature width {branch.extractor.feature_dim} != "
                         f"trunk input width {cfg.trunk_in}")
    k = branch.dataset_id
    bottom = make_partition(branch.extractor.layers(), rng.substream(f"branch{k}/bottom"), f"branch{k}.bottom.")
    top_layers = dense_elu_layers(cfg.trunk_out, branch.top_widths)
    top_layers.append(Dense(branch.top_widths[-1] if branch.top_widths else cfg.trunk_out, branch.num_classes))
    return bottom, make_partition(top_layers, rng.substream(f"branch{k}/top"), f"branch{k}.top.")


def build_mfscsn(cfg: MfScsnConfig, rng: Rng) -> ModelBundle:
    bottoms, tops, classes = {}, {}, {}
    for b in sorted(cfg.branches, key=lambda b: b.dataset_id):
        bottoms[b.dataset_id], tops[b.dataset_id] = build_branch(cfg, b, rng)
        classes[b.dataset_id] = b.num_classes
    return ModelBundle("mfscsn", bottoms, build_trunk(cfg, rng), tops, classes)


# ---------------------------------------------------------------- shared math

def dropout_rng(rng: Rng, branch_id: int, step: int) -> Rng:
    return rng.substream(f"dropout/branch{branch_id}/step{step}")


def partition_forward(part: Partition, x: np.ndarray, mode: str, rng: Rng | None = None):
    return forward_stack(part.layers, values(part.params), x, mode, rng)


def partition_backward(part: Partition, caches, g: np.ndarray, row_groups=None):
    return backward_stack(part.layers, caches, g, row_groups)


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient ``(softmax - onehot) / B``."""
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = float(-logp[np.arange(b), labels].astype(np.float64).mean())
    d = np.exp(logp)
    d[np.arange(b), labels] -= 1
    return loss, (d / logits.dtype.type(b)).astype(logits.dtype)


def top_step(part: Partition, trunk_out: np.ndarray, labels, scale: float):
    """Top forward, loss, and backward of ``scale * loss``.

    Returns ``(loss, grad wrt trunk_out, top param grads, logits)``.
    """
    logits, caches = partition_forward(part, trunk_out, "train")
    loss, dlogits = cross_entropy(logits, labels)
    if scale != 1:
        dlogits = dlogits * dlogits.dtype.type(scale)
    g, grads = partition_backward(part, caches, dlogits)
    return loss, g, grads, logits


def row_groups(counts: Sequence[int]) -> list[tuple[int, int]]:
    out, lo = [], 0
    for c in counts:
        out.append((lo, lo + c))
        lo += c
    return out


@dataclass
class ForwardParts:
    features: np.ndarray
    trunk_out: np.ndarray
    logits: np.ndarray
    caches: dict


def forward_parts(bundle: ModelBundle, branch_id: int, batch: np.ndarray, mode: str = "eval",
                  rng: Rng | None = None) -> ForwardParts:
    if branch_id not in bundle.bottoms:
        raise KeyError(f"unknown branch {branch_id}; bundle has {bundle.branch_ids}")
    feats, c_bottom = partition_forward(bundle.bottoms[branch_id], batch, mode, rng)
    trunk_out, c_trunk = partition_forward(bundle.trunk, feats, mode)
    logits, c_top = partition_forward(bundle.tops[branch_id], trunk_out, mode)
    return ForwardParts(feats, trunk_out, logits, {"bottom": c_bottom, "trunk": c_trunk, "top": c_top})


def predict_logits(bundle: ModelBundle, branch_id: int, data: np.ndarray, batch_size: int = 50) -> np.ndarray:
    out = [forward_parts(bundle, branch_id, data[i:i + batch_size], "eval").logits
           for i in range(0, len(data), batch_size)]
    k = bundle.num_classes[branch_id]
    return np.concatenate(out) if out else np.empty((0, k), dtype=np.float32)


def _named(prefix: str, part: Partition, grads) -> dict[str, np.ndarray]:
    out = {}
    for entry, g in zip(part.params, grads):
        for role, p in entry.items():
            out[p.name] = g[role]
    return out


def monolithic_forward_backward(bundle: ModelBundle, branch_batches: Mapping[int, tuple[np.ndarray, np.ndarray]],
                                rng: Rng, step: int = 0):
    """All branches end to end in one process.

    Total loss is the mean of per-branch losses. Trunk gradients are the
    per-branch contributions summed in ascending branch order.
    Returns ``(losses by branch, grads by tensor name)``.
    """
    ids = sorted(branch_batches)
    if not ids:
        raise ValueError("no branch batches given")
    scale = 1.0 / len(ids)
    feats, bottom_caches = {}, {}
    for k in ids:
        x, _ = branch_batches[k]
        feats[k], bottom_caches[k] = partition_forward(bundle.bottoms[k], x, "train", dropout_rng(rng, k, step))
    counts = [len(feats[k]) for k in ids]
    trunk_out, trunk_caches = partition_forward(bundle.trunk, np.concatenate([feats[k] for k in ids]), "train")
    groups = row_groups(counts)
    losses, outgrads, grads = {}, [], {}
    for k, (lo, hi) in zip(ids, groups):
        _, y = branch_batches[k]
        losses[k], g, top_grads, _ = top_step(bundle.tops[k], trunk_out[lo:hi], y, scale)
        outgrads.append(g)
        grads.update(_named(f"branch{k}.top", bundle.tops[k], top_grads))
    g_feats, trunk_grads = partition_backward(bundle.trunk, trunk_caches, np.concatenate(outgrads), groups)
    grads.update(_named("trunk", bundle.trunk, trunk_grads))
    for k, (lo, hi) in zip(ids, groups):
        _, bottom_grads = partition_backward(bundle.bottoms[k], bottom_caches[k], g_feats[lo:hi])
        grads.update(_named(f"branch{k}.bottom", bundle.bottoms[k], bottom_grads))
    return losses, grads


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    weight_decay: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def step(self, params) -> None:
        adam_step(params, self.lr, self.weight_decay, self.beta1, self.beta2, self.eps)


def apply_gradients(tensors: Sequence[ParamTensor], grads: Mapping[str, np.ndarray], opt: AdamConfig) -> None:
    for p in tensors:
        p.grad[...] = grads[p.name]
    opt.step(tensors)
    for p in tensors:
        p.zero_grad()


def monolithic_train_step(bundle: ModelBundle, branch_batches, rng: Rng, step: int, opt: AdamConfig):
    """Reference step: one Adam update over every partition."""
    losses, grads = monolithic_forward_backward(bundle, branch_batches, rng, step)
    for _, part in bundle.partitions():
        apply_gradients(part.tensors(), grads, opt)
    return losses


def bundle_from_tensors(tensors: Mapping[str, np.ndarray], extractor: ExtractorSpec = ExtractorSpec()) -> ModelBundle:
    """Rebuild a bundle from checkpoint tensors; dense widths are read from shapes."""
    branches = sorted({int(n.split(".")[0][len("branch"):]) for n in tensors if n.startswith("branch")})
    trunk_idx = sorted({int(n.split(".")[1]) for n in tensors if n.startswith("trunk.")})
    dummy = Rng(0, "checkpoint-shape")
    trunk_widths = [tensors[f"trunk.{i}.weight"].shape[1] for i in trunk_idx]
    trunk_layers = dense_elu_layers(extractor.feature_dim, trunk_widths)
    tops, bottoms, classes = {}, {}, {}
    for k in branches:
        top_idx = sorted({int(n.split(".")[2]) for n in tensors if n.startswith(f"branch{k}.top.")})
        shapes = [tensors[f"branch{k}.top.{i}.weight"].shape for i in top_idx]
        layers: list[Layer] = []
        for j, (din, dout) in enumerate(shapes):
            layers.append(Dense(din, dout))
            if j < len(shapes) - 1:
                layers.append(Elu())
        tops[k] = make_partition(layers, dummy, f"branch{k}.top.")
        bottoms[k] = make_partition(extractor.layers(), dummy, f"branch{k}.bottom.")
        classes[k] = shapes[-1][1]
    kind = "mfscsn" if trunk_idx or any(len(t.layers) > 1 for t in tops.values()) else "baseline"
    bundle = ModelBundle(kind, bottoms, make_partition(trunk_layers, dummy, "trunk."), tops, classes)
    bundle.load_state(tensors)
    return bundle


def gradcheck_targets(extractor: ExtractorSpec = ExtractorSpec()) -> dict[str, tuple[list[Layer], tuple[int, ...]]]:
    """Layer stacks and per-sample input shapes for the gradient checks: every layer type
    on small inputs, then the baseline and the MF-SCSN target path at full size."""
    zoo = {
        "temporal_conv": ([TemporalConv(4, 5)], (3, 20)),
        "spatial_conv": ([SpatialConv(3, 4, 5)], (4, 5, 12)),
        "square": ([Square()], (3, 8)),
        "avg_pool": ([AvgPool(5, 2)], (2, 3, 15)),
        "log_clamp": ([LogClamp()], (3, 8)),
        "dropout": ([Dropout(0.5)], (3, 8)),
        "flatten": ([Flatten()], (2, 3, 4)),
        "dense": ([Dense(7, 5)], (7,)),
        "elu": ([Elu()], (9,)),
    }
    shape = (extractor.in_channels, extractor.in_samples)
    dense_elu = dense_elu_layers(extractor.feature_dim, (50, 50, 50))
    zoo["baseline"] = (extractor.layers() + [Dense(extractor.feature_dim, 4)], shape)
    # bottom, trunk and top composed end to end
    zoo["mfscsn"] = (extractor.layers() + dense_elu + dense_elu + [Dense(50, 4)], shape)
    return zoo
