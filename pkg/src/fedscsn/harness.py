"""Experiment orchestration: training loops, model selection and evaluation.

Training is 4-class (or whatever the target's label set is); reporting merges
the target classes into left / right / other and weights "other" by half.
"""
from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .fed.audit import AuditLog
from .fed.frames import FLAG_EVAL, MsgKind
from .fed.runtime import Cloud, Federation, Node
from .fed.tcp import TcpFederation
from .models import (AdamConfig, BranchConfig, ExtractorSpec, MfScsnConfig, ModelBundle, Partition, build_baseline,
                     build_branch, build_mfscsn, build_trunk, bundle_from_tensors, monolithic_train_step,
                     predict_logits)
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.rng import Rng
from .preprocess.pipeline import PipelineConfig, preprocess_trials
from .synth.generate import balance_dataset, benchmark_specs, generate_dataset
from .synth.packed import DatasetManifest, TrialSet, read_packed

MERGED = ("left", "right", "other")
DEFAULT_WEIGHTS = {"left": 1.0, "right": 1.0, "other": 0.5}
DEFAULT_MERGE = {"left_hand": "left", "right_hand": "right", "feet": "other", "rest": "other",
                 "left": "left", "right": "right", "other": "other"}


# ------------------------------------------------------------------ metrics

def weighted_accuracy(preds: Sequence[str], labels: Sequence[str],
                      weights: Mapping[str, float] = DEFAULT_WEIGHTS) -> float:
    """``sum w(y_i) [p_i == y_i] / sum w(y_i)``."""
    if len(preds) != len(labels):
        raise ValueError(f"{len(preds)} predictions for {len(labels)} labels")
    if not len(labels):
        raise ValueError("no trials to score")
    unknown = sorted({str(v) for v in list(labels) + list(preds)} - set(weights))
    if unknown:
        raise ValueError(f"unknown labels {unknown}; weights cover {sorted(weights)}")
    num = den = 0.0
    for p, y in zip(preds, labels):
        w = weights[y]
        den += w
        if p == y:
            num += w
    if den == 0:
        raise ValueError("total label weight is zero")
    return num / den


def merge_labels(preds, class_names: Sequence[str], mapping: Mapping[str, str] = DEFAULT_MERGE) -> list[str]:
    """Map class ids (or logits, argmax first) of the source label set to merged names."""
    preds = np.asarray(preds)
    if preds.ndim == 2:
        preds = preds.argmax(axis=1)
    missing = [c for c in class_names if c not in mapping]
    if missing:
        raise KeyError(f"no merge mapping for classes {missing}")
    names = [mapping[c] for c in class_names]
    return [names[int(i)] for i in preds]


def split_train_validation(trials: TrialSet, per_subject_val: int, rng: Rng) -> tuple[TrialSet, TrialSet]:
    """Exactly ``per_subject_val`` validation trials per subject, drawn uniformly; train keeps file order."""
    if per_subject_val < 0:
        raise ValueError("per_subject_val must be >= 0")
    val_idx = []
    for s in np.unique(trials.subjects):
        idx = np.flatnonzero(trials.subjects == s)
        if len(idx) < per_subject_val:
            raise ValueError(f"subject {s} has {len(idx)} trials, fewer than {per_subject_val} validation trials")
        pick = rng.substream(f"subject{s}").permutation(len(idx))[:per_subject_val]
        val_idx.extend(idx[np.sort(pick)])
    val_idx = np.array(sorted(val_idx), dtype=np.int64)
    train_idx = np.setdiff1d(np.arange(len(trials)), val_idx)
    return trials.take(train_idx), trials.take(val_idx)


# ------------------------------------------------------------------- config

@dataclass
class BranchData:
    dataset_id: int
    path: str | None = None
    class_map: dict[str, str] | None = None


@dataclass
class ExperimentConfig:
    branches: list[BranchData]
    target: int
    seed: int = 42
    batch_size: int = 10
    lr: float = 1e-3
    weight_decay: float = 5e-4
    max_epochs: int = 100
    val_per_subject: int = 20
    mode: str = "inprocess"
    weights: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    common_size: int = 2880
    trunk_widths: tuple[int, ...] = (50, 50, 50)
    top_widths: tuple[int, ...] = (50, 50, 50)
    pipeline: dict = field(default_factory=dict)
    # off by default so the metrics CSV is a pure function of the config
    wall_clock: bool = False

    def __post_init__(self):
        self.branches = [b if isinstance(b, BranchData) else BranchData(**b) for b in self.branches]
        self.trunk_widths = tuple(self.trunk_widths)
        self.top_widths = tuple(self.top_widths)
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        ids = [b.dataset_id for b in self.branches]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate branch ids {ids}")
        if ids.count(self.target) != 1:
            raise ValueError(f"exactly one branch must be the target {self.target}; branches {ids}")
        if self.mode not in ("inprocess", "tcp"):
            raise ValueError(f"mode must be inprocess or tcp, got {self.mode!r}")

    @property
    def opt(self) -> AdamConfig:
        return AdamConfig(self.lr, self.weight_decay)

    def branch(self, k: int) -> BranchData:
        return next(b for b in self.branches if b.dataset_id == k)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls(**json.loads(text))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_json(Path(path).read_text())


Dataset = tuple[DatasetManifest, TrialSet]


def load_dataset(path, pipeline: PipelineConfig = PipelineConfig(), dataset_id: int = 0) -> Dataset:
    """Read a packed file; run the preprocessing chain unless it already matches the model input."""
    manifest, trials = read_packed(path)
    ready = (tuple(manifest.channels) == tuple(pipeline.channels) and manifest.fs == pipeline.fs_out
             and manifest.samples == round(pipeline.window_s * pipeline.fs_out))
    return (manifest, trials) if ready else preprocess_trials(manifest, trials, pipeline, dataset_id)


def load_branches(cfg: ExperimentConfig) -> dict[int, Dataset]:
    pipe = PipelineConfig.from_dict(cfg.pipeline)
    out = {}
    for b in cfg.branches:
        if b.path is None:
            raise ValueError(f"branch {b.dataset_id} has no dataset path")
        out[b.dataset_id] = load_dataset(b.path, pipe, b.dataset_id)
    return out


# ------------------------------------------------------------------ training

@dataclass
class MetricsRecord:
    epoch: int
    losses: dict[int, float]
    val_weighted_acc: float
    seconds: float


@dataclass
class TrainResult:
    bundle: ModelBundle
    metrics: list[MetricsRecord]
    csv: str
    best_epoch: int
    best_score: float
    branch_ids: list[int]


def metrics_csv(records: Sequence[MetricsRecord], branch_ids: Sequence[int]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", *(f"loss_branch{k}" for k in branch_ids), "val_weighted_acc", "seconds"])
    for r in records:
        w.writerow([r.epoch, *(f"{r.losses[k]:.6f}" for k in branch_ids), f"{r.val_weighted_acc:.6f}",
                    f"{r.seconds:.3f}"])
    return buf.getvalue()


class EpochSchedule:
    """Batch ``t`` of a branch: epoch ``t // rounds``, reshuffled per epoch from a named substream."""

    def __init__(self, trials: TrialSet, batch_size: int, rounds: int, rng: Rng):
        if rounds * batch_size > len(trials):
            raise ValueError(f"{rounds} rounds of {batch_size} need {rounds * batch_size} trials, have {len(trials)}")
        self.trials, self.batch_size, self.rounds, self.rng = trials, batch_size, rounds, rng
        self._epoch, self._perm = -1, None

    def __call__(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        e, j = divmod(step, self.rounds)
        if e != self._epoch:
            self._epoch, self._perm = e, self.rng.substream(f"epoch{e}").permutation(len(self.trials))
        idx = self._perm[j * self.batch_size:(j + 1) * self.batch_size]
        return self.trials.data[idx], self.trials.labels[idx]


def _class_names(manifest: DatasetManifest) -> list[str]:
    return list(manifest.classes)


def score_logits(logits: np.ndarray, labels: np.ndarray, class_names: Sequence[str],
                 mapping: Mapping[str, str] | None, weights: Mapping[str, float]) -> float:
    mapping = DEFAULT_MERGE if mapping is None else mapping
    return weighted_accuracy(merge_labels(logits, class_names, mapping), merge_labels(labels, class_names, mapping),
                             weights)


def _prepare_target(cfg: ExperimentConfig, data: Mapping[int, Dataset]):
    manifest, trials = data[cfg.target]
    train, val = split_train_validation(trials, cfg.val_per_subject, Rng(cfg.seed, "split"))
    if cfg.max_epochs and not len(val):
        raise ValueError("model selection needs validation trials (val_per_subject > 0)")
    return manifest, train, val


def _check_data(cfg: ExperimentConfig, data: Mapping[int, Dataset]) -> None:
    want = sorted(b.dataset_id for b in cfg.branches)
    if sorted(data) != want:
        raise ValueError(f"datasets for branches {sorted(data)} but config lists {want}")
    shapes = {k: t.data.shape[1:] for k, (_, t) in data.items()}
    if len(set(shapes.values())) > 1:
        raise ValueError(f"branch trial shapes differ: {shapes}")


def extractor_for(trials: TrialSet) -> ExtractorSpec:
    c, s = trials.data.shape[1:]
    return ExtractorSpec(in_channels=c, in_samples=s)


def _train_loop(cfg, bundle, run_round, eval_val, rounds, ids, start) -> TrainResult:
    records: list[MetricsRecord] = []
    best_state, best_epoch, best_score = bundle.state_dict(), 0, -1.0
    for epoch in range(1, cfg.max_epochs + 1):
        sums = {k: 0.0 for k in ids}
        for _ in range(rounds):
            for k, loss in run_round().items():
                sums[k] += loss
        score = eval_val()
        seconds = _elapsed(cfg, start)
        records.append(MetricsRecord(epoch, {k: v / rounds for k, v in sums.items()}, score, seconds))
        if score > best_score:
            best_state, best_epoch, best_score = bundle.state_dict(), epoch, score
    best = bundle.copy()
    best.load_state(best_state)
    return TrainResult(best, records, metrics_csv(records, ids), best_epoch, max(best_score, 0.0) if records else 0.0,
                       ids)


def mfscsn_config(cfg: ExperimentConfig, class_counts: Mapping[int, int], extractor: ExtractorSpec) -> MfScsnConfig:
    return MfScsnConfig(tuple(BranchConfig(k, n, extractor, cfg.top_widths) for k, n in sorted(class_counts.items())),
                        cfg.trunk_widths)


@dataclass
class BranchPlan:
    """What one data centre trains on: a balanced, per-epoch shuffled schedule and (target only) validation."""

    manifest: DatasetManifest
    schedule: EpochSchedule
    val: TrialSet | None


def rounds_per_epoch(cfg: ExperimentConfig) -> int:
    rounds = cfg.common_size // cfg.batch_size
    if cfg.max_epochs and rounds < 1:
        raise ValueError(f"common_size {cfg.common_size} is smaller than one batch of {cfg.batch_size}")
    return rounds


def branch_plan(cfg: ExperimentConfig, k: int, dataset: Dataset) -> BranchPlan:
    manifest, trials = dataset
    val = None
    if k == cfg.target:
        _, trials, val = _prepare_target(cfg, {k: dataset})
    balanced = balance_dataset(trials, cfg.common_size, Rng(cfg.seed, f"balance/branch{k}"))
    schedule = EpochSchedule(balanced, cfg.batch_size, rounds_per_epoch(cfg),
                             Rng(cfg.seed, "shuffle").substream(f"branch{k}"))
    return BranchPlan(manifest, schedule, val)


def train_mfscsn(cfg: ExperimentConfig, data: Mapping[int, Dataset] | None = None,
                 audit: AuditLog | None = None) -> TrainResult:
    """Every branch balanced to ``common_size``; one batch per branch per round."""
    data = load_branches(cfg) if data is None else data
    _check_data(cfg, data)
    ids = sorted(data)
    plans = {k: branch_plan(cfg, k, data[k]) for k in ids}
    target = plans[cfg.target]
    mcfg = mfscsn_config(cfg, {k: len(p.manifest.classes) for k, p in plans.items()},
                         extractor_for(data[cfg.target][1]))
    bundle = build_mfscsn(mcfg, Rng(cfg.seed, "init"))
    rounds = rounds_per_epoch(cfg)
    train_rng = Rng(cfg.seed, "train")
    sources = {k: p.schedule for k, p in plans.items()}
    eval_data = {cfg.target: target.val.data}
    start = time.perf_counter()
    if cfg.mode == "tcp":
        nodes = {k: Node(k, bundle.bottoms[k], bundle.tops[k], len(ids), train_rng, cfg.opt, sources[k],
                         eval_data.get(k)) for k in ids}
        fed = TcpFederation(nodes, bundle.trunk, cfg.opt, audit)
    else:
        fed = Federation(bundle, train_rng, cfg.opt, audit, batches=sources, eval_data=eval_data)
    names, mapping = _class_names(target.manifest), cfg.branch(cfg.target).class_map

    def eval_val():
        return score_logits(fed.eval_round(cfg.target), target.val.labels, names, mapping, cfg.weights)

    try:
        return _train_loop(cfg, bundle, fed.train_round, eval_val, rounds, ids, start)
    finally:
        fed.shutdown()


# ------------------------------------------------------- separate processes

def run_cloud(cfg: ExperimentConfig, links: Mapping, out_dir=None, feature_dim: int = 50) -> Cloud:
    """Cloud side of a distributed run: the trunk, the round schedule, per-epoch trunk checkpoints.

    The cloud never sees validation scores, so it keeps every epoch; the
    target node reports which epoch won.
    """
    ids = sorted(links)
    want = sorted(b.dataset_id for b in cfg.branches)
    if ids != want:
        raise ValueError(f"connected branches {ids} but config lists {want}")
    mcfg = MfScsnConfig(tuple(BranchConfig(k, 2, ExtractorSpec(feature_dim=feature_dim)) for k in ids),
                        cfg.trunk_widths)
    cloud = Cloud(build_trunk(mcfg, Rng(cfg.seed, "init")), links, cfg.opt)
    rounds = rounds_per_epoch(cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            for _ in range(rounds):
                cloud.run_round()
            cloud.run_round([cfg.target], FLAG_EVAL)
            if out is not None:
                save_checkpoint(out / f"trunk_epoch{epoch}.mfsp", {p.name: p.value for p in cloud.trunk.tensors()})
    finally:
        cloud.shutdown()
    return cloud


def run_node(cfg: ExperimentConfig, k: int, dataset: Dataset, channel, out_dir=None) -> TrainResult:
    """One data centre in a distributed run. Writes its metrics and, for the target, its best partitions."""
    plan = branch_plan(cfg, k, dataset)
    others = {b.dataset_id: 2 for b in cfg.branches if b.dataset_id != k}
    mcfg = mfscsn_config(cfg, {**others, k: len(plan.manifest.classes)}, extractor_for(dataset[1]))
    branch = next(b for b in mcfg.branches if b.dataset_id == k)
    bottom, top = build_branch(mcfg, branch, Rng(cfg.seed, "init"))
    node = Node(k, bottom, top, len(mcfg.branches), Rng(cfg.seed, "train"), cfg.opt, plan.schedule,
                plan.val.data if plan.val is not None else None)
    bundle = ModelBundle("mfscsn", {k: bottom}, Partition([], []), {k: top}, {k: branch.num_classes})
    rounds = rounds_per_epoch(cfg)
    names, mapping = _class_names(plan.manifest), cfg.branch(k).class_map
    records, start = [], time.perf_counter()
    best_state, best_epoch, best_score = bundle.state_dict(), 0, -1.0
    seen = 0
    channel.send(node.hello())
    while not node.done:
        frame = channel.recv(None)
        for f in node.handle(frame):
            channel.send(f)
        if k != cfg.target and node.step == (seen + 1) * rounds:
            seen += 1
            loss = float(np.mean(node.losses[-rounds:]))
            records.append(MetricsRecord(seen, {k: loss}, float("nan"), _elapsed(cfg, start)))
        elif k == cfg.target and frame.kind is MsgKind.TRUNK_OUT_DOWN and frame.flags & FLAG_EVAL:
            seen += 1
            score = score_logits(node.eval_logits, plan.val.labels, names, mapping, cfg.weights)
            loss = float(np.mean(node.losses[-rounds:]))
            records.append(MetricsRecord(seen, {k: loss}, score, _elapsed(cfg, start)))
            if score > best_score:
                best_state, best_epoch, best_score = bundle.state_dict(), seen, score
    if k == cfg.target:
        bundle.load_state(best_state)
    result = TrainResult(bundle, records, metrics_csv(records, [k]), best_epoch, max(best_score, 0.0), [k])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / f"branch{k}.mfsp", bundle.state_dict())
        (out / f"metrics_branch{k}.csv").write_text(result.csv)
        if k == cfg.target:
            (out / "best_epoch.txt").write_text(f"{best_epoch}\n")
    return result


def _elapsed(cfg: ExperimentConfig, start: float) -> float:
    return time.perf_counter() - start if cfg.wall_clock else 0.0


def train_baseline(cfg: ExperimentConfig, data: Mapping[int, Dataset] | None = None) -> TrainResult:
    """Target data only, no federation, no balancing."""
    if data is None:
        pipe = PipelineConfig.from_dict(cfg.pipeline)
        b = cfg.branch(cfg.target)
        data = {cfg.target: load_dataset(b.path, pipe, cfg.target)}
    k = cfg.target
    manifest, train, val = _prepare_target(cfg, data)
    bundle = build_baseline(len(manifest.classes), Rng(cfg.seed, "init"), extractor_for(train), branch_id=k)
    rounds = len(train) // cfg.batch_size
    if cfg.max_epochs and rounds < 1:
        raise ValueError(f"{len(train)} training trials is less than one batch of {cfg.batch_size}")
    source = EpochSchedule(train, cfg.batch_size, rounds, Rng(cfg.seed, "shuffle").substream(f"branch{k}"))
    train_rng, opt, names = Rng(cfg.seed, "train"), cfg.opt, _class_names(manifest)
    step = [0]

    def run_round():
        losses = monolithic_train_step(bundle, {k: source(step[0])}, train_rng, step[0], opt)
        step[0] += 1
        return losses

    def eval_val():
        return score_logits(predict_logits(bundle, k, val.data), val.labels, names,
                            cfg.branch(k).class_map, cfg.weights)

    return _train_loop(cfg, bundle, run_round, eval_val, rounds, [k], time.perf_counter())


# ---------------------------------------------------------------- evaluation

def evaluate(bundle: ModelBundle | str | Path, dataset: Dataset, branch_id: int,
             weights: Mapping[str, float] = DEFAULT_WEIGHTS, class_map: Mapping[str, str] | None = None) -> dict:
    """Score the target path (bottom, trunk, target top) on a test set."""
    manifest, trials = dataset
    if not isinstance(bundle, ModelBundle):
        bundle = bundle_from_tensors(load_checkpoint(bundle), extractor_for(trials))
    if branch_id not in bundle.bottoms:
        raise KeyError(f"checkpoint has no branch {branch_id}; branches {bundle.branch_ids}")
    names = _class_names(manifest)
    if bundle.num_classes[branch_id] != len(names):
        raise ValueError(f"checkpoint branch {branch_id} has {bundle.num_classes[branch_id]} classes, "
                         f"dataset has {len(names)}")
    mapping = DEFAULT_MERGE if class_map is None else class_map
    logits = predict_logits(bundle, branch_id, trials.data)
    pred, truth = merge_labels(logits, names, mapping), merge_labels(trials.labels, names, mapping)
    merged = [m for m in MERGED if m in set(mapping[c] for c in names)]
    confusion = [[sum(1 for p, y in zip(pred, truth) if y == a and p == b) for b in merged] for a in merged]
    per_class = {a: {"correct": sum(1 for p, y in zip(pred, truth) if y == a == p),
                     "total": sum(1 for y in truth if y == a)} for a in merged}
    raw = sum(p == y for p, y in zip(pred, truth))
    per_subject = {}
    for s in np.unique(trials.subjects):
        sel = np.flatnonzero(trials.subjects == s)
        per_subject[str(int(s))] = weighted_accuracy([pred[i] for i in sel], [truth[i] for i in sel], weights)
    return {
        "branch_id": branch_id,
        "trials": len(truth),
        "classes": merged,
        "raw_correct": int(raw),
        "raw_accuracy": raw / len(truth),
        "weighted_accuracy": weighted_accuracy(pred, truth, weights),
        "per_class": per_class,
        "confusion": confusion,
        "per_subject_weighted_accuracy": per_subject,
    }


def save_result(result: TrainResult, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, metrics = out / "best.mfsp", out / "metrics.csv"
    save_checkpoint(ckpt, result.bundle.state_dict())
    metrics.write_text(result.csv)
    return ckpt, metrics


# ------------------------------------------------------------ transfer study

@dataclass
class TransferResult:
    seed: int
    baseline: float
    mfscsn: float
    baseline_epoch: int
    mfscsn_epoch: int
    seconds: float

    @property
    def gap(self) -> float:
        return self.mfscsn - self.baseline


def transfer_benchmark(seed: int, max_epochs: int, common_size: int, val_per_subject: int,
                       spec_kwargs: Mapping | None = None, **cfg_kwargs) -> TransferResult:
    """Target-only baseline against MF-SCSN on the synthetic benchmark at one seed.

    Branches 0-2 are the sources and branch 3 the target; both models are
    scored on the held-out target test set.
    """
    start = time.perf_counter()
    specs = benchmark_specs(seed, **(spec_kwargs or {}))
    ds = {name: preprocess_trials(*generate_dataset(spec)) for name, spec in specs.items()}
    data = {0: ds["source_a"], 1: ds["source_b"], 2: ds["source_c"], 3: ds["target"]}
    cfg = ExperimentConfig([BranchData(k) for k in range(4)], 3, seed=seed, max_epochs=max_epochs,
                           val_per_subject=val_per_subject, common_size=common_size, **cfg_kwargs)
    base = train_baseline(cfg, {3: data[3]})
    mf = train_mfscsn(cfg, data)
    test = ds["target_test"]
    return TransferResult(seed, evaluate(base.bundle, test, 3, cfg.weights)["weighted_accuracy"],
                          evaluate(mf.bundle, test, 3, cfg.weights)["weighted_accuracy"], base.best_epoch,
                          mf.best_epoch, time.perf_counter() - start)
