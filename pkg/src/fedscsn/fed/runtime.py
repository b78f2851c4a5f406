"""Round protocol: nodes hold data, labels, bottoms and tops; the cloud holds the trunk.

A round is a synchronous barrier::

    cloud  -> ROUND_BEGIN       (each branch, ascending id)
    node   -> FEATURES_UP       bottom(batch), B x 50
    cloud  -> TRUNK_OUT_DOWN    trunk(concat features) split per branch
    node   -> OUTGRAD_UP        d(loss / N) / d trunk_out
    cloud  -> INGRAD_DOWN       d / d features; trunk Adam step happens first
    node      bottom backward, Adam on bottom and top

Rounds flagged ``FLAG_EVAL`` stop after TRUNK_OUT_DOWN; the node keeps the
logits to itself.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from ..models import (AdamConfig, ModelBundle, Partition, apply_gradients, dropout_rng, partition_backward,
                      partition_forward, row_groups, top_step)
from ..nn.rng import Rng
from .audit import AuditLog
from .frames import FLAG_EVAL, Frame, MsgKind, control, decode_frame, encode_frame

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0


class ProtocolError(RuntimeError):
    """A frame arrived that the receiver's state does not allow."""


class RoundTimeout(RuntimeError):
    """A branch did not answer in time; the round may be retried."""


class RoundAborted(RuntimeError):
    """A round failed on every attempt."""


class Link(Protocol):
    """Cloud-side view of one branch connection."""

    def send(self, frame: Frame) -> None: ...

    def recv(self, timeout: float) -> Frame: ...


def _grads_by_name(part: Partition, grads) -> dict[str, np.ndarray]:
    return {p.name: g[role] for entry, g in zip(part.params, grads) for role, p in entry.items()}


# ------------------------------------------------------------------ node side

BatchSource = Callable[[int], tuple[np.ndarray, np.ndarray]]


class Node:
    """Single-threaded state machine for one data centre."""

    def __init__(self, branch_id: int, bottom: Partition, top: Partition, num_branches: int, rng: Rng,
                 opt: AdamConfig = AdamConfig(), batches: BatchSource | None = None,
                 eval_data: np.ndarray | None = None, step: int = 0):
        if num_branches < 1:
            raise ValueError("num_branches must be >= 1")
        self.branch_id = branch_id
        self.bottom = bottom
        self.top = top
        self.num_branches = num_branches
        self.rng = rng
        self.opt = opt
        self.batches = batches
        self.eval_data = eval_data
        self.step = step
        self.last_round = -1
        self.losses: list[float] = []
        self.eval_logits: np.ndarray | None = None
        self.done = False
        self._reset()

    def _reset(self):
        self.phase = "idle"
        self.pending: int | None = None
        self._eval = False
        self._labels = None
        self._bottom_caches = None
        self._top_grads = None
        self._loss = None

    def hello(self) -> Frame:
        return control(MsgKind.HELLO, self.branch_id)

    def begin(self, round_id: int, batch: np.ndarray, labels: np.ndarray | None, flags: int = 0) -> Frame:
        """Run the bottom on ``batch`` and return the FEATURES_UP frame."""
        if round_id <= self.last_round:
            raise ProtocolError(f"branch {self.branch_id}: round {round_id} already completed "
                                f"(last {self.last_round})")
        if self.phase != "idle" and round_id != self.pending:
            raise ProtocolError(f"branch {self.branch_id}: round {round_id} begun while {self.pending} is open")
        self._reset()
        self._eval = bool(flags & FLAG_EVAL)
        if self._eval:
            feats, _ = partition_forward(self.bottom, batch, "eval")
        else:
            feats, self._bottom_caches = partition_forward(
                self.bottom, batch, "train", dropout_rng(self.rng, self.branch_id, self.step))
            self._labels = np.asarray(labels)
        self.phase, self.pending = "features_sent", round_id
        return Frame(MsgKind.FEATURES_UP, self.branch_id, round_id, feats, flags)

    def _check(self, frame: Frame, phase: str):
        if frame.branch_id != self.branch_id:
            raise ProtocolError(f"branch {self.branch_id}: frame addressed to branch {frame.branch_id}")
        if self.phase != phase or frame.round_id != self.pending:
            raise ProtocolError(f"branch {self.branch_id}: unexpected {frame.kind.name} for round "
                                f"{frame.round_id} (phase {self.phase}, open round {self.pending})")

    def handle(self, frame: Frame) -> list[Frame]:
        """Consume one frame from the cloud; return the frames to send back."""
        k = frame.kind
        if k is MsgKind.ROUND_BEGIN:
            if frame.flags & FLAG_EVAL:
                if self.eval_data is None:
                    raise ProtocolError(f"branch {self.branch_id}: eval round without validation data")
                return [self.begin(frame.round_id, self.eval_data, None, frame.flags)]
            if self.batches is None:
                raise ProtocolError(f"branch {self.branch_id}: no batch source")
            x, y = self.batches(self.step)
            return [self.begin(frame.round_id, x, y, frame.flags)]
        if k is MsgKind.TRUNK_OUT_DOWN:
            self._check(frame, "features_sent")
            if self._eval:
                self.eval_logits, _ = partition_forward(self.top, frame.payload, "eval")
                self.last_round = frame.round_id
                self._reset()
                return []
            loss, g, grads, _ = top_step(self.top, frame.payload, self._labels, 1.0 / self.num_branches)
            self._loss, self._top_grads = loss, grads
            self.phase = "outgrad_sent"
            return [Frame(MsgKind.OUTGRAD_UP, self.branch_id, frame.round_id, g)]
        if k is MsgKind.INGRAD_DOWN:
            self._check(frame, "outgrad_sent")
            _, bottom_grads = partition_backward(self.bottom, self._bottom_caches, frame.payload)
            grads = _grads_by_name(self.bottom, bottom_grads)
            grads.update(_grads_by_name(self.top, self._top_grads))
            apply_gradients(self.bottom.tensors(), grads, self.opt)
            apply_gradients(self.top.tensors(), grads, self.opt)
            self.losses.append(self._loss)
            self.step += 1
            self.last_round = frame.round_id
            self._reset()
            return []
        if k is MsgKind.SHUTDOWN:
            self.done = True
            return []
        raise ProtocolError(f"branch {self.branch_id}: node cannot handle {k.name}")


class Channel(Protocol):
    """Node-side view of the connection to the cloud."""

    def send(self, frame: Frame) -> None: ...

    def recv(self) -> Frame: ...


def node_step(node: Node, batch: np.ndarray, labels: np.ndarray, round_id: int, channel: Channel) -> dict:
    """Drive one training round from the node side; returns local metrics."""
    channel.send(node.begin(round_id, batch, labels))
    while node.phase != "idle":
        for out in node.handle(channel.recv()):
            channel.send(out)
    return {"loss": node.losses[-1], "step": node.step, "round_id": round_id}


# ----------------------------------------------------------------- cloud side

@dataclass
class RoundState:
    round_id: int
    expected: list[int]
    flags: int = 0
    received: dict[int, np.ndarray] = field(default_factory=dict)
    phase: str = "collecting"
    attempt: int = 1

    @property
    def is_eval(self) -> bool:
        return bool(self.flags & FLAG_EVAL)


class Cloud:
    """Owns the trunk and the branch links; runs rounds as a single executor."""

    def __init__(self, trunk: Partition, links: Mapping[int, Link], opt: AdamConfig = AdamConfig(),
                 timeout: float = DEFAULT_TIMEOUT, max_attempts: int = 3):
        self.trunk = trunk
        self.links = dict(sorted(links.items()))
        self.opt = opt
        self.timeout = timeout
        self.max_attempts = max_attempts
        self.next_round = 0
        self._attempts = 0

    def _expect(self, state: RoundState, k: int, kind: MsgKind) -> Frame:
        while True:
            f = self.links[k].recv(self.timeout)
            stale = f.round_id < state.round_id
            same = f.round_id == state.round_id
            # a node that saw a re-issued ROUND_BEGIN late may answer twice
            duplicate = same and f.kind is MsgKind.FEATURES_UP and kind is MsgKind.OUTGRAD_UP
            # gradients left over from an aborted attempt of this round
            leftover = same and state.attempt > 1 and f.kind is MsgKind.OUTGRAD_UP and kind is MsgKind.FEATURES_UP
            if stale or duplicate or leftover:
                log.warning("branch %d: dropping %s for round %d", k, f.kind.name, f.round_id)
                continue
            if f.kind is not kind or f.round_id != state.round_id or f.branch_id != k:
                raise ProtocolError(f"expected {kind.name} round {state.round_id} from branch {k}, got "
                                    f"{f.kind.name} round {f.round_id} from branch {f.branch_id}")
            return f

    def run_round(self, branches: Sequence[int] | None = None, flags: int = 0) -> RoundState:
        ids = sorted(self.links if branches is None else branches)
        if not ids:
            raise ValueError("a round needs at least one branch")
        unknown = [k for k in ids if k not in self.links]
        if unknown:
            raise KeyError(f"no link for branches {unknown}")
        round_id = self.next_round
        for _ in range(self.max_attempts):
            # attempts keep counting when an aborted round is run again
            self._attempts += 1
            attempt = self._attempts
            state = RoundState(round_id, ids, flags, attempt=attempt)
            try:
                cloud_round(self, state)
            except RoundTimeout as e:
                log.warning("round %d attempt %d aborted: %s", round_id, attempt, e)
                continue
            self.next_round = round_id + 1
            self._attempts = 0
            return state
        raise RoundAborted(f"round {round_id} failed after {self.max_attempts} attempts")

    def shutdown(self) -> None:
        for k, link in self.links.items():
            link.send(control(MsgKind.SHUTDOWN, k, self.next_round))


def cloud_round(server: Cloud, state: RoundState) -> None:
    """One barrier round. Parameters change only after every branch answered."""
    ids, r = state.expected, state.round_id
    for k in ids:
        server.links[k].send(control(MsgKind.ROUND_BEGIN, k, r, state.flags))
    for k in ids:
        state.received[k] = server._expect(state, k, MsgKind.FEATURES_UP).payload
    groups = row_groups([len(state.received[k]) for k in ids])
    mode = "eval" if state.is_eval else "train"
    trunk_out, caches = partition_forward(server.trunk, np.concatenate([state.received[k] for k in ids]), mode)
    state.phase = "trunk_done"
    for k, (lo, hi) in zip(ids, groups):
        server.links[k].send(Frame(MsgKind.TRUNK_OUT_DOWN, k, r, trunk_out[lo:hi], state.flags))
    if state.is_eval:
        state.phase = "complete"
        return
    state.phase = "grads_collecting"
    outgrads = []
    for k, (lo, hi) in zip(ids, groups):
        g = server._expect(state, k, MsgKind.OUTGRAD_UP).payload
        if len(g) != hi - lo:
            raise ProtocolError(f"branch {k}: {len(g)} gradient rows for {hi - lo} feature rows")
        outgrads.append(g)
    g_in, grads = partition_backward(server.trunk, caches, np.concatenate(outgrads), groups)
    apply_gradients(server.trunk.tensors(), _grads_by_name(server.trunk, grads), server.opt)
    for k, (lo, hi) in zip(ids, groups):
        server.links[k].send(Frame(MsgKind.INGRAD_DOWN, k, r, g_in[lo:hi]))
    state.phase = "complete"


# ------------------------------------------------------------ in-process mode

class LoopbackLink:
    """In-memory link: every frame is encoded, logged once and decoded."""

    def __init__(self, node: Node, audit: AuditLog | None = None,
                 drop: Callable[[Frame], bool] | None = None):
        self.node = node
        self.audit = audit
        self.drop = drop
        self._inbox: list[bytes] = []

    def send(self, frame: Frame) -> None:
        wire = encode_frame(frame)
        if self.audit is not None:
            self.audit.record("down", frame)
        for out in self.node.handle(decode_frame(wire)):
            if self.drop is not None and self.drop(out):
                continue
            self._inbox.append(encode_frame(out))

    def recv(self, timeout: float) -> Frame:
        if not self._inbox:
            raise RoundTimeout(f"branch {self.node.branch_id}: no frame within {timeout} s")
        frame = decode_frame(self._inbox.pop(0))
        if self.audit is not None:
            self.audit.record("up", frame)
        return frame


class Federation:
    """Nodes and cloud wired to the partitions of one bundle (shared, updated in place)."""

    def __init__(self, bundle: ModelBundle, rng: Rng, opt: AdamConfig = AdamConfig(),
                 audit: AuditLog | None = None, step: int = 0, batches: Mapping[int, BatchSource] | None = None,
                 eval_data: Mapping[int, np.ndarray] | None = None):
        ids = bundle.branch_ids
        if not ids:
            raise ValueError("bundle has no branches")
        batches = batches or {}
        eval_data = eval_data or {}
        self.audit = audit if audit is not None else AuditLog()
        self.nodes = {k: Node(k, bundle.bottoms[k], bundle.tops[k], len(ids), rng, opt, batches.get(k),
                              eval_data.get(k), step) for k in ids}
        self.cloud = Cloud(bundle.trunk, {k: LoopbackLink(n, self.audit) for k, n in self.nodes.items()}, opt)

    def train_round(self, branch_batches: Mapping[int, tuple[np.ndarray, np.ndarray]] | None = None
                    ) -> dict[int, float]:
        if branch_batches is not None:
            if not branch_batches:
                raise ValueError("no branch batches given")
            for k, (x, y) in branch_batches.items():
                self.nodes[k].batches = lambda _step, x=x, y=y: (x, y)
        state = self.cloud.run_round()
        return {k: self.nodes[k].losses[-1] for k in state.expected}

    def eval_round(self, branch_id: int) -> np.ndarray:
        self.cloud.run_round([branch_id], FLAG_EVAL)
        return self.nodes[branch_id].eval_logits

    def shutdown(self) -> None:
        self.cloud.shutdown()


def run_round_inprocess(bundle: ModelBundle, branch_batches: Mapping[int, tuple[np.ndarray, np.ndarray]],
                        rng: Rng, step: int = 0, opt: AdamConfig = AdamConfig(),
                        audit: AuditLog | None = None) -> dict[int, float]:
    """One full protocol round over in-memory links; updates ``bundle`` in place."""
    if not branch_batches:
        raise ValueError("no branch batches given")
    if sorted(branch_batches) != bundle.branch_ids:
        raise ValueError(f"batches for {sorted(branch_batches)} but bundle has branches {bundle.branch_ids}")
    fed = Federation(bundle, rng, opt, audit, step)
    fed.cloud.next_round = step
    for node in fed.nodes.values():
        node.last_round = step - 1
    return fed.train_round(branch_batches)
