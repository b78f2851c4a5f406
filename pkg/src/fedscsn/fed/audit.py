"""Boundary log and the structural privacy audit over it."""
from __future__ import annotations

import csv
import io
import threading
from collections import defaultdict
from dataclasses import astuple, dataclass, field
from pathlib import Path

from .frames import HEADER_LEN, UPSTREAM, Frame, MsgKind

CSV_HEADER = ("direction", "msg_kind", "branch_id", "rows", "cols", "bytes", "round_id")


@dataclass(frozen=True)
class AuditEntry:
    direction: str
    msg_kind: int
    branch_id: int
    rows: int
    cols: int
    byte_len: int
    round_id: int

    @classmethod
    def of(cls, direction: str, frame: Frame) -> "AuditEntry":
        return cls(direction, int(frame.kind), frame.branch_id, frame.rows, frame.cols, frame.byte_len,
                   frame.round_id)


class AuditLog:
    """Append-only record of frames crossing the data-centre boundary."""

    def __init__(self, entries=()):
        self._entries: list[AuditEntry] = list(entries)
        self._lock = threading.Lock()

    def record(self, direction: str, frame: Frame) -> None:
        entry = AuditEntry.of(direction, frame)
        with self._lock:
            self._entries.append(entry)

    def append(self, entry: AuditEntry) -> None:
        with self._lock:
            self._entries.append(entry)

    @property
    def entries(self) -> tuple[AuditEntry, ...]:
        with self._lock:
            return tuple(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for e in self.entries:
            w.writerow(astuple(e))
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "AuditLog":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != CSV_HEADER:
            raise ValueError(f"audit CSV must start with header {','.join(CSV_HEADER)}")
        entries = [AuditEntry(r[0], *(int(v) for v in r[1:])) for r in rows[1:] if r]
        return cls(entries)

    @classmethod
    def load(cls, path) -> "AuditLog":
        return cls.from_csv(Path(path).read_text())


@dataclass(frozen=True)
class AuditPolicy:
    allowed_kinds: frozenset[int] = frozenset(int(k) for k in MsgKind)
    allowed_cols: frozenset[int] = frozenset({50})
    raw_width: int = 17 * 600
    # kinds that would carry model parameters; the protocol defines none
    parameter_kinds: frozenset[int] = frozenset()


@dataclass
class Violation:
    index: int
    entry: AuditEntry
    reason: str


@dataclass
class AuditReport:
    frames: int
    violations: list[Violation] = field(default_factory=list)
    data_cols: set[int] = field(default_factory=set)
    kinds: set[int] = field(default_factory=set)

    @property
    def passed(self) -> bool:
        return not self.violations

    def format(self) -> str:
        lines = [f"frames audited: {self.frames}", f"kinds seen: {sorted(f'0x{k:02X}' for k in self.kinds)}",
                 f"data payload widths: {sorted(self.data_cols)}", f"violations: {len(self.violations)}"]
        lines += [f"  #{v.index}: {v.reason} ({v.entry})" for v in self.violations]
        return "\n".join(lines)


def privacy_audit(log: AuditLog, policy: AuditPolicy = AuditPolicy()) -> AuditReport:
    entries = log.entries
    report = AuditReport(len(entries))
    rows_seen: dict[tuple[int, int], dict[int, int]] = defaultdict(dict)

    def flag(i, e, reason):
        report.violations.append(Violation(i, e, reason))

    for i, e in enumerate(entries):
        report.kinds.add(e.msg_kind)
        if e.msg_kind not in policy.allowed_kinds:
            flag(i, e, f"unknown message kind 0x{e.msg_kind:02X}")
            continue
        if e.msg_kind in policy.parameter_kinds:
            flag(i, e, f"message kind 0x{e.msg_kind:02X} carries model parameters")
        kind = MsgKind(e.msg_kind)
        expected_dir = "up" if kind in UPSTREAM else "down"
        if kind is not MsgKind.HELLO and e.direction != expected_dir:
            flag(i, e, f"{kind.name} travelling {e.direction}")
        if e.byte_len != HEADER_LEN + 4 * e.rows * e.cols:
            flag(i, e, f"byte length {e.byte_len} inconsistent with a {e.rows}x{e.cols} payload")
        if not kind.is_data:
            if e.rows or e.cols:
                flag(i, e, f"control frame {kind.name} carries a {e.rows}x{e.cols} payload")
            continue
        report.data_cols.add(e.cols)
        if e.cols not in policy.allowed_cols:
            if e.cols == policy.raw_width:
                reason = f"raw-data-shaped payload (cols={e.cols})"
            elif e.cols == 1:
                reason = "label-shaped payload (cols=1)"
            else:
                reason = f"payload width {e.cols} not in allowed {sorted(policy.allowed_cols)}"
            flag(i, e, reason)
        rows_seen[(e.round_id, e.branch_id)][e.msg_kind] = e.rows
    for (round_id, branch), kinds in rows_seen.items():
        if len(set(kinds.values())) > 1:
            detail = ", ".join(f"{MsgKind(k).name}={r}" for k, r in sorted(kinds.items()))
            flag(-1, AuditEntry("-", 0, branch, 0, 0, 0, round_id), f"row counts not conserved: {detail}")
    return report
