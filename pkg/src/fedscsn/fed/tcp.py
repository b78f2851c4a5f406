"""Frames over TCP: a stream of frames, each read header first, then payload."""
from __future__ import annotations

import logging
import socket
import threading
import time
from typing import Sequence

from .audit import AuditLog
from .frames import FLAG_EVAL, HEADER_LEN, Frame, MsgKind, TruncatedFrame, decode_frame, decode_header, encode_frame
from .runtime import DEFAULT_TIMEOUT, Cloud, Node, ProtocolError, RoundTimeout

log = logging.getLogger(__name__)


class ChannelClosed(ConnectionError):
    pass


def parse_addr(addr: str) -> tuple[str, int]:
    host, sep, port = addr.rpartition(":")
    if not sep:
        raise ValueError(f"address must be host:port, got {addr!r}")
    return host or "127.0.0.1", int(port)


def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if buf:
                raise TruncatedFrame(f"connection closed after {len(buf)} of {n} bytes")
            raise ChannelClosed("connection closed by peer")
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> Frame:
    head = _read_exact(sock, HEADER_LEN)
    h = decode_header(head)
    body = _read_exact(sock, h.payload_len) if h.payload_len else b""
    return decode_frame(head + body)


class SocketChannel:
    """Blocking frame channel; optionally logs each frame at this endpoint."""

    def __init__(self, sock: socket.socket, audit: AuditLog | None = None, in_dir: str = "up",
                 out_dir: str = "down"):
        self.sock = sock
        self.audit = audit
        self.in_dir, self.out_dir = in_dir, out_dir
        self._lock = threading.Lock()

    def send(self, frame: Frame) -> None:
        with self._lock:
            self.sock.sendall(encode_frame(frame))
        if self.audit is not None:
            self.audit.record(self.out_dir, frame)

    def recv(self, timeout: float | None = None) -> Frame:
        self.sock.settimeout(timeout)
        try:
            frame = read_frame(self.sock)
        except socket.timeout as e:
            raise RoundTimeout(f"no frame within {timeout} s") from e
        finally:
            self.sock.settimeout(None)
        if self.audit is not None:
            self.audit.record(self.in_dir, frame)
        return frame

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def listen(addr: str) -> socket.socket:
    return socket.create_server(parse_addr(addr))


def accept_branches(srv: socket.socket, expected: Sequence[int] | int, audit: AuditLog | None = None,
                    timeout: float = DEFAULT_TIMEOUT) -> dict[int, SocketChannel]:
    """Accept connections until every expected branch has said HELLO.

    ``expected`` is either the branch ids or just how many branches to wait for.
    """
    count = expected if isinstance(expected, int) else len(expected)
    want = None if isinstance(expected, int) else set(expected)
    links: dict[int, SocketChannel] = {}
    srv.settimeout(timeout)
    try:
        while len(links) < count:
            conn, peer = srv.accept()
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            ch = SocketChannel(conn, audit)
            hello = ch.recv(timeout)
            if hello.kind is not MsgKind.HELLO:
                ch.close()
                raise ProtocolError(f"{peer}: expected HELLO, got {hello.kind.name}")
            k = hello.branch_id
            if want is not None and k not in want:
                ch.close()
                raise ProtocolError(f"unexpected branch {k}; expecting {sorted(want)}")
            if k in links:
                ch.close()
                raise ProtocolError(f"branch {k} connected twice")
            links[k] = ch
            log.info("branch %d connected from %s", k, peer)
    except socket.timeout as e:
        raise RoundTimeout(f"only {sorted(links)} of {count} branches connected") from e
    finally:
        srv.settimeout(None)
    return dict(sorted(links.items()))


def connect(addr: str, retries: int = 50, delay: float = 0.1) -> socket.socket:
    last = None
    for _ in range(retries):
        try:
            sock = socket.create_connection(parse_addr(addr))
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return sock
        except OSError as e:
            last = e
            time.sleep(delay)
    raise ConnectionError(f"could not connect to {addr}: {last}")


def serve_node(node: Node, channel: SocketChannel) -> None:
    """Answer cloud frames until SHUTDOWN. Protocol errors leave parameters untouched."""
    channel.send(node.hello())
    while not node.done:
        try:
            frame = channel.recv(None)
        except ChannelClosed:
            log.warning("branch %d: cloud closed the connection", node.branch_id)
            return
        try:
            out = node.handle(frame)
        except ProtocolError as e:
            log.error("%s", e)
            continue
        for f in out:
            channel.send(f)


class TcpFederation:
    """Cloud on a local socket, one thread per node; same interface as the in-process federation."""

    def __init__(self, nodes: dict[int, Node], trunk, opt, audit: AuditLog | None = None,
                 addr: str = "127.0.0.1:0", timeout: float = DEFAULT_TIMEOUT):
        self.audit = audit if audit is not None else AuditLog()
        self.nodes = nodes
        srv = listen(addr)
        host, port = srv.getsockname()[:2]
        self.addr = f"{host}:{port}"
        self.threads = []
        self._node_channels = []
        for k, node in nodes.items():
            ch = SocketChannel(connect(self.addr), None, in_dir="down", out_dir="up")
            self._node_channels.append(ch)
            t = threading.Thread(target=serve_node, args=(node, ch), name=f"node{k}", daemon=True)
            t.start()
            self.threads.append(t)
        links = accept_branches(srv, list(nodes), self.audit, timeout)
        srv.close()
        self.cloud = Cloud(trunk, links, opt, timeout)

    def train_round(self) -> dict[int, float]:
        state = self.cloud.run_round()
        for k in state.expected:
            self._wait_idle(k)
        return {k: self.nodes[k].losses[-1] for k in state.expected}

    def eval_round(self, branch_id: int):
        self.cloud.run_round([branch_id], FLAG_EVAL)
        # the node finishes the eval round after the cloud's last send
        self._wait_idle(branch_id)
        return self.nodes[branch_id].eval_logits

    def _wait_idle(self, k: int, timeout: float = DEFAULT_TIMEOUT) -> None:
        end = time.monotonic() + timeout
        node = self.nodes[k]
        while node.phase != "idle" or node.last_round < self.cloud.next_round - 1:
            if time.monotonic() > end:
                raise RoundTimeout(f"branch {k} did not finish round {self.cloud.next_round - 1}")
            time.sleep(0.0005)

    def shutdown(self) -> None:
        self.cloud.shutdown()
        for t in self.threads:
            t.join(DEFAULT_TIMEOUT)
        for ch in list(self.cloud.links.values()) + self._node_channels:
            ch.close()
