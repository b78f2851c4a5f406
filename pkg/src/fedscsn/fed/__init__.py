"""Split-learning runtime: wire frames, round protocol, transports and audit."""
from .audit import AuditEntry, AuditLog, AuditPolicy, AuditReport, privacy_audit
from .frames import (FLAG_EVAL, BadMagic, Frame, FrameError, MsgKind, PayloadLengthMismatch, TruncatedFrame,
                     UnknownKind, UnsupportedVersion, control, decode_frame, decode_header, encode_frame)
from .runtime import (Cloud, Federation, LoopbackLink, Node, ProtocolError, RoundAborted, RoundState,
                      RoundTimeout, cloud_round, node_step, run_round_inprocess)
from .tcp import SocketChannel, TcpFederation, accept_branches, connect, listen, serve_node
