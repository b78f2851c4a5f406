import numpy as np
import pytest

from conftest import random_batch
from fedscsn.fed.audit import AuditEntry, AuditLog, AuditPolicy, privacy_audit
from fedscsn.fed.frames import FLAG_EVAL, Frame, MsgKind, control
from fedscsn.fed.runtime import (Cloud, Federation, LoopbackLink, Node, ProtocolError, RoundAborted, node_step,
                                 run_round_inprocess)
from fedscsn.fed.tcp import TcpFederation
from fedscsn.models import (AdamConfig, BranchConfig, MfScsnConfig, build_mfscsn, monolithic_forward_backward,
                            monolithic_train_step, predict_logits)
from fedscsn.nn.rng import Rng

CLASSES = (4, 2, 4, 4)
OPT = AdamConfig()


def make_bundle(classes=CLASSES, trunk_widths=(50, 50, 50), seed=42):
    cfg = MfScsnConfig(tuple(BranchConfig(k, c) for k, c in enumerate(classes)), tuple(trunk_widths))
    return build_mfscsn(cfg, Rng(seed, "init"))


def round_batches(step, classes=CLASSES, b=10):
    rng = Rng(7, f"data/step{step}")
    return {k: (random_batch(rng.substream(f"x{k}"), b), rng.substream(f"y{k}").integers(c, b))
            for k, c in enumerate(classes)}


def assert_bit_identical(a, b):
    sa, sb = a.state_dict(), b.state_dict()
    assert sa.keys() == sb.keys()
    for name in sa:
        assert sa[name].tobytes() == sb[name].tobytes(), name


def monolithic(rounds, classes=CLASSES, **kw):
    ref = make_bundle(classes, **kw)
    losses = [monolithic_train_step(ref, round_batches(t, classes), Rng(42, "train"), t, OPT) for t in range(rounds)]
    return ref, losses


def test_inprocess_matches_monolithic_bit_exactly():
    ref, ref_losses = monolithic(4)
    fed = make_bundle()
    losses = [run_round_inprocess(fed, round_batches(t), Rng(42, "train"), t, OPT) for t in range(4)]
    assert_bit_identical(ref, fed)
    assert losses == ref_losses


def _nodes(bundle, rounds_data, rng):
    return {k: Node(k, bundle.bottoms[k], bundle.tops[k], len(bundle.branch_ids), rng, OPT,
                    batches=lambda step, k=k: rounds_data(step)[k]) for k in bundle.branch_ids}


def test_federation_with_batch_sources_matches_monolithic():
    ref, _ = monolithic(3)
    fed = make_bundle()
    federation = Federation(fed, Rng(42, "train"), OPT, batches={k: (lambda s, k=k: round_batches(s)[k])
                                                                 for k in range(4)})
    for _ in range(3):
        federation.train_round()
    assert_bit_identical(ref, fed)


def test_tcp_matches_inprocess_bit_exactly():
    inproc = make_bundle()
    for t in range(3):
        run_round_inprocess(inproc, round_batches(t), Rng(42, "train"), t, OPT)
    tcp_bundle = make_bundle()
    audit = AuditLog()
    fed = TcpFederation(_nodes(tcp_bundle, round_batches, Rng(42, "train")), tcp_bundle.trunk, OPT, audit)
    try:
        for _ in range(3):
            fed.train_round()
    finally:
        fed.shutdown()
    assert_bit_identical(inproc, tcp_bundle)
    report = privacy_audit(audit)
    assert report.passed, report.format()
    assert report.data_cols == {50}


def test_identity_trunk_oracle():
    # an empty trunk forwards features unchanged; the node alone must reproduce a local end-to-end step
    bundle = make_bundle(classes=(4,), trunk_widths=())
    ref = bundle.copy()
    x, y = round_batches(0, (4,))[0]

    class Mirror:
        """Cloud stand-in with an identity trunk."""

        def __init__(self):
            self.queue = []

        def send(self, f):
            reply = {MsgKind.FEATURES_UP: MsgKind.TRUNK_OUT_DOWN, MsgKind.OUTGRAD_UP: MsgKind.INGRAD_DOWN}[f.kind]
            self.queue.append(Frame(reply, f.branch_id, f.round_id, f.payload))

        def recv(self):
            return self.queue.pop(0)

    node = Node(0, bundle.bottoms[0], bundle.tops[0], 1, Rng(42, "train"), OPT)
    metrics = node_step(node, x, y, 0, Mirror())
    losses, grads = monolithic_forward_backward(ref, {0: (x, y)}, Rng(42, "train"))
    assert metrics["loss"] == losses[0]
    monolithic_train_step(ref, {0: (x, y)}, Rng(42, "train"), 0, OPT)
    assert_bit_identical(ref, bundle)


def test_round_mismatch_aborts_without_parameter_change():
    bundle = make_bundle()
    node = Node(1, bundle.bottoms[1], bundle.tops[1], 4, Rng(1, "train"), OPT)
    before = bundle.state_dict()
    x, y = round_batches(0)[1]
    node.begin(5, x, y)
    with pytest.raises(ProtocolError):
        node.handle(Frame(MsgKind.TRUNK_OUT_DOWN, 1, 6, np.zeros((10, 50), np.float32)))
    with pytest.raises(ProtocolError):
        node.handle(Frame(MsgKind.INGRAD_DOWN, 1, 5, np.zeros((10, 50), np.float32)))
    with pytest.raises(ProtocolError):
        node.handle(Frame(MsgKind.TRUNK_OUT_DOWN, 2, 5, np.zeros((10, 50), np.float32)))
    after = bundle.state_dict()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)
    assert node.phase == "features_sent" and node.losses == []


def test_completed_round_cannot_be_replayed():
    bundle = make_bundle()
    fed = Federation(bundle, Rng(1, "train"), OPT)
    fed.train_round(round_batches(0))
    node = fed.nodes[0]
    with pytest.raises(ProtocolError, match="already completed"):
        node.begin(0, *round_batches(0)[0])


def test_timeout_triggers_retry_with_same_result():
    ref, _ = monolithic(2)
    fed_bundle = make_bundle()
    fed = Federation(fed_bundle, Rng(42, "train"), OPT)
    dropped = []

    def drop_once(frame):
        if frame.kind is MsgKind.FEATURES_UP and frame.branch_id == 1 and not dropped:
            dropped.append(frame)
            return True
        return False

    fed.cloud.links[1].drop = drop_once
    fed.cloud.timeout = 0.01
    for t in range(2):
        fed.train_round(round_batches(t))
    assert len(dropped) == 1
    assert_bit_identical(ref, fed_bundle)


def test_persistent_timeout_aborts_and_leaves_parameters():
    bundle = make_bundle()
    before = bundle.state_dict()
    fed = Federation(bundle, Rng(42, "train"), OPT)
    fed.cloud.links[2].drop = lambda f: f.kind is MsgKind.OUTGRAD_UP
    fed.cloud.timeout = 0.01
    with pytest.raises(RoundAborted):
        fed.train_round(round_batches(0))
    after = bundle.state_dict()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)
    # once the branch recovers the same round completes and matches the reference
    fed.cloud.links[2].drop = None
    fed.train_round(round_batches(0))
    ref, _ = monolithic(1)
    assert_bit_identical(ref, bundle)


def test_empty_branch_list_rejected():
    with pytest.raises(ValueError):
        run_round_inprocess(make_bundle(), {}, Rng(1, "train"))
    cloud = Cloud(make_bundle().trunk, {}, OPT)
    with pytest.raises(ValueError):
        cloud.run_round()


def test_single_branch_round_matches_monolithic():
    ref, _ = monolithic(2, classes=(4,))
    fed = make_bundle((4,))
    for t in range(2):
        run_round_inprocess(fed, round_batches(t, (4,)), Rng(42, "train"), t, OPT)
    assert_bit_identical(ref, fed)


def test_frames_per_round_and_row_conservation():
    audit = AuditLog()
    run_round_inprocess(make_bundle(), round_batches(0), Rng(42, "train"), 0, OPT, audit)
    data = [e for e in audit.entries if e.msg_kind <= 4]
    assert len(data) == 16
    for k in range(4):
        mine = [e for e in data if e.branch_id == k]
        assert sorted(e.msg_kind for e in mine) == [1, 2, 3, 4]
        assert {(e.rows, e.cols) for e in mine} == {(10, 50)}
    features = [e for e in data if e.msg_kind == 1]
    assert sum(e.rows for e in features) == 40
    assert privacy_audit(audit).passed


def test_eval_round_returns_local_logits_without_updates():
    bundle = make_bundle()
    before = bundle.state_dict()
    x = random_batch(Rng(3, "val"), 6)
    audit = AuditLog()
    fed = Federation(bundle, Rng(1, "train"), OPT, audit, eval_data={3: x})
    logits = fed.eval_round(3)
    assert np.array_equal(logits, predict_logits(bundle, 3, x))
    after = bundle.state_dict()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)
    kinds = [e.msg_kind for e in audit.entries]
    assert kinds == [MsgKind.ROUND_BEGIN, MsgKind.FEATURES_UP, MsgKind.TRUNK_OUT_DOWN]
    assert privacy_audit(audit).passed


def test_shutdown_marks_nodes_done():
    fed = Federation(make_bundle(), Rng(1, "train"), OPT)
    fed.shutdown()
    assert all(n.done for n in fed.nodes.values())


# ----------------------------------------------------------------------- audit

def clean_log():
    audit = AuditLog()
    run_round_inprocess(make_bundle(), round_batches(0), Rng(42, "train"), 0, OPT, audit)
    return audit


def test_injected_raw_payload_flagged():
    audit = clean_log()
    audit.record("up", Frame(MsgKind.FEATURES_UP, 0, 0, np.zeros((10, 10200), np.float32)))
    report = privacy_audit(audit)
    assert not report.passed
    assert any("raw-data-shaped payload (cols=10200)" in v.reason for v in report.violations)


def test_injected_unknown_kind_flagged():
    audit = clean_log()
    audit.append(AuditEntry("up", 0x99, 0, 0, 0, 20, 0))
    report = privacy_audit(audit)
    assert [v.reason for v in report.violations] == ["unknown message kind 0x99"]


def test_label_column_flagged():
    audit = AuditLog()
    audit.record("up", Frame(MsgKind.OUTGRAD_UP, 0, 0, np.zeros((10, 1), np.float32)))
    assert "label-shaped" in privacy_audit(audit).violations[0].reason


def test_wrong_direction_and_row_mismatch_flagged():
    audit = AuditLog()
    audit.record("down", Frame(MsgKind.FEATURES_UP, 0, 0, np.zeros((10, 50), np.float32)))
    audit.record("down", Frame(MsgKind.TRUNK_OUT_DOWN, 0, 0, np.zeros((9, 50), np.float32)))
    reasons = " | ".join(v.reason for v in privacy_audit(audit).violations)
    assert "travelling down" in reasons and "not conserved" in reasons


def test_parameter_kinds_flagged_by_policy():
    audit = clean_log()
    report = privacy_audit(audit, AuditPolicy(parameter_kinds=frozenset({MsgKind.INGRAD_DOWN})))
    assert any("carries model parameters" in v.reason for v in report.violations)


def test_audit_csv_roundtrip(tmp_path):
    audit = clean_log()
    text = audit.to_csv()
    assert text.splitlines()[0] == "direction,msg_kind,branch_id,rows,cols,bytes,round_id"
    audit.save(tmp_path / "a.csv")
    assert AuditLog.load(tmp_path / "a.csv").entries == audit.entries
    with pytest.raises(ValueError):
        AuditLog.from_csv("a,b\n1,2\n")


def test_audit_report_format_lists_violations():
    audit = AuditLog()
    audit.append(AuditEntry("up", 0x99, 0, 0, 0, 20, 0))
    text = privacy_audit(audit).format()
    assert "violations: 1" in text and "0x99" in text


def test_link_logs_each_frame_once():
    bundle = make_bundle(classes=(4,))
    audit = AuditLog()
    node = Node(0, bundle.bottoms[0], bundle.tops[0], 1, Rng(1, "train"), OPT)
    link = LoopbackLink(node, audit)
    link.send(control(MsgKind.SHUTDOWN, 0))
    assert len(audit) == 1 and node.done
