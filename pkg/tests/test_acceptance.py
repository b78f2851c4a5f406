"""End-to-end acceptance checks; each prints one CRITERION line."""
import subprocess
import sys
import time

import numpy as np
import pytest

from fedscsn.fed.audit import AuditEntry, AuditLog, privacy_audit
from fedscsn.fed.frames import Frame, MsgKind, encode_frame
from fedscsn.fed.runtime import run_round_inprocess
from fedscsn.fed.tcp import TcpFederation
from fedscsn.harness import BranchData, ExperimentConfig, train_baseline, train_mfscsn, transfer_benchmark, \
    weighted_accuracy
from fedscsn.models import gradcheck_targets, monolithic_train_step
from fedscsn.nn.gradcheck import grad_check
from fedscsn.nn.rng import Rng
from fedscsn.preprocess.filters import design_bandpass, zero_phase_filter
from fedscsn.preprocess.pipeline import preprocess_trials
from fedscsn.synth.generate import SynthDatasetSpec, generate_dataset
from fedscsn.synth.packed import write_packed
from test_runtime import OPT, _nodes, make_bundle, round_batches

# transfer benchmark settings
BENCH_SEEDS = (42, 43, 44, 45, 46)
BENCH_EPOCHS = 20
BENCH_COMMON = 160
BENCH_VAL = 6
BENCH_SPEC = {}


def _same_params(a, b) -> list[str]:
    sa, sb = a.state_dict(), b.state_dict()
    return [k for k in sa if sa[k].tobytes() != sb[k].tobytes()] + sorted(set(sa) ^ set(sb))


def test_criterion_1_gradient_correctness(report_criterion):
    start = time.perf_counter()
    rng = Rng(42, "gradcheck")
    errors = {}
    for name, (layers, shape) in gradcheck_targets().items():
        errors[name] = grad_check(layers, rng.substream(name), tol=1e-4, input_shape=shape)
    seconds = time.perf_counter() - start
    worst = max(r.max_error for r in errors.values())
    failed = [n for n, r in errors.items() if not r.passed]
    ok = not failed and worst < 1e-4 and seconds < 60
    report_criterion(1, ok, f"{len(errors)} targets, max rel error {worst:.2e}, failed {failed}, {seconds:.1f} s")
    assert ok


def test_criterion_2_federated_equals_monolithic(report_criterion):
    start = time.perf_counter()
    rounds = 10
    ref = make_bundle()
    for t in range(rounds):
        monolithic_train_step(ref, round_batches(t), Rng(42, "train"), t, OPT)
    inproc = make_bundle()
    for t in range(rounds):
        run_round_inprocess(inproc, round_batches(t), Rng(42, "train"), t, OPT)
    diff_inproc = _same_params(ref, inproc)
    tcp = make_bundle()
    fed = TcpFederation(_nodes(tcp, round_batches, Rng(42, "train")), tcp.trunk, OPT)
    try:
        for _ in range(rounds):
            fed.train_round()
    finally:
        fed.shutdown()
    diff_tcp = _same_params(inproc, tcp)
    seconds = time.perf_counter() - start
    ok = not diff_inproc and not diff_tcp and seconds < 120
    report_criterion(2, ok, f"{len(ref.state_dict())} tensors; in-process vs monolithic differing {diff_inproc}, "
                            f"tcp vs in-process differing {diff_tcp}, {seconds:.1f} s")
    assert ok


def test_criterion_3_filter_properties(report_criterion):
    fs = 200.0
    bp = design_bandpass(5, 4.0, 32.0, fs)
    # z = +1 and -1 exactly; exp(i*pi) is not exactly -1 in floating point
    h = np.abs(np.concatenate([bp.evaluate(np.array([1.0, -1.0])), bp.response([11.31, 1.0, 80.0], fs)]))
    n = np.arange(2000) / fs
    x10 = np.sin(2 * np.pi * 10 * n)
    y10 = zero_phase_filter(x10, bp)
    lags = np.arange(-20, 21)
    xc = [np.dot(x10[max(0, -l):len(n) - max(0, l)], y10[max(0, l):len(n) - max(0, -l)]) for l in lags]
    lag = int(lags[int(np.argmax(xc))])
    x50 = np.sin(2 * np.pi * 50 * n)
    y50 = zero_phase_filter(x50, bp)
    mid = slice(200, -200)  # steady state, away from the end transients
    rejection = -20 * np.log10(np.sqrt(np.mean(y50[mid] ** 2) / np.mean(x50[mid] ** 2)))
    checks = {
        "dc_zero": h[0] == 0.0,
        "nyquist_zero": h[1] == 0.0,
        "passband>=0.99": h[2] >= 0.99,
        "1Hz<=-30dB": 20 * np.log10(h[3]) <= -30,
        "80Hz<=-30dB": 20 * np.log10(h[4]) <= -30,
        "lag0": lag == 0,
        "50Hz>=60dB": rejection >= 60,
    }
    ok = all(checks.values())
    report_criterion(3, ok, f"|H(11.31)|={h[2]:.4f}, 1 Hz {20 * np.log10(h[3]):.1f} dB, "
                            f"80 Hz {20 * np.log10(h[4]):.1f} dB, lag {lag}, 50 Hz rejection {rejection:.2f} dB; "
                            f"failed {[k for k, v in checks.items() if not v]}")
    assert ok


def test_criterion_4_preprocessing_determinism(tmp_path, report_criterion):
    spec = SynthDatasetSpec("det", ["left_hand", "right_hand", "feet"], fs=250.0, trials_per_class=6, seed=3)
    raw = tmp_path / "raw.eegt"
    write_packed(raw, *generate_dataset(spec))
    outs = []
    for i in range(2):
        out = tmp_path / f"pre{i}.eegt"
        subprocess.run([sys.executable, "-m", "fedscsn.cli", "preprocess", "--in", str(raw), "--out", str(out)],
                       check=True, capture_output=True)
        outs.append(out.read_bytes())
    ok = outs[0] == outs[1] and len(outs[0]) > 20
    report_criterion(4, ok, f"two runs, {len(outs[0])} and {len(outs[1])} bytes, identical={outs[0] == outs[1]}")
    assert ok


def test_criterion_5_privacy_audit(report_criterion):
    specs = [SynthDatasetSpec(f"b{k}", cls, trials_per_class=6, seed=20 + k) for k, cls in enumerate(
        [["left_hand", "right_hand", "feet", "tongue"], ["left_hand", "right_hand"],
         ["left_hand", "right_hand", "feet", "tongue"], ["left_hand", "right_hand", "feet", "rest"]])]
    data = {k: preprocess_trials(*generate_dataset(s)) for k, s in enumerate(specs)}
    cfg = ExperimentConfig([BranchData(k) for k in range(4)], 3, max_epochs=1, val_per_subject=1, common_size=20,
                           mode="tcp")
    audit = AuditLog()
    train_mfscsn(cfg, data, audit=audit)
    clean = privacy_audit(audit)
    kinds_ok = clean.kinds <= {int(k) for k in MsgKind} and clean.kinds <= set(range(0x01, 0x08))
    raw = AuditLog(audit.entries)
    raw.record("up", Frame(MsgKind.FEATURES_UP, 0, 0, np.zeros((10, 10200), np.float32)))
    unknown = AuditLog(audit.entries)
    unknown.append(AuditEntry("up", 0x99, 0, 0, 0, 20, 0))
    raw_flagged = any("cols=10200" in v.reason for v in privacy_audit(raw).violations)
    unknown_flagged = any("unknown message kind" in v.reason for v in privacy_audit(unknown).violations)
    ok = clean.passed and kinds_ok and clean.data_cols == {50} and raw_flagged and unknown_flagged
    report_criterion(5, ok, f"{clean.frames} frames, kinds {sorted(f'0x{k:02X}' for k in clean.kinds)}, "
                            f"data cols {sorted(clean.data_cols)}, violations {len(clean.violations)}; "
                            f"raw injection flagged={raw_flagged}, unknown kind flagged={unknown_flagged}")
    assert ok


def test_criterion_6_weighted_accuracy(report_criterion):
    y = ["left"] * 250 + ["right"] * 250 + ["other"] * 500
    half = ["left"] * 125 + ["right"] * 125 + ["right"] * 125 + ["left"] * 125 + ["other"] * 250 + ["left"] * 250
    got = (weighted_accuracy(y, y), weighted_accuracy(half, y), weighted_accuracy(["other"] * 1000, y))
    ok = got == (1.0, 0.5, 1 / 3)
    report_criterion(6, ok, f"got {got}, expected (1.0, 0.5, 0.333...)")
    assert ok


def test_criterion_7_baseline_sanity(report_criterion):
    start = time.perf_counter()
    spec = SynthDatasetSpec("easy2", ["left_hand", "right_hand"], trials_per_class=100, erd_ratio=0.4, seed=42)
    data = preprocess_trials(*generate_dataset(spec))
    cfg = ExperimentConfig([BranchData(0)], 0, max_epochs=30, val_per_subject=8)
    result = train_baseline(cfg, {0: data})
    seconds = time.perf_counter() - start
    hit = next((m.epoch for m in result.metrics if m.val_weighted_acc >= 0.9), None)
    ok = hit is not None and seconds < 300
    report_criterion(7, ok, f"best validation {result.best_score:.3f} at epoch {result.best_epoch}, "
                            f"first epoch >= 0.90: {hit}, {seconds:.1f} s")
    assert ok


def test_criterion_8_transfer_benefit(report_criterion):
    start = time.perf_counter()
    runs = [transfer_benchmark(s, BENCH_EPOCHS, BENCH_COMMON, BENCH_VAL, BENCH_SPEC) for s in BENCH_SEEDS]
    seconds = time.perf_counter() - start
    base = float(np.mean([r.baseline for r in runs]))
    mf = float(np.mean([r.mfscsn for r in runs]))
    per_seed = ", ".join(f"{r.seed}: {r.baseline:.3f}/{r.mfscsn:.3f}" for r in runs)
    ok = mf - base >= 0.02 and seconds < 900
    report_criterion(8, ok, f"baseline {base:.4f}, MF-SCSN {mf:.4f}, gap {100 * (mf - base):+.2f} pp "
                            f"(seed: base/mf {per_seed}), {seconds:.0f} s")
    assert ok


def test_criterion_9_wire_format(report_criterion):
    from hypothesis import given, settings
    from test_frames import frames
    from fedscsn.fed.frames import decode_frame
    count = 0

    @settings(max_examples=1000, derandomize=True, database=None)
    @given(frames())
    def roundtrip(f):
        nonlocal count
        back = decode_frame(encode_frame(f))
        assert back == f and back.payload.tobytes() == f.payload.tobytes()
        count += 1

    roundtrip()
    size = len(encode_frame(Frame(MsgKind.FEATURES_UP, 1, 1, np.zeros((10, 50), np.float32))))
    ok = count >= 1000 and size == 2020
    report_criterion(9, ok, f"{count} lossless roundtrips, FEATURES_UP 10x50 frame = {size} bytes")
    assert ok
