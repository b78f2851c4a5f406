import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedscsn.fed.audit import AuditLog, privacy_audit
from fedscsn.harness import (DEFAULT_MERGE, DEFAULT_WEIGHTS, BranchData, ExperimentConfig, EpochSchedule, evaluate,
                             merge_labels, rounds_per_epoch, split_train_validation, train_baseline, train_mfscsn,
                             weighted_accuracy)
from fedscsn.models import predict_logits
from fedscsn.nn.rng import Rng
from fedscsn.synth.packed import DatasetManifest, TrialSet


def reference_labels():
    return ["left"] * 250 + ["right"] * 250 + ["other"] * 500


def test_weighted_all_correct():
    y = reference_labels()
    assert weighted_accuracy(y, y) == 1.0


def test_weighted_half_correct():
    y = reference_labels()
    p = ["left"] * 125 + ["right"] * 125 + ["right"] * 125 + ["left"] * 125 + ["other"] * 250 + ["left"] * 250
    assert weighted_accuracy(p, y) == 0.5


def test_weighted_constant_other():
    assert weighted_accuracy(["other"] * 1000, reference_labels()) == 1 / 3


def test_weighted_constant_left():
    assert weighted_accuracy(["left"] * 1000, reference_labels()) == 250 / 750


@given(st.lists(st.tuples(st.sampled_from(["left", "right", "other"]), st.sampled_from(["left", "right", "other"])),
                min_size=1, max_size=50))
def test_equal_weights_give_plain_accuracy(pairs):
    p, y = zip(*pairs)
    plain = sum(a == b for a, b in pairs) / len(pairs)
    assert weighted_accuracy(p, y, {"left": 1, "right": 1, "other": 1}) == pytest.approx(plain)
    assert 0.0 <= weighted_accuracy(p, y) <= 1.0


def test_weighted_errors():
    with pytest.raises(ValueError):
        weighted_accuracy(["left"], ["left", "right"])
    with pytest.raises(ValueError):
        weighted_accuracy(["feet"], ["left"])


FOUR = ["left_hand", "right_hand", "feet", "rest"]


def test_merge_four_class():
    assert merge_labels([0, 2, 3, 1], FOUR) == ["left", "other", "other", "right"]


def test_merge_uses_argmax_of_original_logits():
    logits = np.array([[0.1, 0.0, 0.3, 0.35], [2.0, 0.0, 0.0, 0.0]])
    # feet+rest together outweigh left in row 1 only after argmax over all four classes
    assert merge_labels(logits, FOUR) == ["other", "left"]


def test_merge_identity_three_class():
    names = ["left", "right", "other"]
    assert merge_labels([2, 0, 1], names) == ["other", "left", "right"]


def test_merge_missing_mapping():
    with pytest.raises(KeyError, match="tongue"):
        merge_labels([0], ["left_hand", "right_hand", "feet", "tongue"])


@given(st.lists(st.integers(0, 3), max_size=30))
def test_merge_keeps_left_right(ids):
    out = merge_labels(ids, FOUR)
    for i, m in zip(ids, out):
        if i < 2:
            assert m == ("left", "right")[i]


def trials_per_subject(n=100, subjects=3):
    total = n * subjects
    return TrialSet(np.zeros((total, 1, 1)), np.arange(total) % 4, np.repeat(np.arange(1, subjects + 1), n))


def test_split_80_20():
    train, val = split_train_validation(trials_per_subject(), 20, Rng(42, "split"))
    assert len(train) == 240 and len(val) == 60
    for s in (1, 2, 3):
        assert (val.subjects == s).sum() == 20 and (train.subjects == s).sum() == 80


def test_split_disjoint_and_deterministic():
    t = trials_per_subject()
    t.data[:, 0, 0] = np.arange(len(t))
    a_train, a_val = split_train_validation(t, 20, Rng(42, "split"))
    b_train, b_val = split_train_validation(t, 20, Rng(42, "split"))
    assert np.array_equal(a_val.data, b_val.data)
    assert not set(a_train.data.ravel()) & set(a_val.data.ravel())
    _, c_val = split_train_validation(t, 20, Rng(43, "split"))
    assert not np.array_equal(a_val.data, c_val.data)


def test_split_zero_val():
    train, val = split_train_validation(trials_per_subject(), 0, Rng(42, "split"))
    assert len(train) == 300 and len(val) == 0


def test_split_insufficient_names_subject():
    t = TrialSet(np.zeros((15, 1, 1)), np.zeros(15), [1] * 10 + [2] * 5)
    with pytest.raises(ValueError, match="subject 2"):
        split_train_validation(t, 6, Rng(1, "split"))


def test_rounds_per_epoch():
    cfg = ExperimentConfig([BranchData(k) for k in range(4)], 3)
    assert cfg.common_size == 2880 and rounds_per_epoch(cfg) == 288


def test_baseline_round_arithmetic():
    # 3 subjects x 100 trials with 20 held out per subject leave 240 trials, 24 batches of 10
    train, _ = split_train_validation(trials_per_subject(), 20, Rng(42, "split"))
    assert len(train) // 10 == 24


def test_config_defaults_and_json(tmp_path):
    cfg = ExperimentConfig([BranchData(0, "a.eegt", {"left_hand": "left"}), BranchData(1)], 1)
    assert (cfg.seed, cfg.batch_size, cfg.lr, cfg.weight_decay, cfg.max_epochs, cfg.val_per_subject) == \
        (42, 10, 1e-3, 5e-4, 100, 20)
    assert cfg.weights == DEFAULT_WEIGHTS
    p = tmp_path / "c.json"
    p.write_text(cfg.to_json())
    back = ExperimentConfig.load(p)
    assert back == cfg


@pytest.mark.parametrize("kw", [dict(batch_size=0), dict(target=7), dict(mode="udp")])
def test_config_validation(kw):
    args = dict(branches=[BranchData(0), BranchData(1)], target=1)
    args.update(kw)
    with pytest.raises(ValueError):
        ExperimentConfig(**args)


def test_epoch_schedule_reshuffles_per_epoch():
    t = TrialSet(np.arange(20, dtype=np.float32).reshape(20, 1, 1), np.zeros(20), np.ones(20))
    sched = EpochSchedule(t, 5, 4, Rng(1, "shuffle"))
    e0 = np.concatenate([sched(s)[0].ravel() for s in range(4)])
    e1 = np.concatenate([sched(s)[0].ravel() for s in range(4, 8)])
    assert sorted(e0) == sorted(e1) == list(range(20))
    assert not np.array_equal(e0, e1)
    assert np.array_equal(sched(2)[0], EpochSchedule(t, 5, 4, Rng(1, "shuffle"))(2)[0])


# ------------------------------------------------------------- training loops

def tiny_cfg(**kw):
    base = dict(branches=[BranchData(0), BranchData(1)], target=0, max_epochs=2, val_per_subject=2,
                common_size=20)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def tiny_data(request):
    four = request.getfixturevalue("small_four_class")
    two = request.getfixturevalue("small_two_class")
    return {0: four, 1: two}


def test_mfscsn_metrics_deterministic(tiny_data):
    a = train_mfscsn(tiny_cfg(), tiny_data)
    b = train_mfscsn(tiny_cfg(), tiny_data)
    assert a.csv == b.csv
    lines = a.csv.splitlines()
    assert lines[0] == "epoch,loss_branch0,loss_branch1,val_weighted_acc,seconds"
    assert [l.split(",")[0] for l in lines[1:]] == ["1", "2"]
    sa, sb = a.bundle.state_dict(), b.bundle.state_dict()
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)


def test_max_epochs_zero_returns_initialisation(tiny_data):
    from fedscsn.models import MfScsnConfig, BranchConfig, build_mfscsn
    r = train_mfscsn(tiny_cfg(max_epochs=0), tiny_data)
    assert r.metrics == [] and r.csv.count("\n") == 1 and r.best_epoch == 0
    init = build_mfscsn(MfScsnConfig((BranchConfig(0, 4), BranchConfig(1, 2))), Rng(42, "init"))
    s0, s1 = init.state_dict(), r.bundle.state_dict()
    assert all(s0[k].tobytes() == s1[k].tobytes() for k in s0)


def test_reevaluating_best_reproduces_score(tiny_data):
    from fedscsn.harness import _prepare_target, score_logits
    cfg = tiny_cfg(max_epochs=3)
    r = train_mfscsn(cfg, tiny_data)
    manifest, _, val = _prepare_target(cfg, tiny_data)
    score = score_logits(predict_logits(r.bundle, 0, val.data), val.labels, manifest.classes, None, cfg.weights)
    assert score == r.best_score
    assert r.best_score == max(m.val_weighted_acc for m in r.metrics)
    assert r.best_epoch == 1 + [m.val_weighted_acc for m in r.metrics].index(r.best_score)


def test_tcp_mode_matches_inprocess(tiny_data):
    audit = AuditLog()
    a = train_mfscsn(tiny_cfg(max_epochs=1), tiny_data)
    b = train_mfscsn(tiny_cfg(max_epochs=1, mode="tcp"), tiny_data, audit)
    assert a.csv == b.csv
    report = privacy_audit(audit)
    assert report.passed and report.data_cols == {50}


def test_branch_mismatch_rejected(tiny_data):
    with pytest.raises(ValueError, match="branches"):
        train_mfscsn(tiny_cfg(branches=[BranchData(0), BranchData(2)]), tiny_data)


def test_baseline_deterministic_and_selects_best(small_four_class):
    cfg = tiny_cfg(branches=[BranchData(0)], max_epochs=2)
    a = train_baseline(cfg, {0: small_four_class})
    b = train_baseline(cfg, {0: small_four_class})
    assert a.csv == b.csv
    assert a.bundle.kind == "baseline" and a.best_epoch in (1, 2)
    sa, sb = a.bundle.state_dict(), b.bundle.state_dict()
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)


# ------------------------------------------------------------------ evaluation

class Fixed:
    """Stand-in bundle exposing the attributes evaluate() reads."""


def fake_eval(monkeypatch, preds_per_trial, labels, names=FOUR, subjects=None):
    from fedscsn import harness
    n = len(labels)
    trials = TrialSet(np.zeros((n, 1, 1)), labels, subjects if subjects is not None else np.ones(n))
    manifest = DatasetManifest("t", ["c"], 200.0, list(names), n, 1)
    k = len(names)
    logits = np.eye(k, dtype=np.float32)[np.asarray(preds_per_trial)]
    monkeypatch.setattr(harness, "predict_logits", lambda b, bid, data: logits)
    from fedscsn.models import ModelBundle, Partition
    bundle = ModelBundle("baseline", {0: Partition([], [])}, Partition([], []), {0: Partition([], [])}, {0: k})
    return evaluate(bundle, (manifest, trials), 0)


def test_evaluate_perfect(monkeypatch):
    labels = np.arange(8) % 4
    rep = fake_eval(monkeypatch, labels, labels)
    assert rep["weighted_accuracy"] == 1.0 and rep["raw_correct"] == 8
    conf = np.array(rep["confusion"])
    assert np.array_equal(conf, np.diag(np.diag(conf)))
    assert rep["classes"] == ["left", "right", "other"]


def test_evaluate_constant_left_on_reference_composition(monkeypatch):
    labels = np.array([0] * 250 + [1] * 250 + [2] * 250 + [3] * 250)
    rep = fake_eval(monkeypatch, np.zeros(1000, int), labels, subjects=np.repeat(np.arange(1, 6), 200))
    assert rep["weighted_accuracy"] == 1 / 3
    assert rep["raw_correct"] == 250 and rep["raw_accuracy"] == 0.25
    assert rep["per_class"]["other"] == {"correct": 0, "total": 500}
    assert len(rep["per_subject_weighted_accuracy"]) == 5


def test_evaluate_raw_alongside_weighted(monkeypatch):
    labels = np.array([0] * 250 + [1] * 250 + [2] * 250 + [3] * 250)
    preds = labels.copy()
    preds[:195] = 1        # 195 left trials misread as right
    preds[500:750] = 0     # all feet read as left
    rep = fake_eval(monkeypatch, preds, labels)
    assert rep["raw_correct"] == 555 and rep["raw_accuracy"] == 0.555
    assert rep["weighted_accuracy"] == pytest.approx((55 + 250 + 0.5 * 250) / 750)
    json.dumps(rep)


def test_evaluate_real_bundle_matches_training_validation(small_four_class):
    cfg = tiny_cfg(branches=[BranchData(0)], max_epochs=1)
    r = train_baseline(cfg, {0: small_four_class})
    rep = evaluate(r.bundle, small_four_class, 0)
    assert rep["trials"] == 40 and 0 <= rep["weighted_accuracy"] <= 1
    with pytest.raises(KeyError):
        evaluate(r.bundle, small_four_class, 5)
