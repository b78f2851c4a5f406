"""``fedscsn`` command line."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


def _cmd_synth_gen(args) -> int:
    from .synth.generate import benchmark_specs, generate_dataset, load_specs
    from .synth.packed import write_packed

    if args.spec is None:
        specs = benchmark_specs(args.benchmark)
    else:
        specs = {}
        for spec in load_specs(args.spec):
            specs[spec.name if spec.name not in specs else f"{spec.name}_{len(specs)}"] = spec
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for stem, spec in specs.items():
        manifest, trials = generate_dataset(spec)
        write_packed(out / f"{stem}.eegt", manifest, trials)
        print(f"{out / (stem + '.eegt')}: {len(trials)} trials, {len(spec.channels)} ch @ {spec.fs:g} Hz, "
              f"classes {spec.class_set}")
    return 0


def _cmd_preprocess(args) -> int:
    from .preprocess.pipeline import PipelineConfig, preprocess_trials
    from .synth.packed import read_packed, write_packed

    cfg = PipelineConfig.from_dict(json.loads(Path(args.config).read_text())) if args.config else PipelineConfig()
    manifest, trials = read_packed(args.input)
    manifest, trials = preprocess_trials(manifest, trials, cfg)
    write_packed(args.out, manifest, trials)
    print(f"{args.out}: {len(trials)} trials, shape {trials.data.shape[1:]} @ {cfg.fs_out:g} Hz")
    return 0


def _print_result(result, paths) -> None:
    sys.stdout.write(result.csv)
    print(f"best epoch {result.best_epoch}, validation weighted accuracy {result.best_score:.4f}")
    print("wrote " + ", ".join(str(p) for p in paths))


def _cmd_train_baseline(args) -> int:
    from .harness import ExperimentConfig, save_result, train_baseline

    result = train_baseline(ExperimentConfig.load(args.config))
    _print_result(result, save_result(result, args.out))
    return 0


def _cmd_train_mfscsn(args) -> int:
    from .fed.audit import AuditLog
    from .harness import ExperimentConfig, save_result, train_mfscsn

    cfg = ExperimentConfig.load(args.config)
    if args.mode:
        cfg.mode = args.mode
    audit = AuditLog()
    result = train_mfscsn(cfg, audit=audit)
    paths = list(save_result(result, args.out))
    audit_path = Path(args.out) / "audit.csv"
    audit.save(audit_path)
    _print_result(result, paths + [audit_path])
    return 0


def _cmd_cloud(args) -> int:
    from .fed.audit import AuditLog
    from .fed.tcp import accept_branches, listen
    from .harness import ExperimentConfig, run_cloud

    cfg = ExperimentConfig.load(args.config)
    audit = AuditLog()
    srv = listen(args.listen)
    print(f"cloud listening on {args.listen}, waiting for {args.branches} branches", flush=True)
    links = accept_branches(srv, args.branches, audit, timeout=args.accept_timeout)
    srv.close()
    run_cloud(cfg, links, args.out)
    for link in links.values():
        link.close()
    if args.audit:
        audit.save(args.audit)
        print(f"audit log: {len(audit)} frames -> {args.audit}")
    return 0


def _cmd_node(args) -> int:
    from .fed.tcp import SocketChannel, connect
    from .harness import ExperimentConfig, load_dataset, run_node
    from .preprocess.pipeline import PipelineConfig

    cfg = ExperimentConfig.load(args.config)
    data_path = args.data or cfg.branch(args.branch_id).path
    dataset = load_dataset(data_path, PipelineConfig.from_dict(cfg.pipeline), args.branch_id)
    channel = SocketChannel(connect(args.connect), None, in_dir="down", out_dir="up")
    try:
        result = run_node(cfg, args.branch_id, dataset, channel, args.out)
    finally:
        channel.close()
    sys.stdout.write(result.csv)
    return 0


def _cmd_evaluate(args) -> int:
    from .harness import DEFAULT_WEIGHTS, ExperimentConfig, evaluate, extractor_for, load_dataset
    from .models import bundle_from_tensors
    from .nn.checkpoint import load_checkpoint
    from .preprocess.pipeline import PipelineConfig

    weights, class_map, pipe = dict(DEFAULT_WEIGHTS), None, PipelineConfig()
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        weights, pipe = cfg.weights, PipelineConfig.from_dict(cfg.pipeline)
        class_map = cfg.branch(args.branch_id).class_map if any(
            b.dataset_id == args.branch_id for b in cfg.branches) else None
    dataset = load_dataset(args.data, pipe, args.branch_id)
    tensors = {}
    for path in args.checkpoint:
        tensors.update(load_checkpoint(path))
    bundle = bundle_from_tensors(tensors, extractor_for(dataset[1]))
    report = evaluate(bundle, dataset, args.branch_id, weights, class_map)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def _cmd_gradcheck(args) -> int:
    from .models import ExtractorSpec, gradcheck_targets
    from .nn.gradcheck import grad_check
    from .nn.rng import Rng

    rng = Rng(args.seed, "gradcheck")
    zoo = gradcheck_targets(ExtractorSpec(in_samples=args.samples))
    if args.target != "all" and args.target not in zoo:
        print(f"unknown target {args.target!r}; choose from all, {', '.join(zoo)}")
        return 2
    names = list(zoo) if args.target == "all" else [args.target]
    ok = True
    for name in names:
        layers, shape = zoo[name]
        report = grad_check(layers, rng.substream(name), tol=args.tol, input_shape=shape)
        ok &= report.passed
        print(f"{name:<14} {'PASS' if report.passed else 'FAIL'}  max rel error {report.max_error:.3e}")
        if not report.passed:
            print(report.format())
    return 0 if ok else 1


def _cmd_audit(args) -> int:
    from .fed.audit import AuditLog, AuditPolicy, privacy_audit

    policy = AuditPolicy(raw_width=args.raw_width)
    report = privacy_audit(AuditLog.load(args.log), policy)
    print(report.format())
    print("PASS" if report.passed else "FAIL")
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedscsn", description="Split-learning EEG transfer experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log protocol events")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-gen", help="generate synthetic packed datasets")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--spec", help="JSON file with one dataset spec or a list of them")
    g.add_argument("--benchmark", type=int, metavar="SEED", help="the standard transfer benchmark at this seed")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=_cmd_synth_gen)

    s = sub.add_parser("preprocess", help="select channels, resample, band-pass, normalise")
    s.add_argument("--in", dest="input", required=True, help="raw packed file")
    s.add_argument("--out", required=True, help="output packed file")
    s.add_argument("--config", help="JSON pipeline config")
    s.set_defaults(func=_cmd_preprocess)

    for name, func, doc in (("train-baseline", _cmd_train_baseline, "target-only model"),
                            ("train-mfscsn", _cmd_train_mfscsn, "federated model, all branches")):
        s = sub.add_parser(name, help=f"train the {doc}")
        s.add_argument("--config", required=True, help="JSON experiment config")
        s.add_argument("--out", required=True, help="output directory")
        if name == "train-mfscsn":
            s.add_argument("--mode", choices=("inprocess", "tcp"), help="override the config's mode")
        s.set_defaults(func=func)

    s = sub.add_parser("cloud", help="serve the trunk to N connecting nodes")
    s.add_argument("--listen", required=True, help="host:port")
    s.add_argument("--branches", type=int, required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="directory for per-epoch trunk checkpoints")
    s.add_argument("--audit", help="write the boundary audit log CSV here")
    s.add_argument("--accept-timeout", type=float, default=300.0)
    s.set_defaults(func=_cmd_cloud)

    s = sub.add_parser("node", help="run one data centre against a cloud")
    s.add_argument("--connect", required=True, help="host:port of the cloud")
    s.add_argument("--branch-id", type=int, required=True)
    s.add_argument("--data", help="packed dataset (defaults to the config's path for this branch)")
    s.add_argument("--config", required=True)
    s.add_argument("--out", help="directory for this node's checkpoint and metrics")
    s.set_defaults(func=_cmd_node)

    s = sub.add_parser("evaluate", help="score the target path on a test set")
    s.add_argument("--checkpoint", action="append", required=True,
                   help="checkpoint file; repeat to merge partitions saved separately")
    s.add_argument("--data", required=True)
    s.add_argument("--branch-id", type=int, required=True)
    s.add_argument("--config", help="experiment config for weights, class map and pipeline")
    s.add_argument("--out", help="write the JSON report here")
    s.set_defaults(func=_cmd_evaluate)

    s = sub.add_parser("gradcheck", help="finite-difference check of layers and models")
    s.add_argument("--target", default="all", help="a layer name, baseline, mfscsn or all")
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--samples", type=int, default=600, help="input length for the model checks")
    s.set_defaults(func=_cmd_gradcheck)

    s = sub.add_parser("audit", help="privacy audit of a boundary log CSV")
    s.add_argument("--log", required=True)
    s.add_argument("--raw-width", type=int, default=17 * 600)
    s.set_defaults(func=_cmd_audit)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
