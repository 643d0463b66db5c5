"""Batch command-line surface.

Subcommands cover the full pipeline: train the backbone, train the feedback
decoders, run the recurrence on images, benchmark corruption robustness and
transfer attacks, tune coefficients, and inspect a config.  Every run
writes a ``manifest.json`` carrying the engine version, canonical
arguments, seeds, config hash, and the SHA-256 of every output file, which
is enough to reproduce the run bit-for-bit.

Exit codes: 0 success, 1 usage/validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

from . import __version__, bench
from .builder import (
    ConfigError,
    WeightsMismatchError,
    build_network,
    network_summary,
    network_weights,
    parse_config,
    serialize_config,
)
from .data import (
    Dataset,
    IdxFormatError,
    WeightsFormatError,
    load_idx_dataset,
    load_weights_file,
    read_idx,
    save_weights,
    synth_dataset,
    write_file_atomic,
)
from .dynamics import run_dynamics
from .noise import KINDS, NoiseSpec
from .train import (
    FrozenBackboneError,
    TrainOpts,
    TrainingDivergedError,
    train_backbone,
    train_feedback,
)

VALIDATION_ERRORS = (
    ConfigError,
    WeightsMismatchError,
    IdxFormatError,
    WeightsFormatError,
    FrozenBackboneError,
    ValueError,
    FileNotFoundError,
    IsADirectoryError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(1)


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


class RunWriter:
    """Collects output files and emits the reproducibility manifest."""

    def __init__(self, out_dir: str, command: str, args: dict):
        self.out_dir = out_dir
        self.command = command
        self.args = args
        self.outputs: dict = {}
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def write_bytes(self, name: str, data: bytes) -> None:
        write_file_atomic(self.path(name), data)
        self.outputs[name] = hashlib.sha256(data).hexdigest()

    def write_csv(self, name: str, header, rows) -> None:
        lines = [",".join(header)]
        lines += [",".join(_fmt(v) for v in row) for row in rows]
        self.write_bytes(name, ("\n".join(lines) + "\n").encode())

    def write_json(self, name: str, obj) -> None:
        self.write_bytes(name, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())

    def finish(self) -> None:
        manifest = {
            "engine_version": __version__,
            "command": self.command,
            "args": {k: v for k, v in sorted(self.args.items())},
            "outputs": self.outputs,
        }
        data = (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode()
        write_file_atomic(self.path("manifest.json"), data)


def _canonical_args(args: argparse.Namespace) -> dict:
    skip = {"func"}
    out = {}
    for k, v in vars(args).items():
        if k in skip:
            continue
        out[k] = v if not isinstance(v, float) else repr(v)
    return out


def _read_config(path: str):
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    spec = parse_config(text)
    return spec, hashlib.sha256(text.encode()).hexdigest()


def _load_dataset(args) -> Dataset:
    if args.images:
        if not args.labels:
            raise ValueError("--images requires --labels")
        with open(args.images, "rb") as f:
            image_bytes = f.read()
        with open(args.labels, "rb") as f:
            label_bytes = f.read()
        return load_idx_dataset(image_bytes, label_bytes)
    return synth_dataset(seed=args.synth_seed, n=args.synth_n)


def _add_dataset_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--images", help="IDX image file")
    p.add_argument("--labels", help="IDX label file")
    p.add_argument("--synth-seed", type=int, default=0, help="synthetic dataset seed")
    p.add_argument("--synth-n", type=int, default=2000, help="synthetic dataset size")


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="network TOML config")
    p.add_argument("--out-dir", default=".", help="directory for outputs")
    p.add_argument("--workers", type=int, default=None, help="data-parallel worker bound")
    p.add_argument("--batch-size", type=int, default=256, help="evaluation batch size")


def _train_opts(args, seed_shift: int = 0) -> TrainOpts:
    return TrainOpts(
        epochs=args.epochs,
        batch_size=args.train_batch_size,
        learning_rate=args.learning_rate,
        momentum=args.momentum,
        seed=args.seed + seed_shift,
        shuffle=not args.no_shuffle,
    )


def _add_train_flags(p: argparse.ArgumentParser, lr: float, epochs: int) -> None:
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--train-batch-size", type=int, default=64)
    p.add_argument("--learning-rate", type=float, default=lr)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-shuffle", action="store_true")


def _write_train_log(writer: RunWriter, name: str, log) -> None:
    writer.write_csv(
        name,
        ["epoch", "split", "loss", "accuracy"],
        [(r.epoch, r.split, r.loss, r.accuracy) for r in log],
    )


def cmd_train_backbone(args) -> int:
    spec, config_hash = _read_config(args.config)
    dataset = _load_dataset(args)
    writer = RunWriter(args.out_dir, "train-backbone", {**_canonical_args(args), "config_sha256": config_hash})
    weights, log = train_backbone(spec, dataset, _train_opts(args))
    writer.write_bytes(args.out, save_weights(weights))
    _write_train_log(writer, "train_backbone_log.csv", log)
    writer.finish()
    print(f"trained backbone: final loss {log[-1].loss:.4f}, accuracy {log[-1].accuracy:.3f}")
    return 0


def cmd_train_feedback(args) -> int:
    spec, config_hash = _read_config(args.config)
    dataset = _load_dataset(args)
    weights = load_weights_file(args.weights)
    network = build_network(spec, weights)
    writer = RunWriter(args.out_dir, "train-feedback", {**_canonical_args(args), "config_sha256": config_hash})
    _, log = train_feedback(network, dataset, _train_opts(args, seed_shift=1))
    writer.write_bytes(args.out, save_weights(network_weights(network)))
    _write_train_log(writer, "train_feedback_log.csv", log)
    writer.finish()
    print(f"trained feedback decoders: final reconstruction loss {log[-1].loss:.4f}")
    return 0


def cmd_run(args) -> int:
    spec, config_hash = _read_config(args.config)
    network = build_network(spec, load_weights_file(args.weights))
    with open(args.image, "rb") as f:
        images = read_idx(f.read())
    writer = RunWriter(args.out_dir, "run", {**_canonical_args(args), "config_sha256": config_hash})
    outs = run_dynamics(network, images, args.timesteps)
    logit_rows = [
        (i, o.t, c, float(o.logits[i, c]))
        for o in outs
        for i in range(len(images))
        for c in range(network.class_count)
    ]
    writer.write_csv("logits.csv", ["image", "timestep", "class", "logit"], logit_rows)
    eps_rows = [
        (i, o.t, n + 1, float(o.eps[n, i]))
        for o in outs
        for i in range(len(images))
        for n in range(network.depth)
    ]
    writer.write_csv("reconstruction_errors.csv", ["image", "timestep", "layer", "eps"], eps_rows)
    writer.finish()
    preds = outs[-1].logits.argmax(axis=1)
    print(f"ran {len(images)} images for {args.timesteps} timesteps; "
          f"final predictions: {preds.tolist()}")
    return 0


def _metric_rows(records, run_id: str):
    return [
        (run_id, r.metric, r.noise_kind, _fmt(r.severity), _fmt(r.layer), r.timestep, r.value)
        for r in records
    ]


METRICS_HEADER = ["run_id", "metric", "noise_kind", "severity", "layer", "timestep", "value"]


def cmd_benchmark_noise(args) -> int:
    spec, config_hash = _read_config(args.config)
    network = build_network(spec, load_weights_file(args.weights))
    dataset = _load_dataset(args)
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    for kind in kinds:
        if kind not in KINDS:
            raise ValueError(f"unknown noise kind '{kind}', expected one of {KINDS}")
    severities = {}
    for kind in kinds:
        ladder = bench.SEVERITY_LADDERS[kind]
        if args.severities > len(ladder):
            raise ValueError(f"at most {len(ladder)} severities available for {kind}")
        severities[kind] = ladder[: args.severities]
    writer = RunWriter(args.out_dir, "benchmark-noise", {**_canonical_args(args), "config_sha256": config_hash})
    records, ce, mce = bench.noise_benchmark(
        network, dataset, kinds, severities, args.timesteps,
        seed=args.noise_seed, batch_size=args.batch_size, workers=args.workers,
    )
    writer.write_csv("metrics.csv", METRICS_HEADER, _metric_rows(records, "benchmark-noise"))
    summary_rows = []
    for kind in kinds:
        base = sum(
            r.value for r in records
            if r.metric == "error_rate" and r.noise_kind == kind and r.timestep == 0
        )
        for t in range(args.timesteps + 1):
            summary_rows.append((kind, t, float(ce[kind][t]), base))
    for t in range(args.timesteps + 1):
        summary_rows.append(("mean", t, float(mce[t]), ""))
    writer.write_csv("ce_summary.csv", ["noise_kind", "timestep", "ce", "baseline_error_sum"], summary_rows)
    writer.write_json("summary.json", {
        "kinds": kinds,
        "severities": {k: list(severities[k]) for k in kinds},
        "ce": {k: ce[k].tolist() for k in kinds},
        "mce": mce.tolist(),
    })
    writer.finish()
    print(f"mCE over {len(kinds)} kinds at t={args.timesteps}: {mce[-1]:.4f} (t=0 baseline 1.0)")
    return 0


def cmd_benchmark_attack(args) -> int:
    spec, config_hash = _read_config(args.config)
    network = build_network(spec, load_weights_file(args.weights))
    dataset = _load_dataset(args)
    epsilons = [float(e) for e in args.epsilons.split(",") if e.strip()]
    writer = RunWriter(args.out_dir, "benchmark-attack", {**_canonical_args(args), "config_sha256": config_hash})
    records = []
    summary = {}
    for eps in epsilons:
        rate, n = bench.transfer_attack_eval(
            network, dataset, eps, steps=args.steps, timesteps=args.timesteps,
            target_class=args.target_class, limit=args.limit,
            batch_size=args.batch_size, workers=args.workers,
        )
        for t, v in enumerate(rate):
            records.append(bench.MetricsRecord(
                metric="attack_success", value=float(v), timestep=t, severity=eps,
            ))
        summary[repr(eps)] = {"success": rate.tolist(), "qualifying": int(n)}
    writer.write_csv("metrics.csv", METRICS_HEADER, _metric_rows(records, "benchmark-attack"))
    writer.write_json("summary.json", summary)
    writer.finish()
    for eps in epsilons:
        s = summary[repr(eps)]["success"]
        print(f"eps={eps}: success t0 {s[0]:.3f} -> t{args.timesteps} {s[-1]:.3f}")
    return 0


def cmd_tune(args) -> int:
    spec, config_hash = _read_config(args.config)
    network = build_network(spec, load_weights_file(args.weights))
    dataset = _load_dataset(args)
    search_space = dict(bench.DEFAULT_GRID)
    for key in ("feedforward", "feedback", "pc"):
        override = getattr(args, f"grid_{key}")
        if override:
            search_space[key] = [float(v) for v in override.split(",")]
    noise = NoiseSpec(args.noise_kind, args.noise_severity, args.noise_seed)
    writer = RunWriter(args.out_dir, "tune", {**_canonical_args(args), "config_sha256": config_hash})
    assignment, log = bench.tune_hyperparams(
        network, dataset, noise, search_space, mode=args.mode,
        batch_size=args.batch_size, workers=args.workers,
    )
    writer.write_csv(
        "tune_log.csv",
        ["scope", "feedforward", "feedback", "pc", "objective"],
        [(scope, hp.beta, hp.lam, hp.alpha, obj) for scope, hp, obj in log],
    )
    import dataclasses

    tuned_spec = dataclasses.replace(
        spec, hp=tuple(assignment), shared_hyperparameters=False,
    )
    writer.write_bytes("tuned_config.toml", serialize_config(tuned_spec).encode())
    writer.finish()
    for n, hp in enumerate(assignment, start=1):
        print(f"pcoder{n}: feedforward={hp.beta} feedback={hp.lam} pc={hp.alpha}")
    return 0


def cmd_inspect(args) -> int:
    spec, _ = _read_config(args.config)
    rows = network_summary(spec)
    print(f"{spec.name}: input {tuple(spec.backbone.input_size)}, "
          f"{len(rows)} pcoders, {spec.backbone.class_count} classes")
    header = f"{'pcoder':>6} {'e_n shape':>14} {'d_n-1 shape':>14} {'K':>6} {'C':>5} {'scale':>8}  hyperparams"
    print(header)
    for r in rows:
        hp = r["hp"]
        print(f"{r['pcoder']:>6} {str(r['e_shape']):>14} {str(r['d_shape']):>14} "
              f"{r['K']:>6} {r['C']:>5} {r['scale']:>8.3f}  "
              f"(ff={hp.beta}, fb={hp.lam}, pc={hp.alpha})")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="pcnet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"pcnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train-backbone", help="train the feedforward classifier")
    _add_common_flags(p)
    _add_dataset_flags(p)
    _add_train_flags(p, lr=0.05, epochs=10)
    p.add_argument("--out", default="backbone.pcnw", help="weights output file name")
    p.set_defaults(func=cmd_train_backbone)

    p = sub.add_parser("train-feedback", help="train feedback decoders (backbone frozen)")
    _add_common_flags(p)
    _add_dataset_flags(p)
    _add_train_flags(p, lr=1e-4, epochs=5)
    p.add_argument("--weights", required=True, help="backbone weights (PCNW)")
    p.add_argument("--out", default="predified.pcnw", help="weights output file name")
    p.set_defaults(func=cmd_train_feedback)

    p = sub.add_parser("run", help="run the recurrence on IDX images")
    _add_common_flags(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True, help="IDX image file")
    p.add_argument("--timesteps", type=int, default=8)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("benchmark-noise", help="corruption-error curves across timesteps")
    _add_common_flags(p)
    _add_dataset_flags(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--kinds", default="gaussian,shot,impulse,speckle")
    p.add_argument("--severities", type=int, default=3, help="ladder length per kind")
    p.add_argument("--timesteps", type=int, default=8)
    p.add_argument("--noise-seed", type=int, default=0)
    p.set_defaults(func=cmd_benchmark_noise)

    p = sub.add_parser("benchmark-attack", help="transfer-attack success across timesteps")
    _add_common_flags(p)
    _add_dataset_flags(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--epsilons", default="0.08,0.12,0.16")
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--timesteps", type=int, default=8)
    p.add_argument("--target-class", type=int, default=None)
    p.add_argument("--limit", type=int, default=None, help="cap the qualifying subset")
    p.set_defaults(func=cmd_benchmark_attack)

    p = sub.add_parser("tune", help="grid-search balancing coefficients")
    _add_common_flags(p)
    _add_dataset_flags(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--mode", choices=["whole-network", "per-pcoder"], default="whole-network")
    p.add_argument("--noise-kind", default="gaussian")
    p.add_argument("--noise-severity", type=float, default=0.5)
    p.add_argument("--noise-seed", type=int, default=0)
    p.add_argument("--grid-feedforward", default=None, help="comma-separated values")
    p.add_argument("--grid-feedback", default=None)
    p.add_argument("--grid-pc", default=None)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("inspect", help="print the shape table for a config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (TrainingDivergedError, bench.EmptySubsetError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # pragma: no cover - defensive
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
