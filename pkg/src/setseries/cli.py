"""Command-line interface: data synthesis, training, evaluation, online prediction.

Exit codes: 0 success, 1 validation/config errors (including usage), 2 I/O
errors.  All randomness flows from --seed, so identical invocations produce
byte-identical output files.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from .attention import export_attention
from .data import (
    Dataset,
    Observation,
    generate_synthetic,
    identity_normalization,
    inject_static_observations,
    fit_normalization,
    normalize,
    normalize_observation,
    parse_dataset,
    save_dataset,
    save_meta,
    split_stratified,
    SyntheticSpec,
)
from .errors import SetSeriesError
from .model import forward_with_trace
from .online import online_init, online_ingest, online_predict
from .training import (
    TrainConfig,
    evaluate,
    hypersearch,
    load_checkpoint,
    load_config,
    save_checkpoint,
    save_log,
    train,
)


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="setseries", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    parser.add_argument("--config", default=None, help="JSON config file mirroring TrainConfig")
    parser.add_argument("--quiet", action="store_true", help="suppress progress output")
    parser.add_argument("--format", choices=("json", "human"), default="human")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic dataset file")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--prevalence", type=float, default=0.14)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--mean-obs", type=float, default=40.0)
    p.add_argument("--amplitude", type=float, default=3.0)
    p.add_argument("--horizon", type=float, default=48.0)
    p.add_argument("--statics", action="store_true", help="include a static covariate")
    p.add_argument("--meta-out", default=None, help="write the inferred meta sidecar")

    p = sub.add_parser("train", help="train a model on a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--val-data", default=None, help="held-out file; defaults to a stratified split")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", default=None, help="training log path (JSON lines)")
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--no-normalize", action="store_true", help="skip per-channel z-scoring")
    p.add_argument("--repeat", type=int, default=1, help="independent runs with derived seeds")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset file")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)

    p = sub.add_parser("predict-online", help="stream events on stdin, predictions on stdout")
    p.add_argument("--model", required=True)
    p.add_argument("--trace", action="store_true", help="include per-prefix attention weights")

    p = sub.add_parser("attention-export", help="write per-observation attention weights as CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=None, help="export at most this many instances")

    p = sub.add_parser("hypersearch", help="random hyperparameter search")
    p.add_argument("--data", required=True)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--max-epochs", type=int, default=None)

    return parser


def _say(args, message):
    if not args.quiet:
        print(message, file=sys.stderr)


def _load_base_config(args) -> TrainConfig:
    config = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    return config


def _prepare_training_data(args, config):
    dataset = inject_static_observations(parse_dataset(args.data))
    if args.val_data:
        val = inject_static_observations(parse_dataset(args.val_data, meta=dataset.meta))
        train_split = dataset
    else:
        frac = args.val_fraction
        train_split, val = split_stratified(dataset, (1.0 - frac, frac), seed=config.seed)
    if getattr(args, "no_normalize", False):
        meta = identity_normalization(train_split.meta)
    else:
        meta = fit_normalization(train_split)
    return normalize(train_split, meta), normalize(val, meta)


def _cmd_synth_data(args) -> int:
    spec = SyntheticSpec(
        n_instances=args.n,
        channels=args.channels,
        prevalence=args.prevalence,
        mean_observations=args.mean_obs,
        amplitude=args.amplitude,
        time_horizon=args.horizon,
        include_statics=args.statics,
    )
    dataset = generate_synthetic(spec, seed=args.seed if args.seed is not None else 0)
    save_dataset(dataset, args.out)
    if args.meta_out:
        save_meta(dataset.meta, args.meta_out)
    positives = sum(1 for ts in dataset.instances if ts.label == 1)
    _say(args, f"wrote {len(dataset)} instances ({positives} positive) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    config = _load_base_config(args)
    if args.max_epochs is not None:
        config = dataclasses.replace(config, max_epochs=args.max_epochs)
    train_split, val_split = _prepare_training_data(args, config)
    if args.repeat < 1:
        raise SetSeriesError("--repeat must be >= 1")
    seeds = [config.seed] if args.repeat == 1 else [
        int(s.generate_state(1)[0]) for s in np.random.SeedSequence(config.seed).spawn(args.repeat)
    ]
    values = []
    for run, seed in enumerate(seeds):
        run_config = dataclasses.replace(config, seed=seed)
        ckpt, log = train(train_split, val_split, run_config)
        suffix = "" if args.repeat == 1 else f".run{run}"
        out = args.out + suffix
        save_checkpoint(ckpt, out)
        log_path = (args.log or args.out + ".log.jsonl") + suffix
        save_log(log, log_path)
        values.append(ckpt.best_value)
        _say(
            args,
            f"run {run}: best {ckpt.config.monitor}={ckpt.best_value:.4f} "
            f"at epoch {ckpt.epoch}; checkpoint -> {out}",
        )
    if args.repeat > 1:
        _say(args, f"{config.monitor}: mean={np.mean(values):.4f} std={np.std(values):.4f}")
    return 0


def _cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.model)
    dataset = inject_static_observations(parse_dataset(args.data, meta=ckpt.meta))
    dataset = normalize(dataset, ckpt.meta)
    report = evaluate(dataset, ckpt)
    if args.format == "json":
        print(json.dumps(report.to_dict(), sort_keys=True, separators=(",", ":")))
    else:
        print(json.dumps(report.to_dict(), sort_keys=True, indent=2))
    return 0


def _cmd_predict_online(args) -> int:
    ckpt = load_checkpoint(args.model)
    model = ckpt.model()
    state = online_init(ckpt.params, model)
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        event = json.loads(line)
        obs = Observation(float(event["t"]), float(event["value"]), int(event["modality"]))
        state = online_ingest(state, normalize_observation(obs, ckpt.meta))
        prediction = online_predict(state, include_trace=args.trace)
        record = {
            "t": prediction.time,
            "logits": prediction.logits.tolist(),
            "score": prediction.score,
        }
        if args.trace:
            record["weights"] = prediction.trace.weights.tolist()
        print(json.dumps(record, separators=(",", ":")), flush=True)
    return 0


def _cmd_attention_export(args) -> int:
    ckpt = load_checkpoint(args.model)
    model = ckpt.model()
    dataset = inject_static_observations(parse_dataset(args.data, meta=ckpt.meta))
    dataset = normalize(dataset, ckpt.meta)
    instances = dataset.instances[: args.limit] if args.limit else dataset.instances
    entries = []
    for ts in instances:
        _, trace = forward_with_trace(ts, ckpt.params, model)
        entries.append((ts, trace))
    export_attention(args.out, entries)
    _say(args, f"wrote attention weights for {len(entries)} instances to {args.out}")
    return 0


def _cmd_hypersearch(args) -> int:
    base = _load_base_config(args)
    if args.max_epochs is not None:
        base = dataclasses.replace(base, max_epochs=args.max_epochs)
    args.val_data = None
    train_split, val_split = _prepare_training_data(args, base)
    results = hypersearch(
        train_split, val_split, base, n=args.n,
        seed=base.seed,
    )
    for rank, result in enumerate(results):
        row = {
            "rank": rank,
            "value": result["value"],
            "epoch": result["epoch"],
            "config": result["config"].to_dict(),
        }
        if args.format == "json":
            print(json.dumps(row, sort_keys=True, separators=(",", ":")))
        else:
            cfg = result["config"]
            print(
                f"#{rank:2d} value={result['value']:.4f} lr={cfg.learning_rate:.5f} "
                f"bs={cfg.batch_size} enc={cfg.encoder_layers}x{cfg.encoder_width} "
                f"latent={cfg.latent_width} attn_drop={cfg.attention_dropout}"
            )
    return 0


_COMMANDS = {
    "synth-data": _cmd_synth_data,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "predict-online": _cmd_predict_online,
    "attention-export": _cmd_attention_export,
    "hypersearch": _cmd_hypersearch,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except SetSeriesError as exc:
        print(f"setseries: error: {exc}", file=sys.stderr)
        return 1
    except json.JSONDecodeError as exc:
        print(f"setseries: error: invalid JSON input: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"setseries: I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
