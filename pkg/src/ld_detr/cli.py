"""Command line interface.

Subcommands: synth-data, train, eval, predict, ablate. Every subcommand
accepts repeated `--set key=value` overrides on top of `--config`. The
LD_DETR_SEED environment variable, when set, overrides the configured seed.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, build_config, parse_overrides, save_config_file
from .data_model import ManifestError, load_manifest, save_manifest, save_predictions, synth_generate
from .metrics import save_report
from .training import (
    NumericalError,
    Trainer,
    ablate,
    evaluate_model,
    load_checkpoint,
    model_from_checkpoint,
    parse_axis_values,
    predict_dataset,
    save_per_loop_plot,
    synth_presets,
)


def _log(msg: str) -> None:
    print(msg, flush=True)


def _run_config(args) -> RunConfig:
    config = build_config(args.config, args.set)
    env_seed = os.environ.get("LD_DETR_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigError(f"LD_DETR_SEED must be an integer, got {env_seed!r}")
        config = build_config(args.config, args.set + [f"seed={seed}"])
    config.validate()
    return config


def _load_split(data_dir: str, split: str):
    path = Path(data_dir) / f"{split}.jsonl"
    if not path.exists():
        raise ManifestError(f"no manifest at {path}")
    return load_manifest(path)


def _train_val_samples(args, config: RunConfig):
    if args.data is not None:
        train = _load_split(args.data, "train")
        val_path = Path(args.data) / "val.jsonl"
        val = load_manifest(val_path) if val_path.exists() else None
    else:
        train_cfg, val_cfg = synth_presets(config)
        train = synth_generate(train_cfg)
        val = synth_generate(val_cfg)
    return train, val


def cmd_synth_data(args) -> int:
    config = _run_config(args)
    train_cfg, val_cfg = synth_presets(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = synth_generate(train_cfg)
    val = synth_generate(val_cfg)
    save_manifest(train, out / "train.jsonl")
    save_manifest(val, out / "val.jsonl")
    save_config_file(config, out / "config.used")
    _log(f"wrote {len(train)} train and {len(val)} val samples to {out}")
    return 0


RESUME_OVERRIDABLE = ("epochs", "eval_every", "checkpoint_every")


def cmd_train(args) -> int:
    if args.resume is not None:
        # The checkpoint's configuration is authoritative on resume; only the
        # schedule may be extended, everything else would break exact replay.
        if args.config is not None:
            raise ConfigError("--resume uses the checkpoint's config; drop --config")
        extra = parse_overrides(args.set)
        bad = sorted(set(extra) - set(RESUME_OVERRIDABLE))
        if bad:
            raise ConfigError(
                f"on resume only {RESUME_OVERRIDABLE} may be overridden, got {bad}"
            )
        state = load_checkpoint(args.resume)
        config = RunConfig(**{**state["config"], **extra})
        config.validate()
    else:
        config = _run_config(args)
    train, val = _train_val_samples(args, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config_file(config, out / "config.used")
    if args.resume is not None:
        trainer = Trainer.from_checkpoint(args.resume, train, args.device)
        trainer.config = config
    else:
        trainer = Trainer(config, train, args.device)
    trainer.train_epochs(val_samples=val, out_dir=out, log_fn=_log)
    _log(f"finished at step {trainer.global_step}; checkpoint at {out / 'final.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    model, config = model_from_checkpoint(args.ckpt, args.device)
    samples = _load_split(args.data, args.split)
    report = evaluate_model(model, samples, config.batch_size, args.device, with_per_query=args.per_query)
    save_report(report, args.report)
    _log(
        f"{args.split}: R1@0.5 {report.r1_at[0.5]:.4f} R1@0.7 {report.r1_at[0.7]:.4f} "
        f"mAP@0.5 {report.map_at[0.5]:.4f} mAP avg {report.map_avg:.4f} "
        f"mIoU {report.miou:.4f} HD mAP {report.hd_map:.4f} HIT@1 {report.hit_at_1:.4f}"
    )
    _log(f"report written to {args.report}")
    return 0


def cmd_predict(args) -> int:
    model, config = model_from_checkpoint(args.ckpt, args.device)
    samples = load_manifest(args.manifest)
    records = predict_dataset(model, samples, config.batch_size, args.device)
    save_predictions([records[s.id] for s in samples], args.out)
    if args.per_loop_plots is not None:
        plot_dir = Path(args.per_loop_plots)
        plot_dir.mkdir(parents=True, exist_ok=True)
        from .data_model import pad_batch
        from .model import batch_to_tensors

        for start in range(0, len(samples), config.batch_size):
            chunk = samples[start : start + config.batch_size]
            bt = batch_to_tensors(pad_batch(chunk), args.device)
            rows = model.per_loop_top_spans(bt)
            for sample, per_loop in zip(chunk, rows):
                save_per_loop_plot(sample, per_loop, plot_dir / f"{sample.id}.png")
        _log(f"wrote {len(samples)} per-loop plots to {plot_dir}")
    _log(f"wrote {len(samples)} predictions to {args.out}")
    return 0


def cmd_ablate(args) -> int:
    config = _run_config(args)
    values = parse_axis_values(args.axis, args.values)
    train, val = _train_val_samples(args, config)
    if val is None:
        raise ManifestError(f"ablation needs a val split in {args.data}")
    table = ablate(config, args.axis, values, train, val, args.device, log_fn=_log)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(table, fh, indent=2)
        fh.write("\n")
    for row in table["rows"]:
        _log(
            f"{args.axis}={row['value']}: params {row['param_count']} "
            f"R1@0.5 {row['report']['r1_at']['0.5']:.4f} HIT@1 {row['report']['hit_at_1']:.4f}"
        )
    _log(f"ablation table written to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ld-detr",
        description="Joint moment retrieval and highlight detection over precomputed features.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", default=None, help="flat key=value config file")
            p.add_argument(
                "--set",
                action="append",
                default=[],
                metavar="KEY=VALUE",
                help="override a config entry (repeatable)",
            )
        p.add_argument("--device", default="cpu")

    p = sub.add_parser("synth-data", help="generate a synthetic train/val dataset")
    common(p)
    p.add_argument("--out", required=True, help="output directory for manifests")
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--data", default=None, help="directory with train.jsonl (and val.jsonl)")
    p.add_argument("--out", required=True, help="output directory for checkpoints")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(p, needs_config=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="directory with <split>.jsonl")
    p.add_argument("--split", default="val", choices=["train", "val"])
    p.add_argument("--report", required=True, help="path for the JSON report")
    p.add_argument("--per-query", action="store_true", help="include per-query rows")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="write predictions for a manifest")
    common(p, needs_config=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output predictions jsonl")
    p.add_argument("--per-loop-plots", default=None, help="directory for per-loop span plots")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("ablate", help="sweep one knob, training a model per value")
    common(p)
    p.add_argument("--data", default=None, help="directory with train.jsonl and val.jsonl")
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True, help="comma-separated values for the axis")
    p.add_argument("--out", required=True, help="path for the JSON ablation table")
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ManifestError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
