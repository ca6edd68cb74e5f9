"""Command-line entry points.

Five subcommands: `gen` writes a synthetic dataset, `train` fits projectors
and saves a checkpoint, `eval` scores a protocol on the held-out split,
`gradcheck` runs the finite-difference suite on the small pinned setup, and
`report` merges metric CSVs into one comparison table.

Exit codes: 0 success, 1 bad arguments / configuration / inputs, 2 numerical
failure (non-finite values or a failed gradient check). Training settings can
come from a JSON config file (--config); flags override it, and unknown keys
are rejected rather than ignored. Each artifact-producing command drops a
lock file with the fully resolved settings next to its output so a run can
be reproduced from the artifacts alone.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import __version__
from . import autodiff as ad
from . import datagen, metrics, pipeline
from .frozenlm import LMConfig
from .losses import ASLConfig
from .storage import dump_json, load_dataset

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2


class CliError(Exception):
    """Invalid arguments, configuration, or input files (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    # raise instead of killing the process so main() owns the exit code
    def error(self, message):
        raise CliError(message)


# ---------------------------------------------------------------------------
# training-config resolution


def _field_names(cls) -> set:
    return {f.name for f in dataclasses.fields(cls)}


def _reject_unknown(given: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise CliError(f"unknown {where} keys: {', '.join(unknown)}")


def _load_config_file(path) -> dict:
    try:
        payload = json.loads(Path(path).read_text())
    except OSError as err:
        raise CliError(f"cannot read config file {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise CliError(f"config file {path} is not valid JSON: {err}") from err
    if not isinstance(payload, dict):
        raise CliError(f"config file {path} must hold a JSON object")
    return payload


def resolve_train_config(file_cfg: dict, overrides: dict) -> pipeline.TrainConfig:
    """Defaults, then config-file values, then explicit flags."""
    _reject_unknown(file_cfg, _field_names(pipeline.TrainConfig), "config")
    merged = dict(file_cfg)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    if isinstance(merged.get("asl"), dict):
        _reject_unknown(merged["asl"], _field_names(ASLConfig), "config asl")
        merged["asl"] = ASLConfig(**merged["asl"])
    if isinstance(merged.get("lm"), dict):
        _reject_unknown(merged["lm"], _field_names(LMConfig), "config lm")
        merged["lm"] = LMConfig(**merged["lm"])
    try:
        return pipeline.TrainConfig(**merged)
    except (TypeError, ValueError) as err:
        raise CliError(f"invalid training configuration: {err}") from err


def _config_lock(cfg: pipeline.TrainConfig, extra: dict) -> dict:
    lock = {"settings": dataclasses.asdict(cfg), "version": __version__}
    lock.update(extra)
    return lock


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen(args) -> int:
    if args.profile == "table1":
        if args.n_records is not None:
            raise CliError("--n-records applies to the planted profile only")
        scale = 1.0 if args.scale is None else args.scale
        try:
            cfg = datagen.table1_profile(scale=scale, seed=args.seed, mode=args.mode)
        except ValueError as err:
            raise CliError(str(err)) from err
        resolved = {"profile": "table1", "scale": scale}
    else:
        if args.scale is not None:
            raise CliError("--scale applies to the table1 profile only")
        n = 2000 if args.n_records is None else args.n_records
        try:
            cfg = datagen.planted_profile(n_records=n, seed=args.seed, mode=args.mode)
        except ValueError as err:
            raise CliError(str(err)) from err
        resolved = {"profile": "planted", "n_records": n}
    resolved.update({"seed": args.seed, "mode": args.mode})
    summary = datagen.generate(cfg, args.out)
    resolved.update({"records_written": summary.n_records,
                     "patients": summary.n_patients,
                     "version": __version__})
    dump_json(Path(args.out) / "run.lock", resolved)
    print(f"wrote {summary.n_records} records ({summary.n_patients} patients) to {args.out}")
    for task, c in summary.counts.items():
        print(f"  {task}: pos={c['pos']} neg={c['neg']} unknown={c['unknown']}")
    return EXIT_OK


def _cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config) if args.config else {}
    overrides = {
        "mode": args.mode,
        "loss_kind": args.loss,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.lr,
        "weight_decay": args.weight_decay,
        "beta": args.beta,
        "threshold": args.threshold,
        "split_ratio": args.split_ratio,
        "seed": args.seed,
    }
    cfg = resolve_train_config(file_cfg, overrides)
    dataset = load_dataset(args.data)
    ckpt = pipeline.train(dataset, cfg)
    pipeline.save_checkpoint(ckpt, args.out)
    dump_json(Path(args.out) / "run.lock",
              _config_lock(cfg, {"command": "train", "data": str(args.data)}))
    for name, losses in ckpt.history.items():
        print(f"{name}: epoch losses {losses[0]:.4f} -> {losses[-1]:.4f} ({len(losses)} epochs)")
    print(f"checkpoint saved to {args.out}")
    return EXIT_OK


def _format_metrics(rows) -> str:
    lines = [f"{'task':<20} {'precision':>9} {'recall':>9} {'tp':>6} {'fp':>6} {'fn':>6} {'tn':>8}"]
    for m in rows:
        flag = " *" if m.degenerate else ""
        lines.append(f"{m.task:<20} {m.precision:>9.3f} {m.recall:>9.3f}"
                     f" {m.tp:>6} {m.fp:>6} {m.fn:>6} {m.tn:>8}{flag}")
    return "\n".join(lines)


def _cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    ckpt = pipeline.load_checkpoint(args.ckpt)
    rows, selection = pipeline.evaluate_protocol(ckpt, dataset, args.protocol,
                                                 threshold=args.threshold)
    print(_format_metrics(rows))
    if selection is not None:
        picks = ", ".join(f"{t}={s or '-'}" for t, s in selection.assignment.items())
        print(f"selected sources: {picks}")
    if args.out:
        metrics.write_metrics_csv(args.out, args.protocol, rows)
        lock = {
            "command": "eval",
            "data": str(args.data),
            "checkpoint": str(args.ckpt),
            "protocol": args.protocol,
            "threshold": ckpt.config.threshold if args.threshold is None else args.threshold,
            "settings": dataclasses.asdict(ckpt.config),
            "version": __version__,
        }
        dump_json(Path(str(args.out) + ".lock"), lock)
        print(f"metrics written to {args.out}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    report = pipeline.gradcheck_suite(seed=args.seed, tol=args.tol, h=args.step)
    print(report.format())
    return EXIT_OK if report.passed else EXIT_NUMERIC


def _parse_run_spec(spec: str) -> tuple[str, str]:
    name, sep, path = spec.partition("=")
    if not sep or not name or not path:
        raise CliError(f"run spec {spec!r} must look like NAME=metrics.csv")
    return name, path


def _cmd_report(args) -> int:
    runs = []
    for spec in args.runs:
        name, path = _parse_run_spec(spec)
        runs.append((name, metrics.read_metrics_csv(path)))
    try:
        _, aligned = metrics.render_report(runs)
    except ValueError as err:
        raise CliError(str(err)) from err
    print(aligned)
    if args.out:
        metrics.write_report(args.out, runs)
        print(f"report written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="riskfuse",
                     description="multimodal risk-prediction pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--profile", choices=sorted(datagen.PROFILES), required=True)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("latent", "raw"), default="latent")
    p.add_argument("--scale", type=float, default=None,
                   help="shrink the table1 cohort proportionally")
    p.add_argument("--n-records", type=int, default=None,
                   help="record count for the planted profile")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train projectors against a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--config", default=None, help="JSON file with training settings")
    p.add_argument("--mode", choices=pipeline.TRAIN_MODES, default=None)
    p.add_argument("--loss", choices=pipeline.LOSS_KINDS, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--split-ratio", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a protocol on the held-out split")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--protocol", required=True,
                   help="joint, iso-joint, single:<source>, or bss")
    p.add_argument("--threshold", type=float, default=None,
                   help="override the checkpoint's decision threshold")
    p.add_argument("--out", default=None, help="metrics CSV path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5, help="finite-difference step")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("report", help="merge metric CSVs into one table")
    p.add_argument("runs", nargs="+", metavar="NAME=CSV")
    p.add_argument("--out", default=None, help="merged CSV path (aligned .txt beside it)")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except ad.NonFiniteError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
