"""Command-line entry point: ``dvmsr {profile,train,distill,eval,infer}``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
Configuration files are JSON; a run config may hold ``model``, ``train`` and
``distill`` sections.  ``--set section.key=value`` overrides single fields.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, weights_from_checkpoint
from .data import DatasetError, Pair, dataset_layout, degrade, load_dataset, synthetic_images
from .functional import ConfigError
from .imaging import ImageError, bicubic_resize, read_png, write_png
from .metrics import MetricError, evaluate_pair
from .model import PRESETS, ModelConfig, preset
from .profiler import CONVENTIONS, profile
from .train import DistillConfig, TrainConfig, TrainingDiverged, super_resolve, train

log = logging.getLogger("dvmsr")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- configuration assembly ------------------------------------------------------------

def _read_json(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file {path} not found")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: expected a JSON object")
    return data


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_overrides(sections: dict[str, dict], items: Sequence[str]) -> None:
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        section, dot, field = key.partition(".")
        if not dot:
            section, field = "model", key
        if section not in sections:
            raise UsageError(f"unknown config section {section!r} in --set {item!r}")
        sections[section][field] = _parse_value(value)


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--input-size expects HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise UsageError(f"--input-size must be positive, got {text!r}")
    return h, w


def _model_sections(args) -> dict[str, dict]:
    """Merge preset, run config, model config file, inline flags and --set, in that order."""
    run = _read_json(args.config) if getattr(args, "config", None) else {}
    unknown = set(run) - {"model", "train", "distill"}
    if unknown:
        raise UsageError(f"unknown run-config sections: {sorted(unknown)}")
    model = preset(args.preset).to_dict() if args.preset else ModelConfig().to_dict()
    model.update(run.get("model", {}))
    if args.model_config:
        model.update(_read_json(args.model_config))
    if args.bidirectional:
        model["bidirectional"] = True
    if getattr(args, "scale", None) is not None and args.command in ("train", "distill"):
        model["scale"] = args.scale
    sections = {
        "model": model,
        "train": dict(run.get("train", {})),
        "distill": dict(run.get("distill", {})),
    }
    _apply_overrides(sections, args.set)
    return sections


def _model_config(sections) -> ModelConfig:
    cfg = ModelConfig.from_dict(sections["model"])
    cfg.validate()
    return cfg


def _write_snapshot(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# -- subcommands -------------------------------------------------------------------------

def cmd_profile(args) -> int:
    sections = _model_sections(args)
    cfg = _model_config(sections)
    report = profile(cfg, _parse_size(args.input_size), args.convention)
    print(report.format_table())
    if args.json:
        print(report.to_json())
    if args.out_dir:
        out = Path(args.out_dir)
        _write_snapshot(out, {"command": "profile", "model": cfg.to_dict(),
                              "input_size": args.input_size, "convention": args.convention})
        (out / "profile.json").write_text(report.to_json() + "\n")
    return EXIT_OK


def _load_pairs(root: str | None, n_synth: int, size: int, scale: int, seed: int) -> list[Pair]:
    if root:
        hr_dir, lr_dir = dataset_layout(root, scale)
        return list(load_dataset(hr_dir, lr_dir, scale))
    if n_synth:
        rng = np.random.default_rng([seed, 0x5EED])
        return [Pair(f"synthetic_{i:03d}", degrade(h, scale), h)
                for i, h in enumerate(synthetic_images(n_synth, size, rng))]
    return []


def _train_config(args, sections, scale: int) -> TrainConfig:
    base = TrainConfig.scaled(args.scale_factor).to_dict() if args.scale_factor else {}
    base.update(sections["train"])
    base["scale"] = scale
    if args.seed is not None:
        base["seed"] = args.seed
    cfg = TrainConfig.from_dict(base)
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    sections = _model_sections(args)
    if args.command == "distill":
        d = sections["distill"]
        d.setdefault("strategy", args.strategy)
        for key in ("loss_kind", "lambda_dis", "lambda_1"):
            if getattr(args, key) is not None:
                d[key] = getattr(args, key)
        d["teacher_checkpoint"] = args.teacher
    elif sections["distill"]:
        raise UsageError("`train` does not distill; use `distill` for a distill section")
    distill = DistillConfig.from_dict(sections["distill"])
    distill.validate()
    if args.command == "distill" and distill.strategy == "none":
        raise UsageError("distill needs --strategy mid or end")
    mcfg = _model_config(sections)
    tcfg = _train_config(args, sections, mcfg.scale)
    out = Path(args.out_dir)
    teacher = None
    if distill.strategy != "none":
        teacher = load_checkpoint(distill.teacher_checkpoint)
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None and resume.config != mcfg:
        raise UsageError("--resume checkpoint was written for a different model config")
    dataset = _load_pairs(args.data, args.synthetic, args.synthetic_size, mcfg.scale, tcfg.seed)
    if not dataset:
        raise UsageError("no training data: pass --data ROOT or --synthetic N")
    val = _load_pairs(args.val_data, args.val_synthetic, args.synthetic_size, mcfg.scale, tcfg.seed + 1)
    _write_snapshot(out, {
        "command": args.command,
        "model": mcfg.to_dict(),
        "train": tcfg.to_dict(),
        "distill": distill.to_dict(),
        "data": {"root": args.data, "synthetic": args.synthetic, "synthetic_size": args.synthetic_size,
                 "val_root": args.val_data, "val_synthetic": args.val_synthetic},
        "resume": args.resume,
    })
    result = train(mcfg, tcfg, distill, dataset, val, out_dir=out, teacher=teacher, resume=resume)
    psnr_db, ssim_v = result.final_val
    print(f"finished {tcfg.iterations} iterations; final checkpoint {out / 'final.ckpt'}")
    if val:
        print(f"validation: PSNR {psnr_db:.4f} dB  SSIM {ssim_v:.5f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.baseline is None and not args.checkpoint:
        raise UsageError("eval needs --checkpoint or --baseline")
    scale = args.scale
    model = None
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        if ckpt.config.scale != scale:
            raise UsageError(f"checkpoint is x{ckpt.config.scale} but --scale is {scale}")
        model = (ckpt.config, weights_from_checkpoint(ckpt))
    root = Path(args.data)
    if not root.is_dir():
        raise UsageError(f"dataset directory {root} not found")
    hr_dir, lr_dir = dataset_layout(root, scale)
    pairs = load_dataset(hr_dir, lr_dir, scale)
    border = scale if args.border is None else args.border
    rows = []
    for p in pairs:
        if args.baseline == "identity":
            sr = p.hr
        elif args.baseline == "bicubic":
            sr = bicubic_resize(p.lr, scale)
        else:
            sr = super_resolve(p.lr, model[1], model[0])
        rep = evaluate_pair(sr, p.hr, border)
        rows.append((p.name, rep.psnr_db, rep.ssim))
    width = max(len("mean"), *(len(r[0]) for r in rows))
    print(f"{'image'.ljust(width)}  {'PSNR(dB)':>9}  {'SSIM':>7}")
    for name, ps, ss in rows:
        print(f"{name.ljust(width)}  {ps:9.4f}  {ss:7.5f}")
    mean_p = float(np.mean([r[1] for r in rows]))
    mean_s = float(np.mean([r[2] for r in rows]))
    print(f"{'mean'.ljust(width)}  {mean_p:9.4f}  {mean_s:7.5f}")
    if args.out_dir:
        out = Path(args.out_dir)
        _write_snapshot(out, {"command": "eval", "checkpoint": args.checkpoint, "baseline": args.baseline,
                              "data": str(root), "scale": scale, "border": border})
        with (out / "eval.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image", "psnr_db", "ssim"])
            w.writerows([[n, repr(p), repr(s)] for n, p, s in rows])
            w.writerow(["mean", repr(mean_p), repr(mean_s)])
    return EXIT_OK


def cmd_infer(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    weights = weights_from_checkpoint(ckpt)
    img = read_png(args.input).to_rgb()
    sr = super_resolve(img.pixels, weights, ckpt.config)
    write_png(sr, args.output)
    print(f"{args.input} {img.height}x{img.width} -> {args.output} {sr.shape[0]}x{sr.shape[1]}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------

def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--preset", choices=sorted(PRESETS), help="named model configuration")
    g.add_argument("--model-config", metavar="JSON", help="model config file (fields of ModelConfig)")
    g.add_argument("--config", metavar="JSON", help="run config with model/train/distill sections")
    g.add_argument("--bidirectional", action="store_true", help="use forward and backward scans")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a field, e.g. channels=32 or train.lr0=1e-3 (repeatable)")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--data", metavar="ROOT", help="training set root (<root>/HR, optional <root>/LR_bicubic/X<s>)")
    g.add_argument("--synthetic", type=int, default=0, metavar="N", help="generate N synthetic training images")
    g.add_argument("--val-data", metavar="ROOT", help="validation set root")
    g.add_argument("--val-synthetic", type=int, default=0, metavar="N", help="generate N synthetic validation images")
    g.add_argument("--synthetic-size", type=int, default=48, metavar="PX", help="side of synthetic images (default 48)")
    g.add_argument("--scale", type=int, help="upscaling factor (overrides the model config)")
    g.add_argument("--scale-factor", type=float, metavar="RHO",
                   help="shrink the full 500k-iteration schedule by RHO (e.g. 0.001)")
    g.add_argument("--seed", type=int, help="seed for initialization, sampling and synthetic data")
    g.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint written by this run")
    g.add_argument("--out-dir", required=True, help="directory for checkpoints, metrics.csv and the config snapshot")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dvmsr", description="Vision-Mamba super-resolution toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("profile", help="parameter, FLOPS and activation counts")
    _add_model_flags(p)
    p.add_argument("--input-size", default="256x256", metavar="HxW", help="LR input size (default 256x256)")
    p.add_argument("--convention", choices=CONVENTIONS, default="MAC=1", help="FLOPS counting convention")
    p.add_argument("--json", action="store_true", help="also print the report as JSON")
    p.add_argument("--out-dir", help="write profile.json and the config snapshot here")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("train", help="train a model with plain L1")
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="train a student against a frozen teacher")
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--teacher", required=True, metavar="CKPT", help="teacher checkpoint")
    p.add_argument("--strategy", choices=("mid", "end"), default="end", help="distillation tap (default end)")
    p.add_argument("--loss-kind", choices=("L1", "L2"), help="distillation norm (default L1)")
    p.add_argument("--lambda-dis", type=float, help="weight of the distillation term (default 1)")
    p.add_argument("--lambda-1", type=float, help="weight of the L1 reconstruction term (default 1)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Y-channel PSNR/SSIM on a dataset")
    p.add_argument("--checkpoint", metavar="CKPT", help="model checkpoint")
    p.add_argument("--baseline", choices=("bicubic", "identity"), help="evaluate a baseline instead of a model")
    p.add_argument("--data", required=True, metavar="ROOT", help="dataset root (<root>/HR, optional <root>/LR_bicubic/X<s>)")
    p.add_argument("--scale", type=int, default=4, help="upscaling factor (default 4)")
    p.add_argument("--border", type=int, help="pixels cropped on each side (default: the scale)")
    p.add_argument("--out-dir", help="write eval.csv and the config snapshot here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="super-resolve one PNG")
    p.add_argument("--checkpoint", required=True, metavar="CKPT", help="model checkpoint")
    p.add_argument("input", help="input PNG (grayscale is replicated to RGB)")
    p.add_argument("output", help="output PNG (8-bit RGB)")
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"dvmsr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DatasetError, CheckpointError, ImageError, MetricError) as exc:
        print(f"dvmsr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, OSError, FloatingPointError) as exc:
        print(f"dvmsr: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
