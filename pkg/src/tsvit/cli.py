"""Command-line entry point: ``tsvit {analyze,verify,finetune,profile,bench,metrics}``.

Exit codes: 0 success, 1 verification or training failure, 2 usage error.
A ``--config`` JSON file is applied after the flags, so its keys win.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .analysis.complexity import count_encoder
from .analysis.latency import latency_bench
from .analysis.metrics import CsvFormatError, read_rows, write_metrics
from .analysis.profiling import profile_activations
from .baseline_layer import DEFAULT_RATIOS
from .checkpoint import CheckpointError
from .data import synthetic_images
from .encoder import (
    PRESETS,
    EncoderConfig,
    count_parameters,
    init_weights,
    peft_partition,
    plug_and_play_restore,
    preset,
)
from .errors import ConfigurationError, ParameterError, TrainingError
from .finetune import FinetuneConfig, peft_finetune
from .verify import run_suite


class UsageError(Exception):
    pass


def _ratios(text: str):
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad ratio list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsvit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--preset", default="desk")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", help="JSON file whose keys override the flags")
        sp.add_argument("--out", default=out_default)

    def arch(sp):
        sp.add_argument("--mode", choices=("dense", "baseline", "dynamic"), default="dense")
        sp.add_argument("--ratios", type=_ratios, default=DEFAULT_RATIOS)
        sp.add_argument("--rate", type=float, default=0.5)
        sp.add_argument("--theta", type=float, default=0.5)
        sp.add_argument("--checkpoint", help="weights to load instead of a fresh init")

    a = sub.add_parser("analyze", help="parameter and FLOP counts")
    common(a, "out")
    arch(a)
    a.add_argument("--attention", choices=("valid", "padded"), default="valid")

    v = sub.add_parser("verify", help="run the property suite")
    common(v, "out")
    v.add_argument("--checkpoint")
    v.add_argument("--inputs", type=int, default=100)

    f = sub.add_parser("finetune", help="fine-tune selectors and compensators")
    common(f, "model.ckpt")
    f.add_argument("--rate", type=float, default=0.5)
    f.add_argument("--theta", type=float, default=0.5)
    f.add_argument("--steps", type=int, default=500)
    f.add_argument("--lr", type=float, default=FinetuneConfig.lr)
    f.add_argument("--lambda", dest="rate_weight", type=float, default=FinetuneConfig.rate_weight)
    f.add_argument("--batch-size", type=int, default=2)
    f.add_argument("--images", type=int, default=8, help="synthetic image count")
    f.add_argument("--data", default="synthetic", help="'synthetic' or a directory of .npy images")

    pr = sub.add_parser("profile", help="per-layer activated token counts")
    common(pr, "out")
    arch(pr)
    pr.add_argument("--samples", type=int, default=4)

    b = sub.add_parser("bench", help="encoder wall-clock latency")
    common(b, "out")
    arch(b)
    b.add_argument("--trials", type=int, default=5)
    b.add_argument("--warmup", type=int, default=2)

    m = sub.add_parser("metrics", help="NDS and average rank for a detection table")
    m.add_argument("--input", required=True)
    m.add_argument("--ties", choices=("average", "dense"), default="average")
    m.add_argument("--config")
    m.add_argument("--out", default="out")
    return p


def _apply_config(args: argparse.Namespace) -> argparse.Namespace:
    if not getattr(args, "config", None):
        return args
    try:
        data = json.loads(Path(args.config).read_text())
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    for key, value in data.items():
        attr = key.replace("-", "_")
        if attr == "lambda":
            attr = "rate_weight"
        if not hasattr(args, attr) or attr in ("command", "config"):
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        if attr == "ratios":
            value = tuple(float(r) for r in value)
        setattr(args, attr, value)
    return args


def _encoder_config(args, mode=None) -> EncoderConfig:
    if args.preset not in PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; choose from {sorted(PRESETS)}")
    fields = {"seed": args.seed}
    fields["mode"] = mode or getattr(args, "mode", "dense")
    for name in ("ratios", "rate", "theta"):
        if hasattr(args, name):
            fields[name] = getattr(args, name)
    try:
        return preset(args.preset, **fields)
    except (ConfigurationError, ParameterError) as exc:
        raise UsageError(str(exc)) from None


def _weights(args, cfg):
    """Fresh weights, or a checkpoint whose stored architecture overrides the flags."""
    if not getattr(args, "checkpoint", None):
        return cfg, init_weights(cfg)
    stored, w = checkpoint.load(args.checkpoint)
    if cfg.mode == "dense" and stored.mode != "dense":
        return stored.replace(mode="dense"), plug_and_play_restore(w)
    return stored.replace(theta=cfg.theta), w


def _write_resolved(out_dir: Path, args) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(vars(args).items())}
    (out_dir / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def cmd_analyze(args) -> int:
    cfg = _encoder_config(args)
    rep = count_encoder(cfg, attention=args.attention, views=1)
    out = Path(args.out)
    _write_resolved(out, args)
    rep.write_csv(out / "complexity.csv")
    summary = {
        "preset": args.preset,
        "mode": cfg.mode,
        "convention": rep.convention,
        "total_params": count_parameters(cfg),
        "dense_params": count_parameters(cfg.replace(mode="dense")),
        "total_flops_per_view": rep.total_flops,
        "projection_share": rep.projection_share(),
    }
    if cfg.mode == "dynamic":
        part = peft_partition(cfg)
        summary.update(trainable_params=part.trainable_count, frozen_params=part.frozen_count)
    (out / "params.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for k, val in summary.items():
        print(f"{k}: {val}")
    return 0


def cmd_verify(args) -> int:
    cfg = _encoder_config(args, mode="dynamic")
    out = Path(args.out)
    _write_resolved(out, args)
    results = run_suite(cfg, seed=args.seed, checkpoint=args.checkpoint, n_inputs=args.inputs)
    report = {"preset": args.preset, "seed": args.seed, "properties": [r.to_dict() for r in results]}
    report["passed"] = all(r.passed for r in results)
    (out / "verify.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"failing properties: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def _load_images(args, cfg) -> np.ndarray:
    if args.data == "synthetic":
        return synthetic_images(args.images, cfg.C, cfg.H, cfg.W, seed=args.seed)
    d = Path(args.data)
    files = sorted(d.glob("*.npy")) if d.is_dir() else []
    if not files:
        raise UsageError(f"no .npy images in {args.data}")
    imgs = np.stack([np.load(p).astype(np.float64) for p in files])
    if imgs.shape[1:] != (cfg.C, cfg.H, cfg.W):
        raise UsageError(f"images must be {cfg.C}x{cfg.H}x{cfg.W}, got {imgs.shape[1:]}")
    return imgs


def cmd_finetune(args) -> int:
    cfg = _encoder_config(args, mode="dynamic")
    try:
        ft = FinetuneConfig(steps=args.steps, lr=args.lr, rate_weight=args.rate_weight,
                            batch_size=args.batch_size, seed=args.seed)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    imgs = _load_images(args, cfg)
    ckpt = Path(args.out)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    _write_resolved(ckpt.parent, args)
    res = peft_finetune(imgs, cfg, init_weights(cfg), ft)
    checkpoint.save(ckpt, cfg, res.weights)
    log_path = ckpt.with_suffix(".log.csv")
    with open(log_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "distill", "rate_loss", "lambda"]
                   + [f"rate_l{i}" for i in range(cfg.L)] + [f"hard_rate_l{i}" for i in range(cfg.L)])
        for row in res.log:
            w.writerow([row["step"], repr(row["loss"]), repr(row["distill"]), repr(row["rate_loss"]),
                        repr(row["lambda"])] + [repr(v) for v in row["rates"]] + [repr(v) for v in row["hard_rates"]])
    rates = res.final_rates()
    if rates:
        print(f"final mean activation: {np.mean(rates):.4f} (per layer {', '.join(f'{r:.3f}' for r in rates)})")
    print(f"wrote {ckpt} and {log_path}")
    return 0


def cmd_profile(args) -> int:
    cfg = _encoder_config(args)
    cfg, w = _weights(args, cfg)
    out = Path(args.out)
    _write_resolved(out, args)
    samples = synthetic_images(args.samples, cfg.C, cfg.H, cfg.W, seed=args.seed)
    prof = profile_activations(samples, cfg, w)
    prof.write_csv(out / "activations.csv")
    for r in prof.rows:
        print(f"layer {r.layer}: mean {r.mean:.2f} min {r.min} max {r.max}")
    print(f"non-increasing: {prof.non_increasing()}")
    return 0


def cmd_bench(args) -> int:
    cfg = _encoder_config(args)
    cfg, w = _weights(args, cfg)
    try:
        if args.trials < 5 or args.warmup < 2:
            raise ParameterError("need --trials >= 5 and --warmup >= 2")
    except ParameterError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    _write_resolved(out, args)
    views = synthetic_images(cfg.V, cfg.C, cfg.H, cfg.W, seed=args.seed)
    stats = latency_bench(views, cfg, w, trials=args.trials, warmup=args.warmup)
    stats.write_csv(out / "latency.csv")
    print(f"tau_E median {stats.median:.3f} ms, IQR {stats.iqr:.3f} ms, {stats.fps:.1f} fps")
    print("tau_FPN: n/a, tau_D: n/a")
    return 0


def cmd_metrics(args) -> int:
    rows = read_rows(args.input)
    out = Path(args.out)
    _write_resolved(out, args)
    write_metrics(out / "metrics.csv", rows, method=args.ties)
    for r in rows:
        print(f"{r.name}: NDS {r.computed_nds():.4f}")
    return 0


COMMANDS = {
    "analyze": cmd_analyze,
    "verify": cmd_verify,
    "finetune": cmd_finetune,
    "profile": cmd_profile,
    "bench": cmd_bench,
    "metrics": cmd_metrics,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args = _apply_config(args)
        return COMMANDS[args.command](args)
    except (UsageError, CsvFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"error: invariant {exc.invariant} failed: {exc}", file=sys.stderr)
        return 1
    except TrainingError as exc:
        print(f"error: training failed: {exc}", file=sys.stderr)
        return 1
    except (ConfigurationError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
