"""Command line entry point: prepare, train, sweep, interpolate, evaluate.

Exit codes: 0 success, 2 usage or validation error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import data as ds
from .metrics import psnr, ssim_global
from .model import ConfigError, DiscriminatorConfig, GeneratorConfig, generator_config_from_params
from .training import (
    DEFAULT_DELTAS,
    CheckpointFormatError,
    OptimizerConfig,
    TrainConfig,
    TrainConfigError,
    _fmt,
    delta_sweep,
    load_checkpoint,
    predict,
    train,
)

log = logging.getLogger("fregan")

DEFAULT_SEED = 42


class UsageError(Exception):
    pass


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _float(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not math.isfinite(value):
        raise argparse.ArgumentTypeError(f"must be finite, got {text!r}")
    return value


def _delta_list(text):
    try:
        values = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad delta list: {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty delta list")
    return values


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=DEFAULT_SEED, help="seed for every random choice (default 42)")
    shared.add_argument("--size", type=int, default=64, help="frame size in pixels; 256 gives the full-depth model")
    shared.add_argument("--threads", type=_positive_int, default=1, help="BLAS threads (1 keeps runs bit-identical)")
    shared.add_argument("-v", "--verbose", action="store_true")

    model_flags = argparse.ArgumentParser(add_help=False)
    model_flags.add_argument("--base-filters", type=_positive_int, default=16)
    model_flags.add_argument("--dropout", type=_float, default=0.5)
    model_flags.add_argument("--steps", type=_positive_int, default=15000)
    model_flags.add_argument("--batch-size", type=_positive_int, default=1)
    model_flags.add_argument("--lr", type=_float, default=1e-4)
    model_flags.add_argument("--beta1", type=_float, default=0.0)
    model_flags.add_argument("--beta2", type=_float, default=0.95)
    model_flags.add_argument("--adam-eps", type=_float, default=1e-8)
    model_flags.add_argument("--recon-weight", type=_float, default=0.0,
                             help="weight of an optional pixel pseudo-Huber term (extension, default off)")
    model_flags.add_argument("--schedule", choices=("shuffled", "cyclic"), default="shuffled")
    model_flags.add_argument("--cycle-steps", type=_positive_int, default=50,
                             help="consecutive steps per triplet under --schedule cyclic")
    model_flags.add_argument("--progress-every", type=int, default=100)

    parser = argparse.ArgumentParser(prog="fregan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[shared], help="build a manifest from frame directories")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", type=Path, help="directory with one subdirectory of frames per video")
    src.add_argument("--synthetic", type=_positive_int, metavar="COUNT",
                     help="generate COUNT moving-square triplets instead of reading frames")
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--test-fraction", type=_float, default=0.13)
    p.add_argument("--split-by", choices=("triplet", "video"), default="triplet")

    p = sub.add_parser("train", parents=[shared, model_flags], help="adversarial training")
    p.add_argument("manifest", type=Path)
    p.add_argument("--output-dir", type=Path, required=True)
    p.add_argument("--delta", type=_float, default=0.5)
    p.add_argument("--checkpoint-every", type=_positive_int, default=1000)

    p = sub.add_parser("sweep", parents=[shared, model_flags], help="retrain per delta and score the test split")
    p.add_argument("manifest", type=Path)
    p.add_argument("--deltas", type=_delta_list, default=list(DEFAULT_DELTAS))
    p.add_argument("--output", type=Path, required=True)

    p = sub.add_parser("interpolate", parents=[shared], help="double the frame rate of a frame sequence")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--frames", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)

    p = sub.add_parser("evaluate", parents=[shared], help="score middle-frame predictions on a split")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("manifest", type=Path)
    p.add_argument("--split", choices=("train", "test"), default="test")
    return parser


# ---------------------------------------------------------------------------
# validation helpers


def _configs(args):
    try:
        gen = GeneratorConfig(args.size, base_filters=args.base_filters, dropout_rate=args.dropout)
        disc = DiscriminatorConfig(args.size, base_filters=args.base_filters)
        train_cfg = TrainConfig(
            steps=args.steps,
            batch_size=args.batch_size,
            delta=getattr(args, "delta", 0.5),
            seed=args.seed,
            checkpoint_every=getattr(args, "checkpoint_every", 1000),
            reconstruction_weight=args.recon_weight,
            schedule=args.schedule,
            cycle_steps=args.cycle_steps,
        )
        optim = OptimizerConfig(args.lr, args.beta1, args.beta2, args.adam_eps)
    except (ConfigError, TrainConfigError) as exc:
        raise UsageError(str(exc)) from None
    return gen, disc, train_cfg, optim


def _read_manifest(path):
    if not Path(path).is_file():
        raise UsageError(f"manifest not found: {path}")
    try:
        return ds.read_manifest(path)
    except ds.ManifestParseError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _read_checkpoint(path):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        gen, _, _ = load_checkpoint(path)
        return gen, generator_config_from_params(gen)
    except (CheckpointFormatError, KeyError, ConfigError) as exc:
        raise UsageError(f"{path}: not a usable checkpoint ({exc})") from None


def _fmt_float(x):
    return f"{x:g}"


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(args):
    if not 0 < args.test_fraction < 1:
        raise UsageError(f"--test-fraction must lie in (0, 1), got {args.test_fraction}")
    try:
        GeneratorConfig(args.size)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    if args.input is not None:
        if not args.input.is_dir():
            raise UsageError(f"input directory not found: {args.input}")
        sources = sorted(p for p in args.input.iterdir() if p.is_dir())
        if not sources and ds.list_frame_files(args.input):
            sources = [args.input]
        if not sources:
            raise UsageError(f"no frame sequences under {args.input}")

    frames_dir = args.output / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    triplets = []
    if args.synthetic is not None:
        sequences = [
            (f"synth{k:04d}", frames)
            for k, (frames, _) in enumerate(ds.synth_moving_square_bytes(args.synthetic, args.size, args.seed))
        ]
    else:
        sequences = []
        for src in sources:
            files = ds.list_frame_files(src)
            sequences.append((src.name, [ds.read_image_bytes(f, args.size) for f in files]))
    for source_id, pixels in sequences:
        out = frames_dir / source_id
        out.mkdir(exist_ok=True)
        frames = []
        for i, px in enumerate(pixels):
            path = out / f"{i:06d}.png"
            ds.write_image_bytes(path, px)
            frames.append(ds.Frame(ds.bytes_to_tensor(px), source_id, i, path.relative_to(args.output).as_posix()))
        triplets += ds.extract_triplets(frames)
    if not triplets:
        raise UsageError("input yields no frame triplets (need at least 3 frames per video)")
    manifest = ds.split_dataset(triplets, args.test_fraction, args.seed, by_video=args.split_by == "video")
    ds.write_manifest(manifest, args.output / "manifest.tsv")
    print(args.output / "manifest.tsv")
    log.info("%d triplets (%d test)", len(manifest.records), len(manifest.split("test")))
    return 0


def _run_header(train_cfg, optim):
    return (f"delta={_fmt_float(train_cfg.delta)} lr={_fmt_float(optim.learning_rate)} "
            f"beta1={_fmt_float(optim.beta1)} beta2={_fmt_float(optim.beta2)} "
            f"steps={train_cfg.steps} batch={train_cfg.batch_size} seed={train_cfg.seed}")


def cmd_train(args):
    gen_cfg, disc_cfg, train_cfg, optim = _configs(args)
    manifest = _read_manifest(args.manifest)
    if not manifest.split("train"):
        raise UsageError("manifest has no training records")
    print(_run_header(train_cfg, optim), file=sys.stderr)
    train(manifest, gen_cfg, disc_cfg, train_cfg, optim, args.output_dir, progress_every=args.progress_every)
    print(args.output_dir / "train_log.csv")
    return 0


def cmd_sweep(args):
    gen_cfg, disc_cfg, train_cfg, optim = _configs(args)
    if any(not d > 0 for d in args.deltas):
        raise UsageError(f"every delta must be positive, got {args.deltas}")
    manifest = _read_manifest(args.manifest)
    if not manifest.split("train"):
        raise UsageError("manifest has no training records")
    print(_run_header(train_cfg, optim) + " deltas=" + ",".join(_fmt_float(d) for d in args.deltas),
          file=sys.stderr)
    args.output.parent.mkdir(parents=True, exist_ok=True)
    rows = delta_sweep(manifest, args.deltas, gen_cfg, disc_cfg, train_cfg, optim, args.output)
    for delta, p, s in rows:
        log.info("delta=%g psnr=%s ssim=%s", delta, _fmt(p), _fmt(s))
    return 0


def cmd_interpolate(args):
    gen, cfg = _read_checkpoint(args.checkpoint)
    if not args.frames.is_dir():
        raise UsageError(f"frames directory not found: {args.frames}")
    files = ds.list_frame_files(args.frames)
    if len(files) < 2:
        raise UsageError("need at least 2 frames")
    pixels = [ds.read_image_bytes(f, cfg.image_size) for f in files]
    args.output.mkdir(parents=True, exist_ok=True)
    out_index = 1
    for t, px in enumerate(pixels):
        ds.write_image_bytes(args.output / f"frame_{out_index:06d}.png", px)
        out_index += 1
        if t + 1 < len(pixels):
            pred = predict(gen, ds.bytes_to_tensor(px), ds.bytes_to_tensor(pixels[t + 1]), cfg)
            ds.write_image_bytes(args.output / f"frame_{out_index:06d}.png", ds.tensor_to_bytes(pred))
            out_index += 1
    log.info("wrote %d frames to %s", out_index - 1, args.output)
    return 0


def cmd_evaluate(args):
    gen, cfg = _read_checkpoint(args.checkpoint)
    manifest = _read_manifest(args.manifest)
    records = manifest.split(args.split)
    if not records:
        raise UsageError(f"the {args.split} split is empty")
    rows = []
    for r in records:
        paths = [ds.resolve_path(manifest, p) for p in r.paths]
        x_n, x_np1, x_np2 = (ds.read_image_bytes(p, cfg.image_size) for p in paths)
        pred = ds.tensor_to_bytes(predict(gen, ds.bytes_to_tensor(x_n), ds.bytes_to_tensor(x_np2), cfg))
        # score the 8-bit frames exactly as they would be written out
        y = x_np1.astype(np.float64).transpose(2, 0, 1) / 255
        y_hat = pred.astype(np.float64).transpose(2, 0, 1) / 255
        rows.append((f"{r.source_id}:{r.start_index}", psnr(y, y_hat), ssim_global(y, y_hat)))
    p_vals = [r[1] for r in rows]
    s_vals = [r[2] for r in rows]
    out = sys.stdout
    out.write("record,psnr,ssim,psnr_min,psnr_max,ssim_min,ssim_max\n")
    for name, p, s in rows:
        out.write(f"{name},{_fmt(p)},{_fmt(s)},,,,\n")
    out.write(
        f"mean,{_fmt(float(np.mean(p_vals)))},{_fmt(float(np.mean(s_vals)))},"
        f"{_fmt(min(p_vals))},{_fmt(max(p_vals))},{_fmt(min(s_vals))},{_fmt(max(s_vals))}\n"
    )
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "interpolate": cmd_interpolate,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command in ("train", "sweep") else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        with threadpool_limits(args.threads):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"fregan {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any failure past validation is a runtime error
        print(f"fregan {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
