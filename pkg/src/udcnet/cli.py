"""``udcnet`` command line: synth-data, train, restore, analyze, bench.

Exit codes: 0 success, 1 I/O failure, 2 numeric failure (NaN during
training), 3 weight/spec mismatch, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import analyze as A
from . import data as D
from .models import ModelSpec, build_model
from .tensor import Tensor, no_grad
from .train import NumericalError, TrainConfig, train
from .weights import WeightFormatError, load_weights, model_from_weights, save_weights

EXIT_OK = 0
EXIT_IO = 1
EXIT_NUMERIC = 2
EXIT_MISMATCH = 3
EXIT_USAGE = 64

log = logging.getLogger("udcnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _resolution(text: str) -> tuple[int, int]:
    """``HxW`` -> (height, width)."""
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"resolution must be positive, got {text!r}")
    return h, w


def _spec_from(args) -> ModelSpec:
    attention = args.attn == "on"
    if args.model == "ludcnet":
        if attention:
            raise UsageError("ludcnet has no attention branch; use --attn off")
        return ModelSpec.ludcnet()
    if getattr(args, "toy", False):
        return ModelSpec.toy(attention)
    return ModelSpec.drm_udcnet(attention)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="udcnet", description="Blind UDC image restoration: data, training, inference, analysis.",
                formatter_class=fmt)
    p.add_argument("--config", type=Path, default=None,
                   help="JSON file of flag defaults (keys are flag names with dashes as underscores)")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("synth-data", help="generate synthetic degraded/clean pairs", formatter_class=fmt)
    s.add_argument("--out", type=Path, required=True, help="output directory")
    s.add_argument("--count", type=int, default=8, help="number of pairs")
    s.add_argument("--size", type=int, default=128, help="image side length in pixels")
    s.add_argument("--psf", choices=["gaussian", "gaussian_spikes"], default="gaussian_spikes", help="PSF family")
    s.add_argument("--psf-size", type=int, default=21, help="PSF kernel size (odd; 1 = no blur)")
    s.add_argument("--psf-sigma", type=float, default=2.0, help="Gaussian PSF sigma in pixels")
    s.add_argument("--noise", type=float, default=0.01, help="additive Gaussian noise sigma (linear domain)")
    s.add_argument("--saturation", type=float, default=4.0, help="sensor clipping level (linear domain)")
    s.add_argument("--depth", type=int, choices=[8, 16], default=16, help="bits per sample of written images")

    t = sub.add_parser("train", help="train a model on a manifest", formatter_class=fmt)
    t.add_argument("--data", type=Path, required=True, help="dataset manifest (JSON lines)")
    t.add_argument("--model", choices=["drm_udcnet", "ludcnet"], default="drm_udcnet", help="architecture")
    t.add_argument("--attn", choices=["on", "off"], default="off", help="DRM-UDCNet attention branch")
    t.add_argument("--toy", action="store_true", help="use the small DRM-UDCNet widths")
    t.add_argument("--steps", type=int, default=1000, help="optimisation steps")
    t.add_argument("--out", type=Path, required=True, help="weight file to write")
    t.add_argument("--log", type=Path, default=None, help="training log path (default: OUT with .log.jsonl)")
    t.add_argument("--lr", type=float, default=1e-3, help="initial learning rate")
    t.add_argument("--lr-min", type=float, default=1e-6, help="learning-rate floor")
    t.add_argument("--batch-size", type=int, default=4, help="mini-batch size")
    t.add_argument("--patience", type=int, default=5, help="plateau patience in epochs")
    t.add_argument("--val-fraction", type=float, default=0.1, help="validation share of the pairs")
    t.add_argument("--steps-per-epoch", type=int, default=None, help="steps between validations (default: one pass)")
    t.add_argument("--checkpoint-every", type=int, default=0, help="checkpoint interval in steps (0 = off)")
    t.add_argument("--no-augment", action="store_true", help="disable flip/rotation augmentation")

    r = sub.add_parser("restore", help="restore images with trained weights", formatter_class=fmt)
    r.add_argument("--weights", type=Path, required=True, help="weight file")
    r.add_argument("--in", dest="inputs", type=Path, required=True, help="image file or directory")
    r.add_argument("--out", type=Path, required=True, help="output directory")
    r.add_argument("--pad", choices=["auto", "none"], default="auto",
                   help="reflect-pad indivisible images and crop the result back")
    r.add_argument("--model", choices=["drm_udcnet", "ludcnet"], default=None,
                   help="expected architecture (checked against the weight file)")
    r.add_argument("--attn", choices=["on", "off"], default="off", help="expected attention setting with --model")
    r.add_argument("--depth", type=int, choices=[8, 16], default=16, help="bits per sample of written images")
    r.add_argument("--jobs", type=int, default=1, help="images restored concurrently")

    a = sub.add_parser("analyze", help="parameter and FLOPs report", formatter_class=fmt)
    a.add_argument("--model", choices=["drm_udcnet", "ludcnet"], default="ludcnet", help="architecture")
    a.add_argument("--attn", choices=["on", "off"], default="off", help="DRM-UDCNet attention branch")
    a.add_argument("--toy", action="store_true", help="use the small DRM-UDCNet widths")
    a.add_argument("--res", type=_resolution, action="append", default=None,
                   help="resolution HxW, repeatable (default: 256x256)")
    a.add_argument("--both-conventions", action="store_true", help="also print FLOPs counting one FLOP per MAC")
    a.add_argument("--layers", action="store_true", help="print the per-layer breakdown")
    a.add_argument("--json", action="store_true", help="machine-readable output")

    b = sub.add_parser("bench", help="latency benchmark", formatter_class=fmt)
    b.add_argument("--model", choices=["drm_udcnet", "ludcnet"], default="ludcnet", help="architecture")
    b.add_argument("--attn", choices=["on", "off"], default="off", help="DRM-UDCNet attention branch")
    b.add_argument("--toy", action="store_true", help="use the small DRM-UDCNet widths")
    b.add_argument("--res", type=_resolution, default=(256, 256), help="resolution HxW")
    b.add_argument("--runs", type=int, default=5, help="timed runs (at least 5)")
    b.add_argument("--threads", type=int, default=1, help="BLAS thread count")
    b.add_argument("--warmup", type=int, default=1, help="untimed warm-up runs")
    b.add_argument("--json", action="store_true", help="machine-readable output")
    return p


def _subparsers(parser: argparse.ArgumentParser) -> dict:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """Parse flags; values from ``--config`` act as defaults that flags override."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        try:
            cfg = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as e:
            parser.error(f"cannot read config {args.config}: {e}")
        if not isinstance(cfg, dict):
            parser.error("config file must hold a JSON object")
        sp = _subparsers(parser)[args.command]
        known = {a.dest for a in sp._actions} | {a.dest for a in parser._actions}
        unknown = set(cfg) - known
        if unknown:
            parser.error(f"unknown config keys: {sorted(unknown)}")
        for key in ("res",):
            if key in cfg and isinstance(cfg[key], str):
                cfg[key] = _resolution(cfg[key])
        sp.set_defaults(**{k: v for k, v in cfg.items() if any(a.dest == k for a in sp._actions)})
        parser.set_defaults(**{k: v for k, v in cfg.items() if any(a.dest == k for a in parser._actions)})
        args = parser.parse_args(argv)
    return args


# ---------------------------------------------------------------- commands


def cmd_synth_data(args) -> int:
    if args.count < 1 or args.size < 1:
        raise UsageError("--count and --size must be positive")
    if args.psf_size % 2 == 0:
        raise UsageError("--psf-size must be odd")
    psf = D.synth_psf(args.psf, args.psf_size, args.psf_sigma)
    try:
        manifest = D.write_dataset(args.out, args.count, args.seed, args.size, psf, args.noise, args.saturation,
                                   args.depth)
    except OSError as e:
        print(f"udcnet: cannot write dataset to {args.out}: {e}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {args.count} pairs and {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    spec = _spec_from(args)
    try:
        pairs = D.load_pairs(args.data)
    except (OSError, ValueError) as e:
        print(f"udcnet: cannot load dataset: {e}", file=sys.stderr)
        return EXIT_IO
    model = build_model(spec, seed=args.seed)
    name = spec.kind + ("+attn" if spec.with_attention_branch else "")
    print(f"model {name} params {model.num_params():,} pairs {len(pairs)} steps {args.steps}", flush=True)
    cfg = TrainConfig(lr_init=args.lr, lr_min=args.lr_min, plateau_patience=args.patience,
                      batch_size=args.batch_size, max_steps=args.steps, seed=args.seed,
                      val_fraction=args.val_fraction, steps_per_epoch=args.steps_per_epoch,
                      augment=not args.no_augment, checkpoint_every=args.checkpoint_every,
                      checkpoint_path=str(args.out) if args.checkpoint_every else None)
    log_path = args.log or args.out.with_name(args.out.name + ".log.jsonl")

    def progress(rec):
        if rec["step"] % 50 == 0:
            log.info("step %d total %.4f psnr %.2f lr %.2g", rec["step"], rec["total"], rec["psnr"], rec["lr"])

    try:
        weights, tlog = train(model, pairs, cfg, on_step=progress)
    except NumericalError as e:
        print(f"udcnet: training aborted: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    try:
        save_weights(weights, args.out)
        tlog.write(log_path)
    except OSError as e:
        print(f"udcnet: cannot write outputs: {e}", file=sys.stderr)
        return EXIT_IO
    last = tlog.steps[-1] if tlog.steps else {}
    print(f"saved {args.out}; final total {last.get('total', float('nan')):.4f}")
    return EXIT_OK


def _inputs(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() in (".ppm", ".pgm", ".pnm"))
    return [path]


def restore_array(model, image: np.ndarray, pad: str = "auto") -> np.ndarray:
    """Restore one (1, 3, h, w) tone-mapped image, padding/cropping as needed."""
    eps = model.spec.clip_epsilon
    x = np.clip(image, 0.0, 1.0 - eps).astype(next(iter(model.params.values())).dtype)
    size = x.shape[2:]
    if pad == "auto":
        x, size = D.pad_to_multiple(x, model.spec.divisor)
    with no_grad():
        out = model.forward(Tensor(x)).data
    return D.crop_to(out, size)


def cmd_restore(args) -> int:
    try:
        expected = None
        if args.model is not None:
            expected = _spec_from(args)
        weights = load_weights(args.weights, expected)
    except WeightFormatError as e:
        print(f"udcnet: {args.weights}: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    model = model_from_weights(weights)
    files = _inputs(args.inputs)
    if not files:
        raise UsageError(f"no images found in {args.inputs}")
    args.out.mkdir(parents=True, exist_ok=True)

    def one(path: Path):
        try:
            img = D.load_image(path)
        except D.ImageFormatError as e:
            return path, f"skipped ({e})"
        if img.shape[1] != 3:
            return path, "skipped (not RGB)"
        d = model.spec.divisor
        if args.pad == "none" and (img.shape[2] % d or img.shape[3] % d):
            return path, f"skipped (size not a multiple of {d}; use --pad auto)"
        out = restore_array(model, img, args.pad)
        D.save_image(out, args.out / (path.stem + ".ppm"), args.depth)
        return path, "ok"

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        results = list(pool.map(one, files))
    written = 0
    for path, status in results:
        written += status == "ok"
        if status != "ok":
            print(f"{path}: {status}", file=sys.stderr)
    print(f"restored {written} of {len(files)} images into {args.out}")
    return EXIT_OK if written else EXIT_IO


def cmd_analyze(args) -> int:
    spec = _spec_from(args)
    reports = []
    for res in args.res or [(256, 256)]:
        try:
            reports.append(A.analyze(spec, res))
        except ValueError as e:
            raise UsageError(str(e)) from None
    if args.json:
        print(A.render_report(reports, "json"))
        return EXIT_OK
    print(A.render_report(reports, "table"))
    for r in reports:
        print(f"{r.model_id} @ {r.resolution[0]}x{r.resolution[1]}: {r.total_flops / 1e9:.3f} GFLOPs "
              f"({r.convention}), {r.total_params:,} params")
        if args.both_conventions:
            print(f"    MAC convention: {r.total_flops_mac_convention / 1e9:.3f} GFLOPs")
        if args.layers:
            for row in r.rows:
                print(f"    {row.path:<32} {row.kind:<16} {row.params:>9,} {row.flops:>15,}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.runs < 5:
        raise UsageError("--runs must be at least 5")
    spec = _spec_from(args)
    d = spec.divisor
    if args.res[0] % d or args.res[1] % d:
        raise UsageError(f"--res must be a multiple of {d} for {spec.kind}")
    model = build_model(spec, seed=args.seed)
    report = A.benchmark(model, args.res, args.runs, args.threads, args.warmup, args.seed)
    if args.json:
        print(A.render_report([report], "json"))
    else:
        print(A.render_report([report], "table"))
        for i, t in enumerate(report.times):
            print(f"run {i}: {t:.4f} s")
    return EXIT_OK if report.ok else EXIT_NUMERIC


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "restore": cmd_restore,
    "analyze": cmd_analyze,
    "bench": cmd_bench,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"udcnet {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
