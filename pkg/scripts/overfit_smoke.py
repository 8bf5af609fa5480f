"""Overfit the toy DRM-UDCNet on synthetic pairs and report train-set PSNR."""

import argparse
import time

from udcnet.data import make_pairs
from udcnet.models import ModelSpec, build_model
from udcnet.train import TrainConfig, evaluate, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    ap.add_argument("--pairs", type=int, default=8)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--patience", type=int, default=2, help="plateau patience in epochs")
    ap.add_argument("--steps-per-epoch", type=int, default=25)
    ap.add_argument("--augment", action="store_true")
    ap.add_argument("--attn", action="store_true")
    args = ap.parse_args()

    pairs = make_pairs(args.pairs, args.size, args.seed)
    model = build_model(ModelSpec.toy(args.attn), seed=args.seed)
    cfg = TrainConfig(max_steps=args.steps, seed=args.seed, val_fraction=0.0, steps_per_epoch=args.steps_per_epoch,
                      plateau_patience=args.patience, augment=args.augment)
    t0 = time.perf_counter()

    def progress(rec):
        if rec["step"] % 100 == 0:
            print(f"step {rec['step']:>5}  loss {rec['total']:.4f}  batch PSNR {rec['psnr']:6.2f}  lr {rec['lr']:.2g}  "
                  f"{time.perf_counter() - t0:6.0f} s", flush=True)

    _, log = train(model, pairs, cfg, on_step=progress)
    final = evaluate(model, pairs)
    ratio = log.steps[min(500, len(log.steps) - 1)]["total"] / log.steps[0]["total"]
    print(f"train-set PSNR {final['psnr']:.2f} dB  loss ratio step500/step0 {ratio:.3f}  "
          f"wall-clock {(time.perf_counter() - t0) / 60:.1f} min")


if __name__ == "__main__":
    main()
