"""Print parameter and FLOPs counts of the default models next to their budgets."""

import argparse

from udcnet.analyze import analyze
from udcnet.models import ModelSpec

PARAM_BUDGETS = {"drm_udcnet": (1.8e6, 2.2e6), "drm_udcnet+attn": (2.6e6, 3.2e6)}
FLOP_TARGETS = {(256, 256): 3e9, (800, 800): 30e9, (1080, 1920): 100e9}


def main() -> None:
    argparse.ArgumentParser(description=__doc__).parse_args()
    for spec in (ModelSpec.drm_udcnet(), ModelSpec.drm_udcnet(attention=True)):
        rep = analyze(spec, (256, 256))
        lo, hi = PARAM_BUDGETS[rep.model_id]
        ok = lo <= rep.total_params <= hi
        print(f"{rep.model_id:<16} params {rep.total_params:>10,}  budget [{lo:,.0f}, {hi:,.0f}]  {'ok' if ok else 'OUT'}")
    base = None
    for res, target in FLOP_TARGETS.items():
        rep = analyze(ModelSpec.ludcnet(), res)
        base = base or (rep.total_flops, res[0] * res[1])
        ratio = (rep.total_flops / base[0]) / (res[0] * res[1] / base[1])
        ok = abs(rep.total_flops - target) <= 0.2 * target
        print(f"ludcnet {res[0]:>4}x{res[1]:<4} {rep.total_flops / 1e9:7.2f} GFLOPs  target {target / 1e9:5.0f} "
              f"+-20%  {'ok' if ok else 'OUT'}  ratio/pixels {ratio:.4f}")


if __name__ == "__main__":
    main()
