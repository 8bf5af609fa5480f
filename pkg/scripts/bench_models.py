"""Latency of LUDCNet and DRM-UDCNet over resolutions and thread counts."""

import argparse

from udcnet.analyze import benchmark, render_report
from udcnet.models import ModelSpec, build_model


def resolution(text: str) -> tuple:
    h, w = text.lower().split("x")
    return int(h), int(w)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    ap.add_argument("--res", type=resolution, nargs="+", default=[(256, 256)])
    ap.add_argument("--threads", type=int, nargs="+", default=[1])
    ap.add_argument("--runs", type=int, default=5)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args()

    models = [build_model(ModelSpec.ludcnet()), build_model(ModelSpec.drm_udcnet())]
    reports = [benchmark(m, res, args.runs, t) for m in models for res in args.res for t in args.threads]
    print(render_report(reports, "json" if args.json else "table"))


if __name__ == "__main__":
    main()
