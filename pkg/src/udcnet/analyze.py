"""Parameter / FLOPs cost model and wall-clock latency benchmarking.

FLOPs follow the 2 x multiply-accumulate convention for convolutions.
Cheap ops are counted too: 1 FLOP per element for activations, clipping,
pooling inputs and elementwise add/mul; 2 per element for batch norm; 8 per
output element for bilinear resampling. Concatenation is free.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .models import Model, ModelSpec
from .tensor import Tensor

CONVENTION = "2xMAC"
LEGEND = ("conv: 2 FLOPs per multiply-accumulate; activations/clip/add/mul/pool: 1 per element; "
          "batch norm: 2 per element; bilinear resize: 8 per output element; concat: 0")


@dataclass
class CostRow:
    path: str
    kind: str
    params: int
    macs: int = 0
    other_flops: int = 0

    @property
    def flops(self) -> int:
        return 2 * self.macs + self.other_flops


@dataclass
class CostReport:
    model_id: str
    resolution: tuple
    rows: list = field(default_factory=list)
    convention: str = CONVENTION

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_flops(self) -> int:
        return sum(r.flops for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def total_flops_mac_convention(self) -> int:
        """Alternative reading where one multiply-accumulate counts as one FLOP."""
        return sum(r.macs + r.other_flops for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "type": "cost",
            "model_id": self.model_id,
            "resolution": list(self.resolution),
            "convention": self.convention,
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "total_flops_mac_convention": self.total_flops_mac_convention,
            "rows": [asdict(r) for r in self.rows],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CostReport":
        return cls(d["model_id"], tuple(d["resolution"]), [CostRow(**r) for r in d["rows"]], d["convention"])


# ---------------------------------------------------------------- walker


class _Walker:
    """Closed-form cost of each layer, derived from the ModelSpec alone."""

    def __init__(self, n: int = 1):
        self.n = n
        self.rows: list[CostRow] = []

    def conv(self, path, ci, co, k, h, w, stride=1, bias=True, shared=False):
        ho, wo = (h + 2 * (k // 2) - k) // stride + 1, (w + 2 * (k // 2) - k) // stride + 1
        params = 0 if shared else co * ci * k * k + (co if bias else 0)
        self.rows.append(CostRow(path, f"conv{k}x{k}", params, macs=self.n * co * ci * k * k * ho * wo))
        return ho, wo

    def dwconv(self, path, c, k, h, w, stride=1):
        ho, wo = (h + 2 * (k // 2) - k) // stride + 1, (w + 2 * (k // 2) - k) // stride + 1
        self.rows.append(CostRow(path, f"dwconv{k}x{k}", c * k * k + c, macs=self.n * c * k * k * ho * wo))
        return ho, wo

    def op(self, path, kind, elements, per=1, params=0):
        self.rows.append(CostRow(path, kind, params, other_flops=self.n * per * elements))

    def drm(self, path, c, h, w, layers, growth, bn):
        hw = h * w
        for k in range(layers):
            self.conv(f"{path}.dense{k}", c + k * growth, growth, 3, h, w, bias=not bn)
            if bn:
                self.op(f"{path}.bn{k}", "batch_norm", growth * hw, per=2, params=2 * growth)
            self.op(f"{path}.relu{k}", "relu", growth * hw)
        self.conv(f"{path}.fusion", c + layers * growth, c, 1, h, w)
        self.op(f"{path}.residual", "add", c * hw)

    def cbam(self, path, c, reduction, ksize, h, w):
        hid = c // reduction
        hw = h * w
        for mode in ("avg", "max"):
            self.op(f"{path}.pool_{mode}", "global_pool", c * hw)
            # one MLP serves both pooled vectors; count its weights once
            self.conv(f"{path}.mlp1[{mode}]", c, hid, 1, 1, 1, shared=mode == "max")
            self.op(f"{path}.mlp_relu[{mode}]", "relu", hid)
            self.conv(f"{path}.mlp2[{mode}]", hid, c, 1, 1, 1, shared=mode == "max")
        self.op(f"{path}.channel_sum", "add", c)
        self.op(f"{path}.channel_gate", "sigmoid", c)
        self.op(f"{path}.channel_scale", "mul", c * hw)
        self.op(f"{path}.spatial_pool", "channel_pool", 2 * c * hw)
        self.conv(f"{path}.spatial", 2, 1, ksize, h, w, bias=False)
        self.op(f"{path}.spatial_gate", "sigmoid", hw)
        self.op(f"{path}.spatial_scale", "mul", c * hw)

    def inverted_residual(self, path, ci, co, t, stride, h, w):
        hid = ci * t
        self.conv(f"{path}.expand", ci, hid, 1, h, w)
        self.op(f"{path}.relu6a", "relu6", hid * h * w)
        ho, wo = self.dwconv(f"{path}.depthwise", hid, 3, h, w, stride)
        self.op(f"{path}.relu6b", "relu6", hid * ho * wo)
        self.conv(f"{path}.project", hid, co, 1, ho, wo)
        if stride == 1 and ci == co:
            self.op(f"{path}.skip", "add", co * ho * wo)
        return ho, wo

    def resize(self, path, c, h, w):
        self.op(path, "bilinear_resize", c * h * w, per=8)


def layer_costs(spec: ModelSpec, resolution: tuple, batch: int = 1) -> list[CostRow]:
    """Per-layer parameter and FLOP rows for ``spec`` at ``(height, width)``."""
    h, w = resolution
    d = 8 if spec.kind == "drm_udcnet" else 4
    if h < d or w < d or h % d or w % d:
        raise ValueError(f"resolution {h}x{w} invalid for {spec.kind}: needs positive multiples of {d}")
    wk = _Walker(batch)
    L, g = spec.dense_layers, spec.growth
    if spec.kind == "drm_udcnet":
        c1, c2, c3 = spec.stage_widths
        bn = spec.use_batchnorm
        wk.conv("stem", 5, c1, 3, h, w)
        wk.op("stem.relu", "relu", c1 * h * w)
        hh, ww = h, w
        for i, (cin, cout) in enumerate([(c1, c2), (c2, c3), (c3, c3)], 1):
            for j in range(spec.drm_per_block):
                wk.drm(f"e{i}.drm{j}", cin, hh, ww, L, g, bn)
            hh, ww = wk.conv(f"e{i}.down", cin, cout, 3, hh, ww, stride=2)
            wk.op(f"e{i}.down.relu", "relu", cout * hh * ww)
        for i, (cw, skip_c, cnext) in enumerate([(c3, c3, c2), (c2, c2, c1), (c1, c1, c1)], 1):
            for j in range(spec.drm_per_block):
                wk.drm(f"d{i}.drm{j}", cw, hh, ww, L, g, bn)
            hh, ww = 2 * hh, 2 * ww
            wk.resize(f"d{i}.up", cw, hh, ww)
            wk.conv(f"d{i}.fuse", cw + skip_c, cnext, 1, hh, ww)
            wk.op(f"d{i}.fuse.relu", "relu", cnext * hh * ww)
        wk.conv("head", c1, 3, 3, h, w)
        wk.op("head.tanh", "tanh", 3 * h * w)
        if spec.with_attention_branch:
            a0, (a1, a2) = spec.base_channels, spec.attn_widths
            wk.conv("attn.stem", 3, a0, 3, h, w)
            wk.op("attn.stem.relu", "relu", a0 * h * w)
            wk.cbam("attn.cbam", a0, spec.cbam_reduction, spec.cbam_kernel, h, w)
            hh, ww = wk.conv("attn.down1", a0, a1, 3, h, w, stride=2)
            wk.op("attn.down1.relu", "relu", a1 * hh * ww)
            hh, ww = wk.conv("attn.down2", a1, a2, 3, hh, ww, stride=2)
            wk.op("attn.down2.relu", "relu", a2 * hh * ww)
            for j in range(spec.attn_drms):
                wk.drm(f"attn.drm{j}", a2, hh, ww, L, g, False)
            for name, ci, co in (("attn.up1", a2, a1), ("attn.up2", a1, a0)):
                hh, ww = 2 * hh, 2 * ww
                wk.resize(f"{name}.resize", ci, hh, ww)
                wk.conv(name, ci, co, 1, hh, ww)
                wk.op(f"{name}.relu", "relu", co * hh * ww)
            wk.conv("attn.out", a0, 3, 3, h, w)
            wk.op("attn.out.sigmoid", "sigmoid", 3 * h * w)
            wk.op("residual_gate", "mul", 3 * h * w)
    else:
        w0, w1 = spec.stage_widths
        t = spec.expand_ratio
        hh, ww = h // 2, w // 2
        wk.resize("down_input", 3, hh, ww)
        wk.conv("stem", 3, w0, 3, hh, ww)
        wk.op("stem.relu", "relu", w0 * hh * ww)
        wk.inverted_residual("enc", w0, w0, t, 1, hh, ww)
        qh, qw = wk.inverted_residual("down", w0, w1, t, 2, hh, ww)
        for j in range(2):
            wk.drm(f"drm{j}", w1, qh, qw, L, g, False)
        wk.resize("up", w1, hh, ww)
        wk.conv("fuse", w1 + w0, w0, 1, hh, ww)
        wk.op("fuse.relu", "relu", w0 * hh * ww)
        wk.inverted_residual("dec", w0, w0, t, 1, hh, ww)
        wk.conv("head", w0, 3, 3, hh, ww)
        wk.op("head.tanh", "tanh", 3 * hh * ww)
        wk.resize("up_residual", 3, h, w)
    wk.op("global_residual", "add", 3 * h * w)
    wk.op("output_clip", "clip", 3 * h * w)
    return wk.rows


def _model_id(spec: ModelSpec) -> str:
    return spec.kind + ("+attn" if spec.with_attention_branch else "")


def analyze(model_or_spec, resolution: tuple) -> CostReport:
    spec = model_or_spec.spec if isinstance(model_or_spec, Model) else model_or_spec
    return CostReport(_model_id(spec), tuple(resolution), layer_costs(spec, tuple(resolution)))


def count_params(model_or_spec) -> int:
    """Exact trainable scalar count (weights, biases, BN affine terms)."""
    if isinstance(model_or_spec, Model):
        return model_or_spec.num_params()
    return sum(r.params for r in layer_costs(model_or_spec, (64, 64)))


def count_flops(model_or_spec, resolution: tuple) -> int:
    return analyze(model_or_spec, resolution).total_flops


def traced_flops(model: Model, resolution: tuple) -> int:
    """FLOPs measured by instrumenting an actual forward pass."""
    total = [0]

    def hook(name, flops):
        total[0] += flops

    dtype = next(iter(model.params.values())).dtype
    x = Tensor(np.full((1, 3) + tuple(resolution), 0.5, dtype=dtype))
    with T.no_grad(), T.count_ops(hook):
        model.forward(x)
    return total[0]


# ------------------------------------------------------------- benchmark


@dataclass
class BenchReport:
    model_id: str
    resolution: tuple
    threads: int
    runs: int
    times: list = field(default_factory=list)
    failure: Optional[str] = None
    flops: Optional[int] = None
    params: Optional[int] = None
    ssim: Optional[float] = None

    @property
    def ok(self) -> bool:
        return self.failure is None

    @property
    def mean(self) -> float:
        return statistics.fmean(self.times) if self.times else float("nan")

    @property
    def std(self) -> float:
        return statistics.pstdev(self.times) if self.times else float("nan")

    @property
    def min(self) -> float:
        return min(self.times) if self.times else float("nan")

    @property
    def max(self) -> float:
        return max(self.times) if self.times else float("nan")

    def to_dict(self) -> dict:
        return {
            "type": "bench",
            "model_id": self.model_id,
            "resolution": list(self.resolution),
            "threads": self.threads,
            "runs": self.runs,
            "times": list(self.times),
            "mean": self.mean if self.ok else None,
            "std": self.std if self.ok else None,
            "min": self.min if self.ok else None,
            "max": self.max if self.ok else None,
            "failure": self.failure,
            "flops": self.flops,
            "params": self.params,
            "ssim": self.ssim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BenchReport":
        return cls(d["model_id"], tuple(d["resolution"]), d["threads"], d["runs"], list(d["times"]),
                   d.get("failure"), d.get("flops"), d.get("params"), d.get("ssim"))


def _thread_limit(threads: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - threadpoolctl ships with scipy stacks
        import contextlib

        return contextlib.nullcontext()
    return threadpool_limits(limits=threads)


def benchmark(model: Model, resolution: tuple, runs: int = 5, threads: int = 1, warmup: int = 1,
              seed: int = 0) -> BenchReport:
    """Time ``runs`` inference passes after ``warmup`` untimed ones."""
    if runs < 5:
        raise ValueError(f"benchmark needs at least 5 timed runs, got {runs}")
    if threads < 1 or warmup < 0:
        raise ValueError("threads must be >= 1 and warmup >= 0")
    report = BenchReport(_model_id(model.spec), tuple(resolution), threads, runs,
                         flops=count_flops(model, resolution), params=model.num_params())
    dtype = next(iter(model.params.values())).dtype
    try:
        x = Tensor(np.random.default_rng(seed).random((1, 3) + tuple(resolution)).astype(dtype))
        with _thread_limit(threads), T.no_grad():
            for _ in range(warmup):
                model.forward(x)
            for _ in range(runs):
                t0 = time.perf_counter()
                model.forward(x)
                report.times.append(time.perf_counter() - t0)
    except MemoryError:
        report.times.clear()
        report.failure = "out of memory"
    return report


# ---------------------------------------------------------------- render


def _sort_key(r) -> tuple:
    flops = r.total_flops if isinstance(r, CostReport) else (r.flops or 0)
    return (flops, r.model_id, tuple(r.resolution))


def render_report(reports: Sequence, fmt: str = "table", metrics: Optional[dict] = None) -> str:
    """Aligned table (rows sorted by FLOPs ascending) or JSON emission.

    ``metrics`` maps model ids to an SSIM value and adds a params / FLOPs /
    SSIM summary block to the table.
    """
    if not reports:
        raise ValueError("render_report needs at least one report")
    ordered = sorted(reports, key=_sort_key)
    if fmt in ("json", "machine"):
        return json.dumps({"convention": CONVENTION, "legend": LEGEND,
                           "reports": [r.to_dict() for r in ordered]}, indent=2, sort_keys=True)
    if fmt != "table":
        raise ValueError(f"unknown format {fmt!r}")
    lines = []
    costs = [r for r in ordered if isinstance(r, CostReport)]
    benches = [r for r in ordered if isinstance(r, BenchReport)]
    if costs:
        head = f"{'model':<18} {'resolution':>11} {'params':>11} {'GFLOPs':>9} {'GFLOPs(MAC)':>12}"
        lines += [head, "-" * len(head)]
        for r in costs:
            res = "x".join(map(str, r.resolution))
            lines.append(f"{r.model_id:<18} {res:>11} {r.total_params:>11,} {r.total_flops / 1e9:>9.3f} "
                         f"{r.total_flops_mac_convention / 1e9:>12.3f}")
    if benches:
        if lines:
            lines.append("")
        head = (f"{'model':<18} {'resolution':>11} {'threads':>7} {'runs':>4} {'mean s':>9} {'std s':>9} "
                f"{'min s':>9} {'max s':>9}")
        lines += [head, "-" * len(head)]
        for r in benches:
            res = "x".join(map(str, r.resolution))
            if r.ok:
                lines.append(f"{r.model_id:<18} {res:>11} {r.threads:>7} {r.runs:>4} {r.mean:>9.4f} "
                             f"{r.std:>9.4f} {r.min:>9.4f} {r.max:>9.4f}")
            else:
                lines.append(f"{r.model_id:<18} {res:>11} {r.threads:>7} {r.runs:>4} FAILED ({r.failure})")
    if metrics and costs:
        lines += ["", f"{'model':<18} {'params (M)':>10} {'GFLOPs':>9} {'SSIM':>6}"]
        for r in costs:
            if r.model_id in metrics:
                lines.append(f"{r.model_id:<18} {r.total_params / 1e6:>10.2f} {r.total_flops / 1e9:>9.3f} "
                             f"{metrics[r.model_id]:>6.3f}")
    lines += ["", f"FLOPs convention: {CONVENTION} ({LEGEND})"]
    return "\n".join(lines)


def parse_reports(text: str) -> list:
    """Inverse of ``render_report(..., fmt="json")``."""
    doc = json.loads(text)
    out = []
    for d in doc["reports"]:
        out.append(CostReport.from_dict(d) if d["type"] == "cost" else BenchReport.from_dict(d))
    return out
