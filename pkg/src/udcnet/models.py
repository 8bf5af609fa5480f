"""DRM-UDCNet and LUDCNet: builders and forward passes."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import blocks as B
from . import tensor as T
from .blocks import CBAMConfig, DRMConfig, InvertedResidualConfig, sub_params
from .tensor import ShapeError, Tensor

KINDS = ("drm_udcnet", "ludcnet")


@dataclass(frozen=True)
class ModelSpec:
    """Declarative description of a restoration network.

    ``stage_widths`` holds the three encoder widths for DRM-UDCNet and the
    (full-stage, inner-stage) widths for LUDCNet. ``base_channels`` is the
    stem width of the attention branch; ``attn_widths`` are the two deeper
    attention-branch widths.
    """

    kind: str = "drm_udcnet"
    base_channels: int = 32
    stage_widths: tuple = (32, 64, 128)
    drm_per_block: int = 2
    with_attention_branch: bool = False
    clip_epsilon: float = 1e-5
    dense_layers: int = 4
    growth: int = 30
    use_batchnorm: bool = True
    attn_widths: tuple = (64, 128)
    attn_drms: int = 4
    expand_ratio: int = 2
    cbam_reduction: int = 8
    cbam_kernel: int = 7

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        object.__setattr__(self, "attn_widths", tuple(int(w) for w in self.attn_widths))
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "drm_udcnet":
            if len(self.stage_widths) != 3:
                raise ValueError(f"drm_udcnet needs 3 stage widths, got {self.stage_widths}")
            if self.drm_per_block != 2:
                raise ValueError("drm_udcnet uses exactly two DRMs per block")
        else:
            if len(self.stage_widths) != 2:
                raise ValueError(f"ludcnet needs 2 stage widths, got {self.stage_widths}")
            if self.use_batchnorm or self.with_attention_branch:
                raise ValueError("ludcnet has no batch normalisation and no attention branch")
        if any(w < 1 for w in self.stage_widths + self.attn_widths):
            raise ValueError("widths must be positive")
        if len(self.attn_widths) != 2:
            raise ValueError("attn_widths needs two entries")

    @classmethod
    def drm_udcnet(cls, attention: bool = False, **kw) -> "ModelSpec":
        return cls(kind="drm_udcnet", with_attention_branch=attention, **kw)

    @classmethod
    def ludcnet(cls, **kw) -> "ModelSpec":
        kw = {**LUDCNET_DEFAULTS, **kw}
        return cls(kind="ludcnet", **kw)

    @classmethod
    def toy(cls, attention: bool = False) -> "ModelSpec":
        """Small DRM-UDCNet that trains in minutes on one CPU core."""
        return cls(kind="drm_udcnet", with_attention_branch=attention, stage_widths=(8, 16, 16),
                   dense_layers=2, growth=8, base_channels=8, attn_widths=(8, 16), attn_drms=1)

    @property
    def divisor(self) -> int:
        """Input height/width must be a multiple of this."""
        return 8 if self.kind == "drm_udcnet" else 4

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        d["attn_widths"] = list(self.attn_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**{**d, "stage_widths": tuple(d["stage_widths"]), "attn_widths": tuple(d["attn_widths"])})

    def spec_hash(self) -> bytes:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).digest()

    def scaled(self, factor: float) -> "ModelSpec":
        """Copy with every width (stage, growth, attention) multiplied by ``factor``."""
        def s(w):
            return max(1, int(round(w * factor)))
        return replace(self, stage_widths=tuple(s(w) for w in self.stage_widths), growth=s(self.growth),
                       base_channels=s(self.base_channels), attn_widths=tuple(s(w) for w in self.attn_widths))


LUDCNET_DEFAULTS = dict(stage_widths=(32, 64), growth=28, dense_layers=4, expand_ratio=4,
                        use_batchnorm=False, base_channels=32)


@dataclass
class Model:
    spec: ModelSpec
    params: dict = field(default_factory=dict)

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        if self.spec.kind == "drm_udcnet":
            return forward_restore(self, x, training)
        return forward_ludcnet(self, x, training)

    __call__ = forward

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def num_params(self) -> int:
        return B.param_count(self.params)


# --------------------------------------------------------------- builders


def _drm_cfg(spec: ModelSpec, c: int) -> DRMConfig:
    return DRMConfig(c, spec.dense_layers, spec.growth, spec.use_batchnorm)


def _cbam_cfg(spec: ModelSpec) -> CBAMConfig:
    return CBAMConfig(spec.base_channels, spec.cbam_reduction, spec.cbam_kernel)


def _ir_cfg(spec: ModelSpec, cin: int, cout: int, stride: int) -> InvertedResidualConfig:
    return InvertedResidualConfig(cin, cout, spec.expand_ratio, stride)


def _add(params: dict, prefix: str, p: dict) -> None:
    for k, v in p.items():
        params[f"{prefix}.{k}"] = v


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Model:
    if spec.kind == "drm_udcnet":
        return build_drm_udcnet(spec, seed, dtype)
    return build_ludcnet(spec, seed, dtype)


def build_drm_udcnet(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Model:
    if spec.kind != "drm_udcnet":
        raise ValueError(f"build_drm_udcnet got spec of kind {spec.kind!r}")
    rng = np.random.default_rng(seed)
    c1, c2, c3 = spec.stage_widths
    p: dict[str, Tensor] = {}
    _add(p, "stem", B.conv_init(rng, c1, 5, 3, True, dtype))
    enc = [(c1, c2), (c2, c3), (c3, c3)]
    for i, (cin, cout) in enumerate(enc, 1):
        for j in range(spec.drm_per_block):
            _add(p, f"e{i}.drm{j}", B.init_drm(_drm_cfg(spec, cin), rng, dtype))
        _add(p, f"e{i}.down", B.init_downsample(cin, cout, rng, dtype))
    # decoder i works at width dec[i]; after upsampling it fuses with the
    # matching encoder skip into the next decoder's width
    dec = [(c3, c3, c2), (c2, c2, c1), (c1, c1, c1)]
    for i, (cw, skip_c, cnext) in enumerate(dec, 1):
        for j in range(spec.drm_per_block):
            _add(p, f"d{i}.drm{j}", B.init_drm(_drm_cfg(spec, cw), rng, dtype))
        _add(p, f"d{i}.fuse", B.conv_init(rng, cnext, cw + skip_c, 1, True, dtype))
    _add(p, "head", B.conv_init(rng, 3, c1, 3, True, dtype, gain=0.1))
    if spec.with_attention_branch:
        _init_attention(p, spec, rng, dtype)
    return Model(spec, p)


def _init_attention(p: dict, spec: ModelSpec, rng, dtype) -> None:
    a0 = spec.base_channels
    a1, a2 = spec.attn_widths
    _add(p, "attn.stem", B.conv_init(rng, a0, 3, 3, True, dtype))
    _add(p, "attn.cbam", B.init_cbam(_cbam_cfg(spec), rng, dtype))
    _add(p, "attn.down1", B.init_downsample(a0, a1, rng, dtype))
    _add(p, "attn.down2", B.init_downsample(a1, a2, rng, dtype))
    for j in range(spec.attn_drms):
        _add(p, f"attn.drm{j}", B.init_drm(DRMConfig(a2, spec.dense_layers, spec.growth, False), rng, dtype))
    _add(p, "attn.up1", B.conv_init(rng, a1, a2, 1, True, dtype))
    _add(p, "attn.up2", B.conv_init(rng, a0, a1, 1, True, dtype))
    _add(p, "attn.out", B.conv_init(rng, 3, a0, 3, True, dtype, gain=1.0))


def build_ludcnet(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Model:
    if spec.kind != "ludcnet":
        raise ValueError(f"build_ludcnet got spec of kind {spec.kind!r}")
    rng = np.random.default_rng(seed)
    w0, w1 = spec.stage_widths
    p: dict[str, Tensor] = {}
    _add(p, "stem", B.conv_init(rng, w0, 3, 3, True, dtype))
    _add(p, "enc", B.init_inverted_residual(_ir_cfg(spec, w0, w0, 1), rng, dtype))
    _add(p, "down", B.init_inverted_residual(_ir_cfg(spec, w0, w1, 2), rng, dtype))
    for j in range(2):
        _add(p, f"drm{j}", B.init_drm(DRMConfig(w1, spec.dense_layers, spec.growth, False), rng, dtype))
    _add(p, "fuse", B.conv_init(rng, w0, w1 + w0, 1, True, dtype))
    _add(p, "dec", B.init_inverted_residual(_ir_cfg(spec, w0, w0, 1), rng, dtype))
    _add(p, "head", B.conv_init(rng, 3, w0, 3, True, dtype, gain=0.1))
    return Model(spec, p)


# ---------------------------------------------------------------- forward


def _check_input(model: Model, x: Tensor) -> None:
    T._require_4d(x, model.spec.kind)
    if x.shape[1] != 3:
        raise ShapeError(f"{model.spec.kind}: expected a 3-channel image, got {x.shape[1]} channels")
    d = model.spec.divisor
    h, w = x.shape[2:]
    if h % d or w % d:
        raise ShapeError(
            f"{model.spec.kind}: height and width must be multiples of {d}, got {h}x{w}; "
            "pad the input first (see udcnet.data.pad_to_multiple)"
        )


def _conv(x, p, prefix, stride=1):
    return B.conv(x, sub_params(p, prefix), stride)


def _drm(x, model, prefix, c, training):
    return B.drm_forward(x, sub_params(model.params, prefix), _drm_cfg(model.spec, c), training)


def restoration_residual(model: Model, x: Tensor, training: bool = False) -> Tensor:
    """Main branch of DRM-UDCNet: tanh-activated 3-channel residual."""
    spec, p = model.spec, model.params
    c1, c2, c3 = spec.stage_widths
    h = T.relu(_conv(B.coord_conv_augment(x), p, "stem"))
    skips = []
    for i, c in enumerate((c1, c2, c3), 1):
        for j in range(spec.drm_per_block):
            h = _drm(h, model, f"e{i}.drm{j}", c, training)
        skips.append(h)
        h = B.downsample(h, sub_params(p, f"e{i}.down"))
    for i, c in enumerate((c3, c2, c1), 1):
        for j in range(spec.drm_per_block):
            h = _drm(h, model, f"d{i}.drm{j}", c, training)
        h = T.bilinear_resize(h, 2)
        h = T.relu(_conv(T.concat_channels([h, skips[3 - i]]), p, f"d{i}.fuse"))
    return T.tanh(_conv(h, p, "head"))


def attention_branch_forward(model: Model, x: Tensor) -> Tensor:
    """Per-channel attention map in (0, 1) computed from the degraded input."""
    spec, p = model.spec, model.params
    if not spec.with_attention_branch:
        raise ValueError("model was built without an attention branch")
    T._require_4d(x, "attention_branch_forward")
    if x.shape[1] != 3:
        raise ShapeError(f"attention_branch_forward: expected 3 channels, got {x.shape[1]}")
    h = T.relu(_conv(x, p, "attn.stem"))
    h = B.cbam_forward(h, sub_params(p, "attn.cbam"), _cbam_cfg(spec))
    h = B.downsample(h, sub_params(p, "attn.down1"))
    h = B.downsample(h, sub_params(p, "attn.down2"))
    a2 = spec.attn_widths[1]
    for j in range(spec.attn_drms):
        h = B.drm_forward(h, sub_params(p, f"attn.drm{j}"), DRMConfig(a2, spec.dense_layers, spec.growth, False))
    h = T.relu(_conv(T.bilinear_resize(h, 2), p, "attn.up1"))
    h = T.relu(_conv(T.bilinear_resize(h, 2), p, "attn.up2"))
    return T.sigmoid(_conv(h, p, "attn.out"))


def forward_restore(model: Model, x: Tensor, training: bool = False) -> Tensor:
    """``clip(x + R * A, 0, 1 - eps)`` for DRM-UDCNet."""
    if model.spec.kind != "drm_udcnet":
        raise ValueError("forward_restore expects a drm_udcnet model; use forward_ludcnet")
    _check_input(model, x)
    r = restoration_residual(model, x, training)
    if model.spec.with_attention_branch:
        r = r * attention_branch_forward(model, x)
    return T.clip(x + r, 0.0, 1.0 - model.spec.clip_epsilon)


def forward_ludcnet(model: Model, x: Tensor, training: bool = False) -> Tensor:
    """Half-resolution body; residual upsampled back and added to the input."""
    spec, p = model.spec, model.params
    if spec.kind != "ludcnet":
        raise ValueError("forward_ludcnet expects a ludcnet model")
    _check_input(model, x)
    w0, w1 = spec.stage_widths
    h = T.bilinear_resize(x, 0.5)
    h = T.relu(_conv(h, p, "stem"))
    skip = B.inverted_residual_forward(h, sub_params(p, "enc"), _ir_cfg(spec, w0, w0, 1))
    h = B.inverted_residual_forward(skip, sub_params(p, "down"), _ir_cfg(spec, w0, w1, 2))
    for j in range(2):
        h = B.drm_forward(h, sub_params(p, f"drm{j}"), DRMConfig(w1, spec.dense_layers, spec.growth, False))
    h = T.bilinear_resize(h, 2)
    h = T.relu(_conv(T.concat_channels([h, skip]), p, "fuse"))
    h = B.inverted_residual_forward(h, sub_params(p, "dec"), _ir_cfg(spec, w0, w0, 1))
    r = T.tanh(_conv(h, p, "head"))
    return T.clip(x + T.bilinear_resize(r, 2), 0.0, 1.0 - spec.clip_epsilon)


def restore(model: Model, x: Tensor, training: bool = False) -> Tensor:
    return model.forward(x, training)


def count_params(model: Model) -> int:
    return model.num_params()


def default_spec(kind: str, attention: Optional[bool] = None) -> ModelSpec:
    if kind == "ludcnet":
        return ModelSpec.ludcnet()
    return ModelSpec.drm_udcnet(attention=bool(attention))
