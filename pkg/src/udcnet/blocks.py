"""Network building blocks: CoordConv, dense residual module, CBAM,
inverted linear residual block and the strided downsampling unit.

Blocks are plain functions of ``(input, params, config)`` where ``params`` is
a flat mapping of block-local names to tensors. The matching ``init_*``
functions create those mappings.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, MutableMapping, Optional

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

Params = Mapping[str, Tensor]

# BN running statistics live next to the params but are not trained
BN_MEAN = "running_mean"
BN_VAR = "running_var"


@dataclass(frozen=True)
class DRMConfig:
    in_channels: int
    num_dense_layers: int = 4
    growth: int = 16
    use_batchnorm: bool = False

    def __post_init__(self):
        if self.num_dense_layers < 1 or self.growth < 1 or self.in_channels < 1:
            raise ValueError(f"invalid DRMConfig {self}")


@dataclass(frozen=True)
class CBAMConfig:
    channels: int
    reduction: int = 8
    spatial_kernel: int = 7

    def __post_init__(self):
        if self.channels % self.reduction:
            raise ValueError(f"CBAM channels {self.channels} not divisible by reduction {self.reduction}")
        if self.spatial_kernel < 3 or self.spatial_kernel % 2 == 0:
            raise ValueError(f"CBAM spatial_kernel must be odd and >= 3, got {self.spatial_kernel}")


@dataclass(frozen=True)
class InvertedResidualConfig:
    in_channels: int
    out_channels: int
    expand_ratio: int = 2
    stride: int = 1

    @property
    def hidden(self) -> int:
        return self.in_channels * self.expand_ratio

    @property
    def use_skip(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels


def sub_params(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    """Keys under ``prefix.`` with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


def _check_channels(x: Tensor, expected: int, block: str) -> None:
    T._require_4d(x, block)
    if x.shape[1] != expected:
        raise ShapeError(f"{block}: input has {x.shape[1]} channels (dimension 1), expected {expected}")


# ------------------------------------------------------------------ init


def conv_init(rng: np.random.Generator, co: int, ci: int, k: int, bias: bool = True, dtype=np.float32,
              gain: float = 2.0) -> dict[str, Tensor]:
    fan_in = ci * k * k
    w = rng.normal(0.0, np.sqrt(gain / fan_in), size=(co, ci, k, k)).astype(dtype)
    p = {"weight": Tensor(w, requires_grad=True)}
    if bias:
        p["bias"] = Tensor(np.zeros(co, dtype=dtype), requires_grad=True)
    return p


def bn_init(c: int, dtype=np.float32) -> dict[str, Tensor]:
    return {
        "gamma": Tensor(np.ones(c, dtype=dtype), requires_grad=True),
        "beta": Tensor(np.zeros(c, dtype=dtype), requires_grad=True),
        BN_MEAN: Tensor(np.zeros(c, dtype=dtype)),
        BN_VAR: Tensor(np.ones(c, dtype=dtype)),
    }


def _prefixed(prefix: str, p: Mapping[str, Tensor]) -> dict[str, Tensor]:
    return {f"{prefix}.{k}": v for k, v in p.items()}


def init_drm(config: DRMConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    p: dict[str, Tensor] = {}
    c = config.in_channels
    for k in range(config.num_dense_layers):
        cin = c + k * config.growth
        p.update(_prefixed(f"dense{k}", conv_init(rng, config.growth, cin, 3, not config.use_batchnorm, dtype)))
        if config.use_batchnorm:
            p.update(_prefixed(f"bn{k}", bn_init(config.growth, dtype)))
    total = c + config.num_dense_layers * config.growth
    p.update(_prefixed("fusion", conv_init(rng, c, total, 1, True, dtype, gain=1.0)))
    return p


def init_cbam(config: CBAMConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    hidden = config.channels // config.reduction
    p: dict[str, Tensor] = {}
    p.update(_prefixed("mlp1", conv_init(rng, hidden, config.channels, 1, True, dtype)))
    p.update(_prefixed("mlp2", conv_init(rng, config.channels, hidden, 1, True, dtype, gain=1.0)))
    p.update(_prefixed("spatial", conv_init(rng, 1, 2, config.spatial_kernel, False, dtype, gain=1.0)))
    return p


def init_inverted_residual(config: InvertedResidualConfig, rng: np.random.Generator,
                           dtype=np.float32) -> dict[str, Tensor]:
    hid = config.hidden
    p: dict[str, Tensor] = {}
    p.update(_prefixed("expand", conv_init(rng, hid, config.in_channels, 1, True, dtype)))
    dw = rng.normal(0.0, np.sqrt(2.0 / 9), size=(hid, 1, 3, 3)).astype(dtype)
    p["depthwise.weight"] = Tensor(dw, requires_grad=True)
    p["depthwise.bias"] = Tensor(np.zeros(hid, dtype=dtype), requires_grad=True)
    p.update(_prefixed("project", conv_init(rng, config.out_channels, hid, 1, True, dtype, gain=1.0)))
    return p


def init_downsample(cin: int, cout: int, rng: np.random.Generator, dtype=np.float32) -> dict[str, Tensor]:
    return conv_init(rng, cout, cin, 3, True, dtype)


# --------------------------------------------------------------- forward


def conv(x: Tensor, params: Params, stride: int = 1) -> Tensor:
    """Convolution with 'same' zero padding for odd kernels."""
    w = params["weight"]
    return T.conv2d(x, w, params.get("bias"), stride=stride, padding=w.shape[2] // 2)


def coord_conv_augment(x: Tensor) -> Tensor:
    """Append x- and y-coordinate channels spanning [-1, 1]."""
    T._require_4d(x, "coord_conv_augment")
    n, _, h, w = x.shape
    xs = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
    grid = np.empty((n, 2, h, w), dtype=x.dtype)
    grid[:, 0] = xs[None, None, :]
    grid[:, 1] = ys[None, :, None]
    return T.concat_channels([x, Tensor(grid)])


def _bn(x: Tensor, params: Params, training: bool) -> Tensor:
    return T.batch_norm(x, params["gamma"], params["beta"], params[BN_MEAN].data, params[BN_VAR].data, training)


def drm_forward(x: Tensor, params: Params, config: DRMConfig, training: bool = False) -> Tensor:
    """Dense residual module: dense 3x3 stack, 1x1 local fusion, local residual."""
    _check_channels(x, config.in_channels, "drm_forward")
    feats = [x]
    for k in range(config.num_dense_layers):
        inp = feats[0] if k == 0 else T.concat_channels(feats)
        y = conv(inp, sub_params(params, f"dense{k}"))
        if config.use_batchnorm:
            y = _bn(y, sub_params(params, f"bn{k}"), training)
        feats.append(T.relu(y))
    fused = conv(T.concat_channels(feats), sub_params(params, "fusion"))
    return fused + x


def _cbam(x: Tensor, params: Params, config: CBAMConfig) -> tuple[Tensor, Tensor, Tensor]:
    _check_channels(x, config.channels, "cbam_forward")
    mlp1, mlp2 = sub_params(params, "mlp1"), sub_params(params, "mlp2")

    def mlp(z):
        return conv(T.relu(conv(z, mlp1)), mlp2)

    ch_gate = T.sigmoid(mlp(T.global_pool(x, "avg")) + mlp(T.global_pool(x, "max")))
    x1 = x * T.expand(ch_gate, x.shape)
    pooled = T.concat_channels([T.channel_pool(x1, "avg"), T.channel_pool(x1, "max")])
    sp_gate = T.sigmoid(conv(pooled, sub_params(params, "spatial")))
    return x1 * T.expand(sp_gate, x.shape), ch_gate, sp_gate


def cbam_forward(x: Tensor, params: Params, config: CBAMConfig) -> Tensor:
    """Channel attention followed by spatial attention, both sigmoid-gated."""
    return _cbam(x, params, config)[0]


def cbam_gates(x: Tensor, params: Params, config: CBAMConfig) -> tuple[Tensor, Tensor]:
    """Channel gate ``(n,c,1,1)`` and spatial gate ``(n,1,h,w)``."""
    _, ch_gate, sp_gate = _cbam(x, params, config)
    return ch_gate, sp_gate


def inverted_residual_forward(x: Tensor, params: Params, config: InvertedResidualConfig) -> Tensor:
    """1x1 expand + relu6, depthwise 3x3 + relu6, linear 1x1 projection, optional skip."""
    _check_channels(x, config.in_channels, "inverted_residual_forward")
    if config.stride == 2 and (x.shape[2] % 2 or x.shape[3] % 2):
        raise ShapeError(f"inverted_residual_forward: stride 2 needs even spatial size, got {x.shape[2:]}")
    y = T.activation(conv(x, sub_params(params, "expand")), "relu6")
    y = T.depthwise_conv2d(y, params["depthwise.weight"], stride=config.stride, padding=1,
                           bias=params["depthwise.bias"])
    y = T.activation(y, "relu6")
    y = conv(y, sub_params(params, "project"))
    return y + x if config.use_skip else y


def downsample(x: Tensor, params: Params) -> Tensor:
    """Stride-2 3x3 convolution + relu; halves height and width."""
    T._require_4d(x, "downsample")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"downsample: spatial size {x.shape[2:]} must be even; pad the input upstream")
    return T.relu(conv(x, params, stride=2))


def param_count(params: Mapping[str, Tensor], trainable_only: bool = True) -> int:
    return sum(v.size for v in params.values() if v.requires_grad or not trainable_only)


def zero_params(params: MutableMapping[str, Tensor], prefix: Optional[str] = None) -> None:
    """Zero every trainable tensor (optionally only those under ``prefix``)."""
    for k, v in params.items():
        if v.requires_grad and (prefix is None or k.startswith(prefix)):
            v.data[...] = 0
