"""Tone mapping, patching, augmentation, synthetic UDC degradation and image I/O."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from scipy import ndimage

TONE_K = 0.25
AUGMENTATIONS = ("identity", "hflip", "vflip", "rot90", "rot180", "rot270")


class DomainError(ValueError):
    """Value or type outside the expected radiance domain."""


class ImageFormatError(ValueError):
    """Unreadable or unsupported image file."""


# ------------------------------------------------------------ domain types


@dataclass(frozen=True)
class LinearImage:
    """Scene radiance, shape (1, 3, h, w), values >= 0 (may exceed 1)."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 4:
            raise DomainError(f"LinearImage expects (1, c, h, w), got {self.data.shape}")
        if np.any(self.data < 0):
            raise DomainError("LinearImage values must be non-negative")


@dataclass(frozen=True)
class ToneMappedImage:
    """Tone-mapped image, shape (1, 3, h, w), values in [0, 1)."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 4:
            raise DomainError(f"ToneMappedImage expects (1, c, h, w), got {self.data.shape}")
        if np.any(self.data < 0) or np.any(self.data >= 1):
            raise DomainError("ToneMappedImage values must lie in [0, 1)")


def tone_curve(x: np.ndarray) -> np.ndarray:
    return x / (x + TONE_K)


def inverse_tone_curve(y: np.ndarray) -> np.ndarray:
    return TONE_K * y / (1.0 - y)


def tone_map(x: LinearImage) -> ToneMappedImage:
    """``f(x) = x / (x + 0.25)``."""
    if not isinstance(x, LinearImage):
        raise DomainError(f"tone_map needs a LinearImage, got {type(x).__name__}")
    return ToneMappedImage(tone_curve(x.data))


def inverse_tone_map(y: ToneMappedImage) -> LinearImage:
    if not isinstance(y, ToneMappedImage):
        raise DomainError(f"inverse_tone_map needs a ToneMappedImage, got {type(y).__name__}")
    return LinearImage(inverse_tone_curve(y.data))


# ------------------------------------------------------------- patching


def extract_patches(image: np.ndarray, size: int = 400) -> list[np.ndarray]:
    """Non-overlapping ``size``x``size`` tiles in row-major order."""
    h, w = image.shape[-2:]
    if h % size or w % size:
        raise ValueError(f"extract_patches: {h}x{w} is not divisible into {size}x{size} tiles")
    return [
        image[..., r : r + size, c : c + size].copy()
        for r in range(0, h, size)
        for c in range(0, w, size)
    ]


def reassemble_patches(patches: Sequence[np.ndarray], height: int, width: int) -> np.ndarray:
    size = patches[0].shape[-1]
    per_row = width // size
    if len(patches) != (height // size) * per_row:
        raise ValueError(f"reassemble_patches: {len(patches)} patches do not tile {height}x{width}")
    rows = [np.concatenate(patches[i : i + per_row], axis=-1) for i in range(0, len(patches), per_row)]
    return np.concatenate(rows, axis=-2)


def pad_to_multiple(x: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Reflect-pad the bottom/right edges so h and w divide ``multiple``."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph == 0 and pw == 0:
        return x, (h, w)
    widths = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    mode = "reflect" if h > ph and w > pw else "symmetric"
    return np.pad(x, widths, mode=mode), (h, w)


def crop_to(x: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    return x[..., : size[0], : size[1]]


# ---------------------------------------------------------- augmentation


def apply_transform(x: np.ndarray, name: str) -> np.ndarray:
    """One of the six dihedral transforms in ``AUGMENTATIONS`` on the last two axes."""
    if name == "identity":
        return x
    if name == "hflip":
        return x[..., :, ::-1]
    if name == "vflip":
        return x[..., ::-1, :]
    if name.startswith("rot"):
        return np.rot90(x, int(name[3:]) // 90, axes=(-2, -1))
    raise ValueError(f"unknown transform {name!r}")


def augment(pair: tuple[np.ndarray, np.ndarray], seed: Union[int, np.random.Generator]):
    """Apply one randomly drawn transform to both images of a pair."""
    degraded, clean = pair
    if degraded.shape != clean.shape:
        raise ValueError(f"augment: pair shapes differ {degraded.shape} vs {clean.shape}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    name = AUGMENTATIONS[int(rng.integers(len(AUGMENTATIONS)))]
    return (np.ascontiguousarray(apply_transform(degraded, name)),
            np.ascontiguousarray(apply_transform(clean, name)))


# ------------------------------------------------------------------ PSF


@dataclass(frozen=True)
class PSFKernel:
    """Normalised blur kernel; ``kernel`` is (k, k) or (3, k, k) when per-channel."""

    kernel: np.ndarray
    per_channel: bool = False

    def __post_init__(self):
        k = self.kernel
        if k.ndim != (3 if self.per_channel else 2) or k.shape[-1] != k.shape[-2] or k.shape[-1] % 2 == 0:
            raise ValueError(f"PSF kernel must be square with odd size, got {k.shape}")
        if np.any(k < 0):
            raise ValueError("PSF entries must be non-negative")
        sums = k.sum(axis=(-2, -1))
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ValueError(f"PSF must sum to 1 per channel, got {sums}")

    @property
    def size(self) -> int:
        return self.kernel.shape[-1]

    def for_channel(self, c: int) -> np.ndarray:
        return self.kernel[c] if self.per_channel else self.kernel


def _gaussian2d(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - size // 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma**2))
    return g / g.sum()


def _spikes(size: int, decay: float) -> np.ndarray:
    """Horizontal + vertical ridges through the centre, decaying with distance."""
    r = np.abs(np.arange(size) - size // 2)
    profile = np.exp(-r / decay)
    ridge = np.zeros((size, size))
    c = size // 2
    ridge[c, :] += profile
    ridge[:, c] += profile
    return ridge / ridge.sum()


def synth_psf(kind: str = "gaussian_spikes", size: int = 21, sigma: float = 2.0,
              spike_energy: float = 0.1, per_channel: bool = False) -> PSFKernel:
    """Synthetic display PSF: isotropic Gaussian, optionally with diffraction ridges.

    ``per_channel`` widens the red and narrows the blue kernel (x1.1 / x0.9)
    to mimic wavelength-dependent diffraction.
    """
    if size < 1 or size % 2 == 0:
        raise ValueError(f"PSF size must be odd, got {size}")
    if kind not in ("gaussian", "gaussian_spikes"):
        raise ValueError(f"unknown PSF kind {kind!r}")

    def one(s):
        g = _gaussian2d(size, s)
        if kind == "gaussian_spikes" and size > 1:
            g = (1.0 - spike_energy) * g + spike_energy * _spikes(size, size / 4)
        return g / g.sum()

    if per_channel:
        return PSFKernel(np.stack([one(sigma * f) for f in (1.1, 1.0, 0.9)]), per_channel=True)
    return PSFKernel(one(sigma))


def delta_psf() -> PSFKernel:
    return PSFKernel(np.ones((1, 1)))


# ---------------------------------------------------------- degradation


def blur(x: np.ndarray, psf: PSFKernel) -> np.ndarray:
    """Convolve each channel of (1, c, h, w) with the PSF, mirror-padded at borders."""
    out = np.empty_like(x, dtype=np.float64)
    for c in range(x.shape[1]):
        out[0, c] = ndimage.convolve(x[0, c].astype(np.float64), psf.for_channel(c), mode="mirror")
    return out


def simulate_udc(clean: LinearImage, psf: PSFKernel, noise_sigma: float = 0.01, saturation: float = 4.0,
                 seed: Union[int, np.random.Generator] = 0) -> tuple[ToneMappedImage, ToneMappedImage]:
    """Blur + noise + sensor saturation, returned in the tone-mapped domain as
    ``(degraded, target)``."""
    if not isinstance(clean, LinearImage):
        raise DomainError("simulate_udc needs a LinearImage")
    if noise_sigma < 0 or saturation <= 0:
        raise ValueError("noise_sigma must be >= 0 and saturation > 0")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = clean.data.astype(np.float64)
    y = blur(x, psf)
    if noise_sigma > 0:
        y = y + rng.normal(0.0, noise_sigma, size=y.shape)
    degraded = LinearImage(np.clip(y, 0.0, saturation))
    target = LinearImage(np.clip(x, 0.0, saturation))
    return tone_map(degraded), tone_map(target)


def synthetic_scene(height: int, width: int, seed: Union[int, np.random.Generator] = 0) -> LinearImage:
    """Procedural HDR test scene: smooth background, textured shapes, bright lights."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    yy /= max(height - 1, 1)
    xx /= max(width - 1, 1)
    img = np.empty((3, height, width))
    base = rng.uniform(0.05, 0.35, size=3)
    tilt = rng.uniform(-0.15, 0.15, size=(3, 2))
    for c in range(3):
        img[c] = base[c] + tilt[c, 0] * xx + tilt[c, 1] * yy
    for _ in range(rng.integers(4, 9)):
        color = rng.uniform(0.0, 1.2, size=3)
        cy, cx = rng.uniform(0, 1, size=2)
        ry, rx = rng.uniform(0.05, 0.3, size=2)
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) < ry) & (np.abs(xx - cx) < rx)
        else:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1
        freq = rng.uniform(4, 24)
        angle = rng.uniform(0, np.pi)
        texture = 1.0 + 0.3 * np.sin(2 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy))
        for c in range(3):
            img[c] = np.where(mask, color[c] * texture, img[c])
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        rad = rng.uniform(0.01, 0.04)
        power = rng.uniform(2.0, 8.0)
        spot = power * np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rad**2)))
        img += spot[None] * rng.uniform(0.7, 1.0, size=3)[:, None, None]
    return LinearImage(np.clip(img, 0.0, None)[None])


def make_pair(size: int, seed: Union[int, np.random.Generator], psf: Optional[PSFKernel] = None,
              noise_sigma: float = 0.01, saturation: float = 4.0) -> tuple[np.ndarray, np.ndarray]:
    """One (degraded, target) tone-mapped pair of shape (1, 3, size, size)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    psf = psf if psf is not None else synth_psf()
    scene = synthetic_scene(size, size, rng)
    deg, tgt = simulate_udc(scene, psf, noise_sigma, saturation, rng)
    return deg.data, tgt.data


def make_pairs(count: int, size: int, seed: int, **kw) -> list[tuple[np.ndarray, np.ndarray]]:
    seqs = np.random.SeedSequence(seed).spawn(count)
    return [make_pair(size, np.random.default_rng(s), **kw) for s in seqs]


# --------------------------------------------------------------- image I/O


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError("truncated header")
    return buf[start:pos], pos


def decode_pnm(buf: bytes) -> np.ndarray:
    """Binary PGM (P5) / PPM (P6) bytes -> float array (1, c, h, w) in [0, 1]."""
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported format: magic {magic!r} (expected binary PGM/PPM)")
    pos = 2
    try:
        fields = []
        for _ in range(3):
            tok, pos = _read_token(buf, pos)
            fields.append(int(tok))
    except ValueError as e:
        raise ImageFormatError(f"corrupt header: {e}") from None
    width, height, maxval = fields
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ImageFormatError(f"corrupt header: size {width}x{height}, maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * channels * dtype.itemsize
    raw = buf[pos : pos + need]
    if len(raw) != need:
        raise ImageFormatError(f"truncated pixel data: expected {need} bytes, got {len(raw)}")
    arr = np.frombuffer(raw, dtype=dtype).reshape(height, width, channels)
    return (arr.astype(np.float64) / maxval).transpose(2, 0, 1)[None]


def encode_pnm(x: np.ndarray, depth: int = 16) -> bytes:
    if depth not in (8, 16):
        raise ValueError(f"depth must be 8 or 16, got {depth}")
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError("save_image writes one image at a time")
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError(f"expected (c, h, w) with c in (1, 3), got {arr.shape}")
    maxval = 255 if depth == 8 else 65535
    q = np.rint(np.clip(arr, 0.0, 1.0) * maxval).transpose(1, 2, 0)
    q = q.astype(">u2" if depth == 16 else "u1")
    c, h, w = arr.shape
    header = f"{'P6' if c == 3 else 'P5'}\n{w} {h}\n{maxval}\n".encode()
    return header + q.tobytes()


def load_image(path: Union[str, os.PathLike]) -> np.ndarray:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise ImageFormatError(f"cannot read {path}: {e}") from None
    try:
        return decode_pnm(buf)
    except ImageFormatError as e:
        raise ImageFormatError(f"{path}: {e}") from None


def save_image(x, path: Union[str, os.PathLike], depth: int = 16) -> None:
    data = x.data if hasattr(x, "data") and not isinstance(x, np.ndarray) else x
    Path(path).write_bytes(encode_pnm(data, depth))


# --------------------------------------------------------------- manifest


def write_manifest(path: Union[str, os.PathLike], pairs: Iterable[tuple[str, str]]) -> None:
    lines = [json.dumps({"degraded": d, "clean": c}, sort_keys=True) for d, c in pairs]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: Union[str, os.PathLike]) -> list[tuple[Path, Path]]:
    """Manifest entries with paths resolved relative to the manifest's folder."""
    path = Path(path)
    root = path.parent
    out = []
    for i, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            out.append((root / rec["degraded"], root / rec["clean"]))
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise ValueError(f"{path}:{i}: bad manifest line ({e})") from None
    if not out:
        raise ValueError(f"{path}: empty manifest")
    return out


def load_pairs(manifest: Union[str, os.PathLike]) -> list[tuple[np.ndarray, np.ndarray]]:
    pairs = []
    for d, c in read_manifest(manifest):
        deg, clean = load_image(d), load_image(c)
        if deg.shape != clean.shape:
            raise ValueError(f"pair {d.name} / {c.name}: shapes differ {deg.shape} vs {clean.shape}")
        pairs.append((deg, clean))
    return pairs


def write_dataset(out_dir: Union[str, os.PathLike], count: int, seed: int, size: int = 128,
                  psf: Optional[PSFKernel] = None, noise_sigma: float = 0.01, saturation: float = 4.0,
                  depth: int = 16) -> Path:
    """Generate ``count`` synthetic pairs as PPM files plus ``manifest.jsonl``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (deg, tgt) in enumerate(make_pairs(count, size, seed, psf=psf, noise_sigma=noise_sigma,
                                              saturation=saturation)):
        dn, cn = f"degraded_{i:04d}.ppm", f"clean_{i:04d}.ppm"
        save_image(deg, out / dn, depth)
        save_image(tgt, out / cn, depth)
        entries.append((dn, cn))
    manifest = out / "manifest.jsonl"
    write_manifest(manifest, entries)
    return manifest
