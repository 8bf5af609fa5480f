"""Binary weight files.

Layout (all integers little-endian)::

    magic        4 bytes   b"UDCW"
    version      u16       1
    endian mark  u32       0x01020304 (bytes 04 03 02 01 on disk)
    spec hash    32 bytes  SHA-256 of the canonical ModelSpec JSON
    meta length  u32
    meta         UTF-8 JSON, sorted keys: {"info": ..., "precision": ..., "spec": ...}
    count        u32       number of tensor records
    records      count x { path length u16, path UTF-8, dtype tag u8 (1=f32, 2=f64),
                           ndim u8, dims u32 x ndim, raw values }
    crc32        u32       CRC-32 of every preceding byte

Records appear in sorted path order, so saving the same weights twice gives
identical bytes.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .models import Model, ModelSpec, build_model

MAGIC = b"UDCW"
VERSION = 1
ENDIAN_MARK = 0x01020304
DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


class WeightFormatError(ValueError):
    """Malformed or truncated weight file."""


class SpecMismatchError(WeightFormatError):
    """Weight file was written for a different ModelSpec."""


@dataclass
class ModelWeights:
    spec: ModelSpec
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    @property
    def spec_hash(self) -> bytes:
        return self.spec.spec_hash()

    @property
    def precision(self) -> str:
        return self.metadata.get("precision", "float32")


def weights_of(model: Model, info: Optional[dict] = None) -> ModelWeights:
    tensors = {k: v.data for k, v in model.params.items()}
    dtypes = {a.dtype for a in tensors.values()}
    precision = "float64" if np.dtype(np.float64) in dtypes else "float32"
    return ModelWeights(model.spec, tensors, {"precision": precision, "info": info or {}})


def encode(weights: ModelWeights) -> bytes:
    meta = {"spec": weights.spec.to_dict(), "precision": weights.precision,
            "info": weights.metadata.get("info", {})}
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<HI", VERSION, ENDIAN_MARK), weights.spec_hash,
             struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(weights.tensors))]
    for path in sorted(weights.tensors):
        arr = np.asarray(weights.tensors[path])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        tag = DTYPE_TAGS.get(le.dtype)
        if tag is None:
            raise WeightFormatError(f"{path}: unsupported dtype {arr.dtype}")
        pb = path.encode()
        parts.append(struct.pack("<H", len(pb)) + pb + struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(le).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise WeightFormatError(f"truncated file while reading {what} at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes, expected: Optional[ModelSpec] = None) -> ModelWeights:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise WeightFormatError("not a weight file (bad magic)")
    version, = r.unpack("<H", "version")
    if version != VERSION:
        raise WeightFormatError(f"unsupported format version {version}")
    mark_bytes = r.take(4, "endianness marker")
    if struct.unpack("<I", mark_bytes)[0] != ENDIAN_MARK:
        raise WeightFormatError(f"endianness marker mismatch: {mark_bytes.hex()}")
    stored_hash = r.take(32, "spec hash")
    if expected is not None and expected.spec_hash() != stored_hash:
        raise SpecMismatchError("weight file was written for a different model spec")
    meta_len, = r.unpack("<I", "metadata length")
    meta_raw = r.take(meta_len, "metadata")
    try:
        meta = json.loads(meta_raw.decode())
        spec = ModelSpec.from_dict(meta["spec"])
    except (ValueError, KeyError, TypeError) as e:
        raise WeightFormatError(f"corrupt metadata: {e}") from None
    if spec.spec_hash() != stored_hash:
        raise SpecMismatchError("embedded spec does not match the stored spec hash")
    count, = r.unpack("<I", "record count")
    tensors = {}
    for _ in range(count):
        plen, = r.unpack("<H", "path length")
        path = r.take(plen, "path").decode()
        tag, ndim = r.unpack("<BB", f"{path} header")
        if tag not in TAG_DTYPES:
            raise WeightFormatError(f"{path}: unknown dtype tag {tag}")
        shape = r.unpack(f"<{ndim}I", f"{path} shape")
        dtype = TAG_DTYPES[tag]
        n = int(np.prod(shape)) * dtype.itemsize
        arr = np.frombuffer(r.take(n, f"{path} values"), dtype=dtype).reshape(shape)
        tensors[path] = arr.astype(dtype.newbyteorder("="))
    crc_pos = r.pos
    crc, = r.unpack("<I", "checksum")
    if zlib.crc32(buf[:crc_pos]) != crc:
        raise WeightFormatError("checksum mismatch")
    if r.pos != len(buf):
        raise WeightFormatError(f"{len(buf) - r.pos} trailing bytes after checksum")
    return ModelWeights(spec, tensors, {"precision": meta.get("precision", "float32"), "info": meta.get("info", {})})


def save_weights(model: Union[Model, ModelWeights], path: Union[str, os.PathLike],
                 info: Optional[dict] = None) -> None:
    w = model if isinstance(model, ModelWeights) else weights_of(model, info)
    Path(path).write_bytes(encode(w))


def load_weights(path: Union[str, os.PathLike], expected: Optional[ModelSpec] = None) -> ModelWeights:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise WeightFormatError(f"cannot read {path}: {e}") from None
    return decode(buf, expected)


def apply_weights(model: Model, weights: ModelWeights) -> Model:
    """Copy stored values into ``model``; every layer path must match exactly."""
    if weights.spec_hash != model.spec.spec_hash():
        raise SpecMismatchError("weights belong to a different model spec")
    missing = set(model.params) - set(weights.tensors)
    extra = set(weights.tensors) - set(model.params)
    if missing or extra:
        raise WeightFormatError(f"layer mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
    for k, t in model.params.items():
        arr = weights.tensors[k]
        if arr.shape != t.shape:
            raise WeightFormatError(f"{k}: stored shape {arr.shape} != model shape {t.shape}")
        t.data = arr.copy()
    return model


def model_from_weights(weights: ModelWeights) -> Model:
    dtype = np.float64 if weights.precision == "float64" else np.float32
    return apply_weights(build_model(weights.spec, dtype=dtype), weights)

