"""VFM1 model files: float or int8 mask-network tensors plus a JSON header.

Layout (little-endian)::

    b"VFM1"  u16 version  u32 json_len  json_bytes
    repeated tensor records:
        u16 name_len  name  u8 dtype(0=f32, 1=i8)  u8 rank  rank * u32 dims
        [f32 scale, i8 only]  raw data
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .masknet import MaskNetConfig, MaskNetParams
from .quantizer import QuantTensor

VFM_MAGIC = b"VFM1"
VFM_VERSION = 1
DTYPE_F32 = 0
DTYPE_I8 = 1


@dataclass
class ModelFile:
    params: MaskNetParams
    config: MaskNetConfig
    meta: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)  # non-model tensors, e.g. optimiser moments


def _record(name: str, value) -> bytes:
    nb = name.encode("utf-8")
    if isinstance(value, QuantTensor):
        arr = np.ascontiguousarray(value.values, dtype=np.int8)
        head = struct.pack("<H", len(nb)) + nb + struct.pack("<BB", DTYPE_I8, arr.ndim)
        head += struct.pack(f"<{arr.ndim}I", *arr.shape) + struct.pack("<f", value.scale)
    else:
        arr = np.ascontiguousarray(value, dtype="<f4")
        head = struct.pack("<H", len(nb)) + nb + struct.pack("<BB", DTYPE_F32, arr.ndim)
        head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def encode_model(params: MaskNetParams, cfg: MaskNetConfig, meta: dict | None = None, extra: dict | None = None) -> bytes:
    header = {"config": cfg.to_dict(), "meta": meta or {}, "extra_tensors": sorted(extra or {})}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [VFM_MAGIC, struct.pack("<HI", VFM_VERSION, len(blob)), blob]
    for name, value in params.tensors.items():
        parts.append(_record(name, value))
    for name in sorted(extra or {}):
        parts.append(_record(name, extra[name]))
    return b"".join(parts)


def save_model(path, params: MaskNetParams, cfg: MaskNetConfig, meta: dict | None = None, extra: dict | None = None) -> int:
    """Write a VFM1 file and return its size in bytes."""
    params.check(cfg)
    data = encode_model(params, cfg, meta, extra)
    Path(path).write_bytes(data)
    return len(data)


def decode_model(data: bytes, source: str = "<bytes>") -> ModelFile:
    if data[:4] != VFM_MAGIC:
        raise FormatError(f"{source}: bad magic {data[:4]!r}, expected {VFM_MAGIC!r}")
    try:
        version, jlen = struct.unpack_from("<HI", data, 4)
        if version != VFM_VERSION:
            raise FormatError(f"{source}: unsupported VFM version {version}")
        pos = 10
        header = json.loads(data[pos : pos + jlen].decode("utf-8"))
        pos += jlen
        extra_names = set(header.get("extra_tensors", []))
        tensors, extra = {}, {}
        while pos < len(data):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            dtype, rank = struct.unpack_from("<BB", data, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if dtype == DTYPE_I8:
                (scale,) = struct.unpack_from("<f", data, pos)
                pos += 4
                raw = data[pos : pos + count]
                if len(raw) != count:
                    raise FormatError(f"{source}: truncated tensor {name}")
                value = QuantTensor(np.frombuffer(raw, dtype=np.int8).reshape(dims).copy(), float(scale))
                pos += count
            elif dtype == DTYPE_F32:
                raw = data[pos : pos + 4 * count]
                if len(raw) != 4 * count:
                    raise FormatError(f"{source}: truncated tensor {name}")
                value = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
                pos += 4 * count
            else:
                raise FormatError(f"{source}: tensor {name} has unknown dtype code {dtype}")
            (extra if name in extra_names else tensors)[name] = value
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: corrupt VFM1 file ({exc})") from exc
    try:
        cfg = MaskNetConfig.from_dict(header["config"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{source}: invalid model config ({exc})") from exc
    params = MaskNetParams(tensors)
    try:
        params.check(cfg)
    except ValueError as exc:
        raise FormatError(f"{source}: {exc}") from exc
    return ModelFile(params, cfg, header.get("meta", {}), extra)


def load_model(path) -> ModelFile:
    return decode_model(Path(path).read_bytes(), str(path))


def predicted_size(cfg: MaskNetConfig, quantized: bool) -> int:
    """Byte count of the tensor payload alone (no header or record framing)."""
    total = 0
    for shape in cfg.tensor_shapes().values():
        n = int(np.prod(shape))
        total += n if (quantized and len(shape) >= 2) else 4 * n
    return total
