"""Binary archive of named arrays, used for model checkpoints.

Layout (all integers little-endian):

    magic      4 bytes  b"PCKP"
    version    u32      1
    meta_len   u32      length of the UTF-8 JSON metadata block
    meta       bytes    JSON object (model configuration, seeds, ...)
    count      u32      number of arrays
    per array:
        name_len u16, name (UTF-8)
        dtype    u8     0 = float32, 1 = float64
        ndim     u8
        dims     ndim x u32
        data     row-major little-endian values
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointError
from .net import Classifier, ClassifierConfig

MAGIC = b"PCKP"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def save_archive(path, arrays: dict, meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(arrays))]
    for name, a in arrays.items():
        a = np.asarray(a)
        if a.dtype not in _CODES:
            raise CheckpointError(f"array {name} has unsupported dtype {a.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _CODES[a.dtype], a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.astype(_DTYPES[_CODES[a.dtype]]).tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_archive(path):
    """Returns (arrays, meta)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        if raw[:4] != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint archive")
        version, meta_len = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported archive version {version}")
        off = 12
        meta = json.loads(raw[off:off + meta_len].decode("utf-8"))
        off += meta_len
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        arrays = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, off)
            name = raw[off + 2:off + 2 + n].decode("utf-8")
            off += 2 + n
            code, ndim = struct.unpack_from("<BB", raw, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            dt = _DTYPES[code]
            size = int(np.prod(shape, dtype=np.int64))
            arrays[name] = np.frombuffer(raw, dt, size, off).reshape(shape).astype(dt.newbyteorder("="))
            off += size * dt.itemsize
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt archive ({exc})") from None
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return arrays, meta


def save_model(path, model: Classifier, extra: dict | None = None) -> None:
    meta = {"model": model.cfg.to_dict()}
    meta.update(extra or {})
    save_archive(path, model.state(), meta)


def load_model(path, expect: ClassifierConfig | None = None) -> Classifier:
    """Rebuild a classifier from an archive; ``expect`` guards against config drift."""
    arrays, meta = load_archive(path)
    if "model" not in meta:
        raise CheckpointError(f"{path}: archive has no model configuration")
    cfg = ClassifierConfig(**meta["model"])
    if expect is not None and expect.to_dict() != cfg.to_dict():
        diff = sorted(k for k, v in expect.to_dict().items() if cfg.to_dict().get(k) != v)
        raise CheckpointError(f"checkpoint configuration differs in {', '.join(diff)}")
    model = Classifier(cfg)
    names = set(model.state())
    if names != set(arrays):
        raise CheckpointError(f"{path}: parameter names do not match the configuration")
    for name, ref in model.state().items():
        if arrays[name].shape != ref.shape:
            raise CheckpointError(f"{path}: {name} has shape {arrays[name].shape}, expected {ref.shape}")
    model.load_state(arrays)
    model.eval()
    return model
