"""ICKP model checkpoints.

Layout (little-endian)::

    magic "ICKP" | u16 version | u32 meta length | meta (UTF-8 JSON)
    u32 block count
    per block: u16 name length | name | u8 ndim | u32 dims... | f64 data
    u32 CRC32 of everything before it

The JSON metadata holds the model configuration, every head's task id,
classes and prototype-to-class assignment, and optional compensation biases.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import protonet as pn

MAGIC = b"ICKP"
VERSION = 1
_HEAD = struct.Struct("<4sHI")


class CheckpointError(ValueError):
    pass


def _config_meta(config: pn.ModelConfig) -> dict:
    meta = asdict(config)
    meta["image_shape"] = list(config.image_shape)
    meta["backbone"] = [asdict(s) for s in config.backbone]
    return meta


def _config_from_meta(meta: dict) -> pn.ModelConfig:
    meta = dict(meta)
    meta["image_shape"] = tuple(meta["image_shape"])
    meta["backbone"] = tuple(pn.ConvSpec(**s) for s in meta["backbone"])
    return pn.ModelConfig(**meta)


def checkpoint_bytes(model, compensation: list[float] | None = None, extra: dict | None = None) -> bytes:
    m = pn._as_model(model)
    meta = {
        "config": _config_meta(m.config),
        "heads": [
            {"task_id": h.task_id, "classes": list(h.classes), "assignment": h.assignment.astype(int).tolist()}
            for h in m.heads
        ],
        "compensation": None if compensation is None else [float(c) for c in compensation],
        "extra": extra or {},
    }
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = bytearray(_HEAD.pack(MAGIC, VERSION, len(meta_raw)))
    out += meta_raw
    params = m.named_parameters()
    out += struct.pack("<I", len(params))
    for name, p in params.items():
        raw_name = name.encode("utf-8")
        out += struct.pack("<H", len(raw_name)) + raw_name
        out += struct.pack("<B", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.data.shape)
        out += np.ascontiguousarray(p.data, dtype="<f8").tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def parse_checkpoint(raw: bytes):
    """Returns (model, compensation biases or None, extra metadata)."""
    if len(raw) < _HEAD.size + 8:
        raise CheckpointError("truncated checkpoint")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    magic, version, meta_len = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if crc != zlib.crc32(raw[:-4]):
        raise CheckpointError("checksum mismatch")
    pos = _HEAD.size
    try:
        meta = json.loads(raw[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        blocks = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if pos + 8 * size > len(raw) - 4:
                raise CheckpointError(f"block {name!r} runs past the end of the file")
            blocks[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(shape)
            pos += 8 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None

    config = _config_from_meta(meta["config"])
    model = pn.IcicleModel(config, seed=0)
    for head in meta["heads"]:
        name = f"head{head['task_id']}.prototypes"
        if name not in blocks:
            raise CheckpointError(f"missing block {name}")
        h = model.add_head(head["classes"], blocks[name])
        if not np.array_equal(h.assignment, np.asarray(head["assignment"], dtype=np.float64)):
            raise CheckpointError(f"head {head['task_id']} has a non-default prototype assignment")
    params = model.named_parameters()
    if set(params) != set(blocks):
        raise CheckpointError(f"parameter blocks do not match the model: {sorted(set(params) ^ set(blocks))}")
    for name, p in params.items():
        if blocks[name].shape != p.data.shape:
            raise CheckpointError(f"block {name} has shape {blocks[name].shape}, expected {p.data.shape}")
        p.data[...] = blocks[name]
    return model, meta.get("compensation"), meta.get("extra", {})


def save_checkpoint(path, model, compensation=None, extra=None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, compensation, extra))


def load_checkpoint(path):
    return parse_checkpoint(Path(path).read_bytes())


def params_equal(a, b) -> bool:
    pa, pb = pn._as_model(a).named_parameters(), pn._as_model(b).named_parameters()
    return pa.keys() == pb.keys() and all(np.array_equal(pa[k].data, pb[k].data) for k in pa)

