"""Bit-exact binary checkpoints.

Layout (all integers little-endian)::

    b"MERA"  u8 version  u32 meta_len  meta (UTF-8 JSON)
    repeated:  u16 name_len  name (UTF-8)  u8 rank  u32 extent * rank  f32 values
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from mera.errors import FormatError, VersionError
from mera.model import ModelDims, MultimodalModel
from mera.nnkernel import ParameterSet

MAGIC = b"MERA"
VERSION = 1


def encode(params: ParameterSet, metadata: dict) -> bytes:
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [MAGIC, struct.pack("<BI", VERSION, len(meta)), meta]
    for name, value in params.items():
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", value.ndim))
        out.append(struct.pack(f"<{value.ndim}I", *value.shape))
        out.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(out)


def decode(buf: bytes) -> tuple[ParameterSet, dict]:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint while reading {what}", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic bytes", 0)
    (version,) = struct.unpack("<B", take(1, "version"))
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {VERSION})", 4)
    (meta_len,) = struct.unpack("<I", take(4, "metadata length"))
    meta_at = pos
    try:
        metadata = json.loads(take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable metadata: {exc}", meta_at) from None
    params = ParameterSet()
    while pos < len(buf):
        rec_at = pos
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("parameter name is not UTF-8", rec_at + 2) from None
        (rank,) = struct.unpack("<B", take(1, f"rank of {name}"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"extents of {name}"))
        if rank == 0 or 0 in shape:
            raise FormatError(f"{name}: non-positive shape {shape}", rec_at)
        count = int(np.prod(shape))
        data = np.frombuffer(take(4 * count, f"values of {name}"), dtype="<f4")
        try:
            params.add(name, data.reshape(shape).astype(np.float32))
        except KeyError:
            raise FormatError(f"duplicate parameter {name!r}", rec_at) from None
    return params, metadata


def save_checkpoint(path: str | Path, model: MultimodalModel, metadata: dict | None = None) -> None:
    meta = dict(metadata or {})
    meta["model"] = model_layout(model)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(model.params, meta))
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> tuple[MultimodalModel, dict]:
    params, meta = decode(Path(path).read_bytes())
    layout = meta.get("model")
    if layout is None:
        raise FormatError("metadata has no model layout", 9)
    dims = ModelDims(feat_dim=layout["feat_dim"], embed_dim=layout["embed_dim"],
                     encoder_hidden=layout["encoder_hidden"],
                     classes=tuple((t, c) for t, c in layout["classes"]))
    model = MultimodalModel.from_params(dims, params, {m: d for m, d in layout["modalities"]})
    return model, meta


def model_layout(model: MultimodalModel) -> dict:
    d = model.dims
    return {"feat_dim": d.feat_dim, "embed_dim": d.embed_dim, "encoder_hidden": d.encoder_hidden,
            "classes": [list(c) for c in d.classes],
            "modalities": [[m, n] for m, n in model.modalities.items()]}
