"""Binary checkpoints.

Layout: the magic ``b"CBN1"``, a little-endian ``uint32`` header length, a
UTF-8 JSON header, then for every layer its filter (row-major, shape
``(*spatial, c_out, c_in)``) followed by its bias, all as little-endian
float64.  The header is written with sorted keys and no whitespace so that
save -> load -> save reproduces the same bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .cnn_core import NetworkParams
from .te_linalg import ConvFilter, PoolingSpec

MAGIC = b"CBN1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _header(params: NetworkParams, seed: int | None) -> dict:
    shape = params.spatial_shape
    pool = params.pooling
    return {
        "version": VERSION,
        "n": shape[0] if len(shape) == 1 else list(shape),
        "dims": len(shape),
        "L": params.depth,
        "channels": params.widths,
        "pooling": {"kind": pool.kind, "beta": pool.beta, "m": pool.m.ravel().tolist()},
        "seed": seed,
    }


def to_bytes(params: NetworkParams, seed: int | None = None) -> bytes:
    head = json.dumps(_header(params, seed), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(head)), head]
    for f in params.layers:
        parts.append(np.ascontiguousarray(f.w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(f.b, dtype="<f8").tobytes())
    return b"".join(parts)


def from_bytes(data: bytes) -> tuple[NetworkParams, dict]:
    if data[:4] != MAGIC:
        raise CheckpointError("not a CBN1 checkpoint (bad magic)")
    if len(data) < 8:
        raise CheckpointError("truncated header")
    (hlen,) = struct.unpack("<I", data[4:8])
    try:
        head = json.loads(data[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    if head.get("version") != VERSION:
        raise CheckpointError(f"unsupported version {head.get('version')}")
    n = head["n"]
    shape = (int(n),) if isinstance(n, int) else tuple(int(v) for v in n)
    if len(shape) != head["dims"]:
        raise CheckpointError("header dims do not match n")
    chans = head["channels"]
    if len(chans) != head["L"] + 1:
        raise CheckpointError("channel list does not match L")
    pos = 8 + hlen
    layers = []
    for c_in, c_out in zip(chans[:-1], chans[1:]):
        wshape = shape + (c_out, c_in)
        wsize = int(np.prod(wshape)) * 8
        bsize = c_out * 8
        if pos + wsize + bsize > len(data):
            raise CheckpointError("truncated parameter data")
        w = np.frombuffer(data, dtype="<f8", count=wsize // 8, offset=pos).reshape(wshape).astype(np.float64)
        pos += wsize
        b = np.frombuffer(data, dtype="<f8", count=c_out, offset=pos).astype(np.float64)
        pos += bsize
        layers.append(ConvFilter(w, b))
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes")
    pm = head["pooling"]
    m = np.asarray(pm["m"], dtype=np.float64).reshape(shape)
    pool = PoolingSpec(m, kind=pm["kind"], beta=pm["beta"])
    return NetworkParams(layers, pool), head


def save_params(params: NetworkParams, path, seed: int | None = None) -> Path:
    p = Path(path)
    p.write_bytes(to_bytes(params, seed))
    return p


def load_params(path) -> NetworkParams:
    return from_bytes(Path(path).read_bytes())[0]


def load_with_header(path) -> tuple[NetworkParams, dict]:
    return from_bytes(Path(path).read_bytes())
