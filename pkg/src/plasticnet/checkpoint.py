"""Versioned binary checkpoints with bit-exact round trips.

A checkpoint is a flat key-value container: config and RNG state as JSON
strings, everything numeric as little-endian arrays (floats always 64-bit).
The byte stream is fully determined by its contents -- no timestamps or
compression -- so identical runs write identical files.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .network import MetaParams, NetworkConfig, NetworkState

MAGIC = b"PNETCKPT"
VERSION = 1

_TAG_F64 = 0
_TAG_I64 = 1
_TAG_STR = 2


def write_entries(path, entries):
    """Write an ordered name->value mapping (float64/int64 arrays or str)."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for key, value in entries.items():
        kb = key.encode("utf-8")
        chunks.append(struct.pack("<H", len(kb)))
        chunks.append(kb)
        if isinstance(value, str):
            vb = value.encode("utf-8")
            chunks.append(struct.pack("<BQ", _TAG_STR, len(vb)))
            chunks.append(vb)
            continue
        arr = np.asarray(value)
        if arr.dtype.kind == "f":
            tag, dtype = _TAG_F64, "<f8"
        elif arr.dtype.kind in "iu":
            tag, dtype = _TAG_I64, "<i8"
        else:
            raise ValueError(f"unsupported checkpoint value type {arr.dtype} for key {key!r}")
        arr = np.asarray(arr, dtype=dtype)  # ascontiguousarray would promote 0-d to 1-d
        chunks.append(struct.pack("<BB", tag, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_entries(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    ofs = 16
    out = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", buf, ofs)
        ofs += 2
        key = buf[ofs:ofs + klen].decode("utf-8")
        ofs += klen
        (tag,) = struct.unpack_from("<B", buf, ofs)
        ofs += 1
        if tag == _TAG_STR:
            (n,) = struct.unpack_from("<Q", buf, ofs)
            ofs += 8
            out[key] = buf[ofs:ofs + n].decode("utf-8")
            ofs += n
            continue
        (ndim,) = struct.unpack_from("<B", buf, ofs)
        ofs += 1
        shape = struct.unpack_from(f"<{ndim}Q", buf, ofs) if ndim else ()
        ofs += 8 * ndim
        dtype = "<f8" if tag == _TAG_F64 else "<i8"
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype=dtype, count=n, offset=ofs).reshape(shape).copy()
        ofs += 8 * n
        out[key] = arr if ndim else arr[()]
    return out


def save_checkpoint(path, cfg, params, state, rng_state, step):
    """Persist config, meta-parameters, network state, RNG state and the
    step counter. rng_state is a numpy bit-generator state dict."""
    entries = {
        "config": json.dumps(cfg.to_dict(), sort_keys=True),
        "step": np.int64(step),
        "rng": json.dumps(rng_state, sort_keys=True, default=int),
    }
    for name, arr in params.arrays.items():
        entries[f"meta/{name}"] = arr
    for i, arr in enumerate(state.h):
        entries[f"state/h/{i}"] = arr
    for i, arr in enumerate(state.w):
        entries[f"state/w/{i}"] = arr
    write_entries(path, entries)


def load_checkpoint(path):
    """Returns (cfg, MetaParams, NetworkState, rng_state_dict, step)."""
    entries = read_entries(path)
    cfg = NetworkConfig.from_dict(json.loads(entries["config"]))
    arrays = {k[len("meta/"):]: v for k, v in entries.items() if k.startswith("meta/")}
    params = MetaParams(cfg, arrays)
    n_layers = cfg.n_layers
    state = NetworkState(
        [entries[f"state/h/{i}"] for i in range(n_layers)],
        [entries[f"state/w/{i}"] for i in range(n_layers)],
    )
    rng_state = json.loads(entries["rng"])
    return cfg, params, state, rng_state, int(entries["step"])
