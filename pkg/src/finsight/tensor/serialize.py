"""FSNT binary tensor files and their lossless JSON debug form.

Binary layout (little-endian): b"FSNT", u32 version, four u32 dims (N, C, H, W),
u32 dtype code, then N*C*H*W values in row-major order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import ParseError

MAGIC = b"FSNT"
VERSION = 1
_HEADER = struct.Struct("<4sI4II")
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
CODE_OF = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def _as_rank4(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.ndim > 4:
        raise ValueError(f"cannot store rank-{arr.ndim} array as FSNT")
    return arr.reshape((1,) * (4 - arr.ndim) + arr.shape)


def to_bytes(arr) -> bytes:
    arr = _as_rank4(arr)
    code = CODE_OF.get(arr.dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    return _HEADER.pack(MAGIC, VERSION, *arr.shape, code) + arr.astype(DTYPE_CODES[code]).tobytes()


def from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise ParseError("FSNT buffer shorter than its header")
    magic, version, n, c, h, w, code = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ParseError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ParseError(f"unsupported FSNT version {version}")
    if code not in DTYPE_CODES:
        raise ParseError(f"unknown dtype code {code}")
    dt = DTYPE_CODES[code]
    count = n * c * h * w
    body = buf[_HEADER.size :]
    if len(body) != count * dt.itemsize:
        raise ParseError(f"expected {count * dt.itemsize} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=dt).reshape(n, c, h, w).astype(dt.newbyteorder("="))


def save(path, arr) -> None:
    Path(path).write_bytes(to_bytes(arr))


def load(path) -> np.ndarray:
    return from_bytes(Path(path).read_bytes())


def to_json(arr) -> str:
    arr = _as_rank4(arr)
    return json.dumps({"format": "FSNT", "version": VERSION, "shape": list(arr.shape),
                       "dtype": str(arr.dtype), "data": [float(v) for v in arr.ravel()]})


def from_json(text: str) -> np.ndarray:
    d = json.loads(text)
    if d.get("format") != "FSNT":
        raise ParseError("not an FSNT JSON document")
    return np.asarray(d["data"], dtype=d["dtype"]).reshape(d["shape"])


def save_params(directory, params: dict[str, np.ndarray], descriptor: dict) -> Path:
    """Write one FSNT file per parameter plus ``arch.json`` describing them."""
    out = Path(directory)
    (out / "params").mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name in sorted(params):
        arr = np.asarray(params[name])
        save(out / "params" / f"{name}.fsnt", arr)
        shapes[name] = list(arr.shape)
    doc = dict(descriptor)
    doc["params"] = shapes
    (out / "arch.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    return out


def load_params(directory) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(directory)
    doc = json.loads((d / "arch.json").read_text())
    params = {name: load(d / "params" / f"{name}.fsnt").reshape(shape)
              for name, shape in doc["params"].items()}
    return params, doc
