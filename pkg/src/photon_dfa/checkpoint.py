"""Binary checkpoint files.

Layout (all integers little-endian)::

    bytes 0-7    magic b"PHDFACKP"
    bytes 8-9    format version (uint16)
    bytes 10-11  payload dtype code (uint16): 1 = float64, 2 = float32
    bytes 12-15  reserved (uint32, zero)
    uint64       ndim, then ndim x uint64 dimensions of the payload block
    payload      prod(dims) little-endian floats
    trailer      UTF-8 JSON: {"tensors": [...], "meta": {...}}

A transmission matrix is stored as a (2, rows, cols) block: real part, then
imaginary part. A model is stored as one flat block whose tensors are listed
in the trailer manifest (name, shape, offset).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import kernels

MAGIC = b"PHDFACKP"
VERSION = 1
_DTYPES = {1: "<f8", 2: "<f4"}
_CODES = {"float64": 1, "float32": 2}


class CheckpointError(ValueError):
    pass


def _write(path, block: np.ndarray, trailer: dict, dtype: str):
    code = _CODES[dtype]
    header = MAGIC + struct.pack("<HHI", VERSION, code, 0)
    dims = struct.pack("<Q", block.ndim) + struct.pack(f"<{block.ndim}Q", *block.shape)
    payload = np.ascontiguousarray(block, dtype=_DTYPES[code]).tobytes()
    body = json.dumps(trailer, sort_keys=True, separators=(",", ":")).encode("utf-8")
    Path(path).write_bytes(header + dims + payload + body)


def _read(path):
    raw = Path(path).read_bytes()
    if len(raw) < 24 or raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, code, _ = struct.unpack_from("<HHI", raw, 8)
    if version != VERSION or code not in _DTYPES:
        raise CheckpointError(f"{path}: unsupported version {version} or dtype code {code}")
    (ndim,) = struct.unpack_from("<Q", raw, 16)
    dims = struct.unpack_from(f"<{ndim}Q", raw, 24)
    off = 24 + 8 * ndim
    n = int(np.prod(dims)) if ndim else 0
    itemsize = np.dtype(_DTYPES[code]).itemsize
    end = off + n * itemsize
    if end > len(raw):
        raise CheckpointError(f"{path}: truncated payload")
    block = np.frombuffer(raw[off:end], dtype=_DTYPES[code]).astype(np.float64).reshape(dims)
    try:
        trailer = json.loads(raw[end:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt JSON trailer") from exc
    return block, trailer


def save_tensors(path, tensors: dict, meta: dict | None = None, dtype: str = "float64"):
    """Write named arrays as one flat block plus a manifest."""
    manifest = []
    parts = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        parts.append(arr.ravel())
        offset += arr.size
    block = np.concatenate(parts) if parts else np.zeros(0)
    _write(path, block, {"tensors": manifest, "meta": meta or {}}, dtype)


def load_tensors(path):
    block, trailer = _read(path)
    flat = block.ravel()
    tensors = {}
    for item in trailer.get("tensors", []):
        size = int(np.prod(item["shape"])) if item["shape"] else 1
        o = item["offset"]
        tensors[item["name"]] = flat[o:o + size].reshape(item["shape"]).copy()
    return tensors, trailer.get("meta", {})


def save_transmission_matrix(path, tm, meta: dict | None = None):
    block = np.stack([tm.real, tm.imag])
    _write(path, block, {"tensors": [], "meta": {"seed": tm.seed, **(meta or {})}}, "float64")


def load_transmission_matrix(path):
    from .opu import TransmissionMatrix

    block, trailer = _read(path)
    if block.ndim != 3 or block.shape[0] != 2:
        raise CheckpointError(f"{path}: expected a (2, rows, cols) block, got {block.shape}")
    meta = trailer.get("meta", {})
    return TransmissionMatrix(block[0].copy(), block[1].copy(), meta.get("seed")), meta


def save_session(path, session):
    """Write the live medium with session state in the trailer.

    After drift the live medium differs from T(0); T(0) then goes to a
    sibling file ``<path>.t0``.
    """
    save_transmission_matrix(path, session.tm, {"session": session.metadata()})
    if session.drift_count:
        save_transmission_matrix(str(path) + ".t0", session.tm0)


def load_session(path):
    from .opu import AnchorVector, LatencyModel, NoiseSpec, OpuSession

    tm, meta = load_transmission_matrix(path)
    info = meta["session"]
    anchor = AnchorVector(np.asarray(info["anchor"], dtype=np.float64), info["anchor_seed"])
    t0_path = Path(str(path) + ".t0")
    tm0 = load_transmission_matrix(t0_path)[0] if t0_path.exists() else tm.copy()
    s = OpuSession(tm0, anchor=anchor, noise=NoiseSpec(**info["noise"]),
                   latency=LatencyModel(**info["latency"]), threshold=info["threshold"])
    s.tm = tm
    s.anchor_intensity = kernels.complex_intensity(tm.real, tm.imag, anchor.r)
    s.step_counter = info["step_counter"]
    s.tick = info["tick"]
    s.drift_count = info["drift_count"]
    return s
