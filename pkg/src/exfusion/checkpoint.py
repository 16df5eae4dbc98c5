"""Versioned binary container for named tensors.

Layout (all little-endian):

    magic 'EXFU' | u32 version | u32 record count
    per record: u32 name length | name utf-8 | u8 dtype code | u8 rank
                | rank x u64 dims | raw payload

Scalar metadata rides along as records with a ``meta/`` prefix, placed
after the model tensors: strings as uint8 bytes, ints as int64[1], floats
as float64[1], structured values as JSON bytes. Round-trips are bit-exact;
a version mismatch refuses to load.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EXFU"
VERSION = 1

_CODES = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.int64): 2,
    np.dtype(np.uint8): 3,
}
_DTYPES = {code: dt for dt, code in _CODES.items()}


class CheckpointError(RuntimeError):
    """Raised for unreadable, truncated, or version-mismatched checkpoints."""


def _encode_meta_value(value) -> np.ndarray:
    if isinstance(value, np.ndarray):
        return value
    if isinstance(value, str):
        return np.frombuffer(value.encode("utf-8"), dtype=np.uint8).copy()
    if isinstance(value, bool):
        return np.array([int(value)], dtype=np.int64)
    if isinstance(value, (int, np.integer)):
        return np.array([value], dtype=np.int64)
    if isinstance(value, (float, np.floating)):
        return np.array([value], dtype=np.float64)
    if isinstance(value, (dict, list, tuple)):
        return np.frombuffer(json.dumps(value, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()
    raise TypeError(f"cannot encode metadata value of type {type(value).__name__}")


def meta_str(meta: dict, key: str) -> str:
    return bytes(meta[key].astype(np.uint8)).decode("utf-8")


def meta_json(meta: dict, key: str):
    return json.loads(meta_str(meta, key))


def meta_int(meta: dict, key: str) -> int:
    return int(meta[key][0])


def meta_float(meta: dict, key: str) -> float:
    return float(meta[key][0])


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    if arr.dtype not in _CODES:
        raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<Q", dim))
    fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def write_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write tensors plus metadata; tensor records sorted by name, meta after."""
    path = Path(path)
    meta = meta or {}
    meta_records = [("meta/" + k, _encode_meta_value(v)) for k, v in sorted(meta.items())]
    records = sorted(tensors.items()) + meta_records
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(records)))
        for name, arr in records:
            _write_record(fh, name, np.asarray(arr))
    tmp.replace(path)


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Load (tensors, meta). Meta values come back as raw arrays; use the
    ``meta_*`` helpers to decode them."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        version, count = struct.unpack("<II", _read_exact(fh, 8))
        if version != VERSION:
            raise CheckpointError(
                f"{path}: version mismatch (file v{version}, reader v{VERSION}); refusing to load"
            )
        tensors: dict[str, np.ndarray] = {}
        meta: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            code, rank = struct.unpack("<BB", _read_exact(fh, 2))
            if code not in _DTYPES:
                raise CheckpointError(f"{path}: unknown dtype code {code} for {name!r}")
            dims = tuple(struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(rank))
            dtype = _DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
            arr = np.frombuffer(_read_exact(fh, nbytes), dtype=dtype.newbyteorder("<")).astype(dtype)
            arr = arr.reshape(dims)
            if name.startswith("meta/"):
                meta[name[len("meta/"):]] = arr
            else:
                tensors[name] = arr
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after declared records")
    return tensors, meta


# -- model-level helpers ---------------------------------------------------------


def save_model_checkpoint(path, model, step: int = 0, optimizer=None,
                          extra_meta: dict | None = None) -> None:
    from .model import Model  # local import to keep this module light

    assert isinstance(model, Model)
    tensors = {name: t.data for name, t in model.named_parameters()}
    tensors.update({name: buf for name, buf in model.named_buffers()})
    if optimizer is not None:
        tensors.update(optimizer.state_arrays())
    meta = {
        "format": "model",
        "model_spec": model.spec.to_dict(),
        "dtype": model.dtype,
        "variant": model.spec.variant,
        "delta": float(model.spec.momentum),
        "step": int(step),
    }
    if extra_meta:
        meta.update(extra_meta)
    write_checkpoint(path, tensors, meta)


class LoadedModel:
    def __init__(self, model, step: int, meta: dict, opt_arrays: dict):
        self.model = model
        self.step = step
        self.meta = meta
        self.opt_arrays = opt_arrays


def load_model_checkpoint(path) -> LoadedModel:
    from .model import Model, ModelSpec

    tensors, meta = read_checkpoint(path)
    if "model_spec" not in meta:
        raise CheckpointError(f"{path}: missing model_spec metadata")
    spec = ModelSpec.from_dict(meta_json(meta, "model_spec"))
    model = Model(spec, dtype=meta_str(meta, "dtype"))
    opt_arrays = {k: v for k, v in tensors.items() if k.startswith("opt/")}
    state = {k: v for k, v in tensors.items() if not k.startswith("opt/")}
    model.load_state_arrays(state)
    return LoadedModel(model, meta_int(meta, "step"), meta, opt_arrays)
