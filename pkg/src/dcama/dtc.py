"""DTC tensor container: a JSON manifest beside a raw little-endian row-major buffer.

A tensor stored at stem ``path/name`` occupies ``path/name.dtc.json`` and
``path/name.dtc.bin``. Round trips are bit-exact.
"""

import json
from pathlib import Path

import numpy as np

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8"), "u8": np.dtype("u1")}
_CODES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64", np.dtype(np.uint8): "u8"}


class DTCError(ValueError):
    pass


def dtc_paths(stem):
    stem = Path(stem)
    return stem.with_name(stem.name + ".dtc.json"), stem.with_name(stem.name + ".dtc.bin")


def write_dtc(stem, array):
    arr = np.asarray(array)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise DTCError(f"unsupported dtype {arr.dtype}; DTC stores f32, f64 or u8")
    meta_path, bin_path = dtc_paths(stem)
    meta_path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"dtype": code, "shape": [int(d) for d in arr.shape], "order": "row-major", "byte_order": "little"}
    meta_path.write_text(json.dumps(meta, sort_keys=True) + "\n")
    bin_path.write_bytes(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return meta_path


def read_dtc(stem, expect_dtype=None):
    meta_path, bin_path = dtc_paths(stem)
    for p in (meta_path, bin_path):
        if not p.is_file():
            raise FileNotFoundError(f"missing DTC file: {p}")
    try:
        meta = json.loads(meta_path.read_text())
        dtype = _DTYPES[meta["dtype"]]
        shape = tuple(int(d) for d in meta["shape"])
    except (ValueError, KeyError, TypeError) as exc:
        raise DTCError(f"corrupt DTC manifest {meta_path}: {exc}") from exc
    if meta.get("order", "row-major") != "row-major" or meta.get("byte_order", "little") != "little":
        raise DTCError(f"{meta_path}: only row-major little-endian buffers are supported")
    if expect_dtype is not None and meta["dtype"] != expect_dtype:
        raise DTCError(f"{meta_path}: dtype {meta['dtype']} where {expect_dtype} was expected")
    raw = bin_path.read_bytes()
    n = int(np.prod(shape)) if shape else 1
    if len(raw) != n * dtype.itemsize:
        raise DTCError(f"{bin_path}: {len(raw)} bytes does not match shape {list(shape)} of {meta['dtype']}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="), copy=True)
