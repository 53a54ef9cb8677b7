"""Deterministic zip archives holding named tensors plus a JSON manifest.

Layout (documented, bit-exact):
  manifest.json        {"meta": {...}, "tensors": [{"name","shape","dtype"}, ...]}
  tensors/<name>.bin   raw little-endian, row-major (C order) bytes

All entries are stored uncompressed with a fixed timestamp so that identical
inputs produce byte-identical archives.
"""
from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)

# dtypes allowed in archives; multi-byte types explicitly little-endian,
# single-byte types carry numpy's 'not applicable' byte-order marker
_DTYPES = {"<f4", "<f8", "<i4", "<i8", "|i1", "|u1"}


def _dtype_tag(arr: np.ndarray) -> str:
    dt = np.dtype(arr.dtype)
    tag = dt.str if dt.itemsize == 1 else dt.newbyteorder("<").str
    if tag not in _DTYPES:
        raise ValueError(f"unsupported archive dtype {arr.dtype!r}")
    return tag


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, payload)


def write_archive(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    """Write ``arrays`` and ``meta`` to ``path``; returns the path written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "meta": meta,
        "tensors": [
            {"name": name, "shape": list(arr.shape), "dtype": _dtype_tag(arr)}
            for name, arr in arrays.items()
        ],
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        _write_entry(zf, "manifest.json", json.dumps(manifest, indent=1).encode())
        for name, arr in arrays.items():
            blob = np.ascontiguousarray(arr).astype(_dtype_tag(arr), copy=False)
            _write_entry(zf, f"tensors/{name}.bin", blob.tobytes())
    return path


def read_archive(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read an archive back as ``(meta, {name: array})``."""
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        arrays = {}
        for entry in manifest["tensors"]:
            raw = zf.read(f"tensors/{entry['name']}.bin")
            arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]))
            arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return manifest["meta"], arrays
