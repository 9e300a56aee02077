"""Single-file checkpoint container.

A checkpoint is a ZIP archive holding ``meta.json`` plus one raw
little-endian binary blob per named array under ``arrays/``. The metadata
block records the format version, step counter, a config snapshot, the array
manifest (name, dtype, shape, in checksum order), and a SHA-256 checksum over
the concatenated array bytes. No framework-specific serialization is used, so
the format is readable from any language.

Writes are atomic: the archive is written to a temporary sibling and renamed
into place.
"""

from __future__ import annotations

import hashlib
import json
import os
import zipfile
from pathlib import Path

import numpy as np

from .errors import CheckpointError

FORMAT_VERSION = 1

_DTYPES = {
    "float32": "<f4",
    "float64": "<f8",
    "int64": "<i8",
    "int32": "<i4",
    "uint8": "|u1",
}


def _canonical_dtype(arr: np.ndarray) -> str:
    name = arr.dtype.name
    if name not in _DTYPES:
        raise CheckpointError(f"unsupported array dtype {arr.dtype}")
    return name


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write named arrays plus metadata atomically to ``path``."""
    path = Path(path)
    manifest = []
    blobs = []
    digest = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dtype = _canonical_dtype(arr)
        blob = arr.astype(np.dtype(_DTYPES[dtype]), copy=False).tobytes()
        manifest.append({"name": name, "dtype": dtype, "shape": list(arr.shape)})
        blobs.append(blob)
        digest.update(blob)
    payload = {
        "format_version": FORMAT_VERSION,
        "checksum": digest.hexdigest(),
        "manifest": manifest,
        **meta,
    }
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("meta.json", json.dumps(payload, sort_keys=True, indent=1))
        for entry, blob in zip(manifest, blobs):
            zf.writestr(f"arrays/{entry['name']}", blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read arrays and metadata; the checksum is validated on load."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            if meta.get("format_version") != FORMAT_VERSION:
                raise CheckpointError(
                    f"unsupported checkpoint format version {meta.get('format_version')}"
                )
            digest = hashlib.sha256()
            arrays = {}
            for entry in meta["manifest"]:
                blob = zf.read(f"arrays/{entry['name']}")
                digest.update(blob)
                arr = np.frombuffer(blob, dtype=np.dtype(_DTYPES[entry["dtype"]]))
                arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if digest.hexdigest() != meta["checksum"]:
        raise CheckpointError(f"checksum mismatch in {path}")
    return arrays, meta


def checkpoint_id(path) -> str:
    """Short content identifier of a checkpoint (checksum prefix)."""
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
    return meta["checksum"][:12]
