"""Manifest + blob artifact format shared by datasets and checkpoints.

An artifact is a JSON manifest and a sibling ``.bin`` file.  The blob holds
every tensor as little-endian float32, concatenated in the order listed in the
manifest's ``tensors`` directory; the manifest records the blob's SHA-256.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from sm3.errors import ChecksumError, MissingArtifactError, StructureError, VersionMismatchError

_LE_F32 = np.dtype("<f4")


def blob_path(manifest_path: str | Path) -> Path:
    p = Path(manifest_path)
    return p.with_name(p.name[:-5] + ".bin") if p.name.endswith(".json") else p.with_name(p.name + ".bin")


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_artifact(path: str | Path, kind: str, version: int, meta: dict, tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    directory = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=_LE_F32)
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    blob = b"".join(chunks)
    bpath = blob_path(path)
    bpath.write_bytes(blob)
    manifest = {
        "format": kind,
        "version": version,
        "blob": bpath.name,
        "blob_bytes": len(blob),
        "sha256": hashlib.sha256(blob).hexdigest(),
        "tensors": directory,
        **meta,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_artifact(path: str | Path, kind: str, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"{path} does not exist")
    try:
        manifest = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise StructureError(f"{path}: manifest is not valid JSON ({exc})") from None
    if not isinstance(manifest, dict) or manifest.get("format") != kind:
        raise StructureError(f"{path}: not a {kind} manifest")
    if manifest.get("version") != version:
        raise VersionMismatchError(f"{path}: format version {manifest.get('version')} (expected {version})")
    bpath = path.with_name(manifest.get("blob", ""))
    if not bpath.is_file():
        raise MissingArtifactError(f"blob {bpath} missing")
    blob = bpath.read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest.get("sha256"):
        raise ChecksumError(f"{bpath}: SHA-256 does not match manifest")
    if len(blob) != manifest.get("blob_bytes") or len(blob) % 4:
        raise StructureError(f"{bpath}: size {len(blob)} disagrees with manifest")
    flat = np.frombuffer(blob, dtype=_LE_F32)
    tensors = {}
    expected = 0
    for entry in manifest.get("tensors", []):
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if count != entry["count"] or entry["offset"] != expected:
            raise StructureError(f"tensor {entry['name']}: directory entry is inconsistent")
        if entry["offset"] + count > flat.size:
            raise StructureError(f"tensor {entry['name']}: runs past the end of the blob")
        tensors[entry["name"]] = flat[entry["offset"]:entry["offset"] + count].astype(np.float32).reshape(shape)
        expected += count
    if expected != flat.size:
        raise StructureError(f"{bpath}: {flat.size - expected} trailing values not covered by the directory")
    return manifest, tensors
