"""Raw float64 arrays with JSON sidecars, and atomically written manifests."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .config import load_json
from .errors import ConfigError

DTYPE = "<f8"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> str:
    atomic_write_text(path, dump_json(obj))
    return sha256_file(path)


def write_array(stem, array: np.ndarray, meta: dict | None = None) -> dict:
    """Write ``stem.bin`` (little-endian float64, C order) and ``stem.json``; returns the sidecar."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(array, dtype=DTYPE)
    bin_path = stem.with_suffix(".bin")
    fd, tmp = tempfile.mkstemp(dir=stem.parent, prefix=f".{bin_path.name}.", suffix=".tmp")
    with os.fdopen(fd, "wb") as f:
        f.write(arr.tobytes(order="C"))
    os.replace(tmp, bin_path)
    side = dict(meta or {})
    side.update({"data": bin_path.name, "dtype": DTYPE, "shape": list(arr.shape),
                 "sha256": sha256_file(bin_path)})
    write_json(stem.with_suffix(".json"), side)
    return side


def read_array(sidecar_path):
    """(array, sidecar dict) from a sidecar written by write_array."""
    sidecar_path = Path(sidecar_path)
    side = load_json(sidecar_path)
    if not isinstance(side, dict) or "data" not in side or "shape" not in side:
        raise ConfigError(f"{sidecar_path}: not an array sidecar")
    bin_path = sidecar_path.parent / side["data"]
    if not bin_path.exists():
        raise ConfigError(f"{sidecar_path}: missing data file {bin_path.name}")
    arr = np.fromfile(bin_path, dtype=side.get("dtype", DTYPE)).reshape(side["shape"])
    return arr, side


class Manifest:
    """Run manifest linking artifacts to the config hash and seed."""

    def __init__(self, path, config_sha256: str, seed: int):
        self.path = Path(path)
        self.data = {"schema_version": 1, "config_sha256": config_sha256, "seed": seed,
                     "status": "running", "stages": {}, "artifacts": {}}

    def add_artifact(self, name: str, path) -> None:
        path = Path(path)
        self.data["artifacts"][name] = {"path": os.path.relpath(path, self.path.parent),
                                        "sha256": sha256_file(path)}

    def stage(self, name: str, status: str, message: str | None = None, **extra) -> None:
        entry = {"status": status}
        if message:
            entry["message"] = message
        entry.update(extra)
        self.data["stages"][name] = entry
        self.write()

    def finish(self, status: str) -> None:
        self.data["status"] = status
        self.write()

    def write(self) -> None:
        write_json(self.path, self.data)
