"""File formats: 16-bit PGM images, dataset manifests and run manifests."""

from __future__ import annotations

import hashlib
import json
import os
import re
from pathlib import Path

import numpy as np

from . import __version__

PGM_MAX = 65535


class ManifestError(ValueError):
    pass


def write_pgm(path, img: np.ndarray) -> None:
    """Binary P5, maxval 65535, big-endian samples, value = round(pixel * 65535)."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {a.shape}")
    q = np.rint(np.clip(a, 0.0, 1.0) * PGM_MAX).astype(">u2")
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{PGM_MAX}\n".encode("ascii"))
        fh.write(q.tobytes())


_PGM_HEADER = re.compile(rb"^P5\s+(?:#.*\s+)*(\d+)\s+(?:#.*\s+)*(\d+)\s+(?:#.*\s+)*(\d+)\s")


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    m = _PGM_HEADER.match(raw)
    if not m:
        raise ValueError(f"{path}: not a binary (P5) PGM file")
    w, h, maxval = (int(g) for g in m.groups())
    dtype = ">u2" if maxval > 255 else "u1"
    count = w * h
    body = np.frombuffer(raw, dtype=dtype, count=count, offset=m.end())
    return body.reshape(h, w).astype(np.float64) / maxval


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dump_json(path, obj) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def read_dataset_manifest(path) -> list[dict]:
    """Rows of {clean_path, noisy_path, level, seed}; relative paths resolve against the manifest's directory."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"dataset manifest {path} not found")
    try:
        rows = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    if isinstance(rows, dict) and "pairs" in rows:
        rows = rows["pairs"]
    if not isinstance(rows, list):
        raise ManifestError(f"{path}: expected a list of pair records")
    out = []
    for i, row in enumerate(rows):
        if not isinstance(row, dict) or "noisy_path" not in row:
            raise ManifestError(f"{path}: row {i} lacks noisy_path")
        resolved = dict(row)
        for key in ("clean_path", "noisy_path"):
            if resolved.get(key):
                p = Path(resolved[key])
                resolved[key] = str(p if p.is_absolute() else path.parent / p)
                if not Path(resolved[key]).is_file():
                    raise ManifestError(f"{path}: row {i} {key} {resolved[key]} does not exist")
        out.append(resolved)
    return out


def run_manifest(command: str, config: dict, seeds: dict, artifacts: list, **extra) -> dict:
    m = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "artifacts": sorted(str(a) for a in artifacts),
        "tool_version": __version__,
    }
    m.update(extra)
    return m
