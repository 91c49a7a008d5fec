"""Deterministic artifact formats: columnar ensembles, CSV tables, manifests.

Every writer here is byte-deterministic: fixed field order, '%.17g' float
formatting, explicit little-endian binary payloads and no timestamps, so
a rerun from the same manifest reproduces artifacts bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .lattice import LatticeSpec, ValidationError

_MAGIC = b"SCFL1\n"


def write_ensemble(path, lattice: LatticeSpec, scales, seed, states: dict) -> str:
    """Columnar binary ensemble: JSON header, then per-scale float64 blocks.

    ``states`` maps grid index -> array (T, *lattice.shape); blocks are
    stored in increasing grid-index order, little-endian.
    """
    path = Path(path)
    keys = sorted(int(k) for k in states)
    first = states[keys[0]]
    header = {
        "lattice": {"d": lattice.d, "n": lattice.n, "eps": lattice.eps},
        "scales": [float(s) for s in np.asarray(scales)],
        "seed": seed,
        "grid_indices": keys,
        "n_traj": int(first.shape[0]),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for k in keys:
            arr = np.ascontiguousarray(states[k], dtype="<f8")
            if arr.shape[1:] != lattice.shape:
                raise ValidationError(f"block {k} has shape {arr.shape}")
            fh.write(arr.tobytes())
    return str(path)


def read_ensemble(path):
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValidationError(f"{path} is not an ensemble file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        lat = LatticeSpec(header["lattice"]["d"], header["lattice"]["n"], header["lattice"]["eps"])
        shape = (header["n_traj"],) + lat.shape
        count = int(np.prod(shape))
        states = {}
        for k in header["grid_indices"]:
            buf = fh.read(count * 8)
            states[k] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return header, states


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None or (isinstance(x, str) and x == ""):
        return ""
    if isinstance(x, str):
        return x
    return "%.17g" % float(x)


def write_csv(path, columns, rows) -> str:
    """CSV with fixed column order and deterministic float formatting."""
    path = Path(path)
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(c, "")) for c in columns))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return str(path)


def read_csv(path):
    text = Path(path).read_text(encoding="utf-8").strip().split("\n")
    columns = text[0].split(",")
    rows = []
    for line in text[1:]:
        parts = line.split(",")
        rows.append(dict(zip(columns, parts)))
    return columns, rows


def content_hash(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def write_manifest(path, config: dict, artifacts: dict) -> str:
    """manifest.json with the resolved config and artifact content hashes."""
    payload = {
        "config": config,
        "artifacts": {name: content_hash(p) for name, p in sorted(artifacts.items())},
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return str(path)


RESULT_COLUMNS = ["kind", "x", "y", "value", "stderr", "target"]


def moment_rows(states: np.ndarray, lattice: LatticeSpec, kinds=("mean", "pair", "fourth")):
    """Site-moment table with plain ensemble standard errors."""
    T = states.shape[0]
    flat = states.reshape(T, lattice.nsites)
    rows = []
    root = np.sqrt(T)
    if "mean" in kinds:
        for x in range(lattice.nsites):
            v = flat[:, x]
            rows.append({"kind": "mean", "x": x, "y": x,
                         "value": v.mean(), "stderr": v.std(ddof=1) / root, "target": ""})
    if "pair" in kinds:
        for x in range(lattice.nsites):
            for y in range(x, lattice.nsites):
                v = flat[:, x] * flat[:, y]
                rows.append({"kind": "pair", "x": x, "y": y,
                             "value": v.mean(), "stderr": v.std(ddof=1) / root, "target": ""})
    if "fourth" in kinds:
        for x in range(lattice.nsites):
            v = flat[:, x] ** 4
            rows.append({"kind": "fourth", "x": x, "y": x,
                         "value": v.mean(), "stderr": v.std(ddof=1) / root, "target": ""})
    return rows
