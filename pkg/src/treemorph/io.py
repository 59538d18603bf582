"""File formats: ASCII PLY, trajectory text, versioned JSON, CSV.

Floats are written with 17 significant digits so every file re-parses to
the exact in-memory value and identical inputs give identical bytes.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import InputError
from .geometry import RigidTransform

__all__ = [
    "SCHEMA_VERSION",
    "write_ply",
    "read_ply",
    "write_trajectory",
    "read_trajectory",
    "write_json",
    "read_json",
    "write_table",
    "read_table",
    "read_records",
    "write_transform",
    "read_transform",
]

SCHEMA_VERSION = 1


def fmt_float(v) -> str:
    """Shortest text that reads back to the same double."""
    return repr(float(v))


def _require(path: Path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"missing file: {path}")
    return path


def write_ply(path, columns: Mapping[str, np.ndarray], comments=()) -> None:
    """Write an ASCII PLY vertex list; integer arrays become ``int`` properties."""
    names = list(columns)
    arrays = [np.asarray(columns[k]) for k in names]
    n = len(arrays[0]) if arrays else 0
    if any(len(a) != n for a in arrays):
        raise ValueError("PLY columns differ in length")
    lines = ["ply", "format ascii 1.0"]
    lines += [f"comment {c}" for c in comments]
    lines.append(f"element vertex {n}")
    cols = []
    for k, a in zip(names, arrays):
        is_int = np.issubdtype(a.dtype, np.integer) or a.dtype == bool
        lines.append(f"property {'int' if is_int else 'double'} {k}")
        cols.append([str(v) for v in a.astype(np.int64).tolist()] if is_int else [fmt_float(v) for v in a])
    lines.append("end_header")
    lines += [" ".join(row) for row in zip(*cols)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> dict:
    """Parse an ASCII PLY vertex list into a dict of column arrays."""
    path = _require(path)
    text = path.read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise InputError(f"not a PLY file: {path}")
    names, kinds, n, i = [], [], 0, 1
    while i < len(text):
        parts = text[i].split()
        i += 1
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise InputError(f"only ASCII PLY is supported: {path}")
        if parts[0] == "element" and parts[1] == "vertex":
            n = int(parts[2])
        elif parts[0] == "property":
            kinds.append(parts[1])
            names.append(parts[2])
        elif parts[0] == "end_header":
            break
    body = text[i:i + n]
    data = np.loadtxt(body, ndmin=2) if n else np.zeros((0, len(names)))
    out = {}
    for j, (k, kind) in enumerate(zip(names, kinds)):
        col = data[:, j]
        out[k] = col.astype(np.int64) if kind in ("int", "uchar", "uint", "short", "char") else col
    return out


def write_trajectory(path, frame_ids, poses_world_to_cam) -> None:
    """One line per frame: ``frame_id tx ty tz qx qy qz qw`` (camera-to-world)."""
    rows = []
    for fid, x in zip(frame_ids, np.asarray(poses_world_to_cam).reshape(-1, 6)):
        C = RigidTransform.from_vector(x).inverse()
        rows.append(np.r_[C.translation, C.quaternion()])
    buf = io.StringIO()
    buf.write("# frame_id tx ty tz qx qy qz qw\n")
    for fid, r in zip(frame_ids, rows):
        buf.write(f"{int(fid)} " + " ".join(fmt_float(v) for v in r) + "\n")
    Path(path).write_text(buf.getvalue())


def read_trajectory(path):
    """Return ``(frame_ids, poses)`` with poses as world->camera 6-vectors."""
    path = _require(path)
    data = np.loadtxt(path, ndmin=2, comments="#")
    ids = data[:, 0].astype(np.int64)
    poses = np.array([RigidTransform.from_quaternion(r[4:8], r[1:4]).inverse().as_vector() for r in data])
    return ids, poses.reshape(-1, 6)


def write_json(path, doc: dict) -> None:
    doc = {"schema_version": SCHEMA_VERSION, **doc}
    Path(path).write_text(json.dumps(doc, indent=1, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def read_json(path) -> dict:
    path = _require(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise InputError(f"malformed JSON in {path}: {e}") from e
    if not isinstance(doc, dict) or doc.get("schema_version") != SCHEMA_VERSION:
        raise InputError(f"{path}: unsupported or missing schema_version")
    return doc


def write_table(path, header, rows, fmt=None) -> None:
    """CSV with a header row; floats at full precision."""
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for r in rows:
        buf.write(",".join(_cell(v) for v in r) + "\n")
    Path(path).write_text(buf.getvalue())


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return fmt_float(v)
    return str(v)


def read_table(path) -> tuple[list, np.ndarray]:
    """Numeric CSV as ``(header, array)``."""
    path = _require(path)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    try:
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as e:
        raise InputError(f"{path}: {e}") from e
    return header, data.reshape(-1, len(header))


def _parse_cell(v: str):
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v


def read_records(path) -> list[dict]:
    """CSV with mixed columns as a list of dicts; numbers are parsed, other cells kept as text."""
    path = _require(path)
    with open(path, newline="") as fh:
        return [{k: _parse_cell(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def write_transform(path, T: RigidTransform) -> None:
    """Row-major 3x4 ``[R | t]`` on three lines, then the ``qx qy qz qw`` quaternion."""
    M = T.as_matrix()[:3]
    lines = [" ".join(fmt_float(v) for v in row) for row in M]
    lines.append(" ".join(fmt_float(v) for v in T.quaternion()))
    Path(path).write_text("\n".join(lines) + "\n")


def read_transform(path) -> RigidTransform:
    path = _require(path)
    try:
        rows = [list(map(float, ln.split())) for ln in path.read_text().splitlines() if ln.strip()]
        M = np.eye(4)
        M[:3] = np.array(rows[:3])
    except ValueError as e:
        raise InputError(f"{path}: expected three rows of four numbers") from e
    return RigidTransform.from_matrix(M)
