"""File formats: part trajectories, hand tracks and point sets (PLY / OBJ)."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .grasp import HandTrack
from .retarget import PartTrajectory


def atomic_write_text(path, text):
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- part trajectories ---------------------------------------------------------


def trajectory_to_dict(traj: PartTrajectory):
    return {
        "part_id": traj.part_id,
        "frame": traj.frame,
        "waypoints": [{"t": float(t), "pose": [float(v) for v in row]}
                      for t, row in zip(traj.times, traj.as_array())],
    }


def trajectory_from_dict(d) -> PartTrajectory:
    wps = d["waypoints"]
    times = [w["t"] for w in wps]
    arr = np.array([w["pose"] for w in wps], dtype=float).reshape(-1, 7)
    return PartTrajectory(d["part_id"], times, arr[:, :3], arr[:, 3:], d.get("frame", "table"))


def save_trajectory(path, traj: PartTrajectory):
    atomic_write_text(path, json.dumps(trajectory_to_dict(traj), indent=1) + "\n")


def load_trajectory(path) -> PartTrajectory:
    with open(path) as fh:
        return trajectory_from_dict(json.load(fh))


# -- hand tracks ---------------------------------------------------------------


def load_hand_tracks(path):
    """Hand-keypoint records ``{t, index_tip, thumb_tip, hand}`` grouped per hand."""
    with open(path) as fh:
        records = json.load(fh)
    by_hand = {}
    for r in records:
        by_hand.setdefault(r["hand"], []).append(r)
    tracks = {}
    for hand, rs in by_hand.items():
        rs.sort(key=lambda r: r["t"])
        tracks[hand] = HandTrack(hand, [r["t"] for r in rs],
                                 [r["index_tip"] for r in rs], [r["thumb_tip"] for r in rs])
    return tracks


def save_hand_track(path, tracks):
    records = []
    for tr in tracks:
        for t, a, b in zip(tr.times, tr.index_tip, tr.thumb_tip):
            records.append({"t": float(t), "index_tip": a.tolist(), "thumb_tip": b.tolist(),
                            "hand": tr.hand_id})
    atomic_write_text(path, json.dumps(records, indent=1) + "\n")


# -- point sets ----------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(fh):
    if fh.readline().strip() != b"ply":
        raise ValueError("not a PLY file")
    fmt = None
    elements = []
    while True:
        line = fh.readline()
        if not line:
            raise ValueError("truncated PLY header")
        parts = line.decode("ascii", "replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if parts[1] == "list":
                elements[-1][2].append((parts[4], ("list", parts[2], parts[3])))
            else:
                elements[-1][2].append((parts[2], parts[1]))
        elif parts[0] == "end_header":
            return fmt, elements


def read_ply(path):
    """Vertex positions ``(N, 3)`` and normals ``(N, 3)`` or ``None``."""
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh)
        body = fh.read()
    vertex = None
    if fmt == "ascii":
        tokens = body.split()
        pos = 0
        for name, count, props in elements:
            rows = []
            for _ in range(count):
                row = {}
                for pname, ptype in props:
                    if isinstance(ptype, tuple):
                        n = int(tokens[pos])
                        pos += 1 + n
                    else:
                        row[pname] = float(tokens[pos])
                        pos += 1
                rows.append(row)
            if name == "vertex":
                vertex = rows
                break
        cols = {k: np.array([r[k] for r in vertex]) for k in (vertex[0] if vertex else {})}
    elif fmt in ("binary_little_endian", "binary_big_endian"):
        endian = "<" if fmt == "binary_little_endian" else ">"
        offset = 0
        cols = None
        for name, count, props in elements:
            if any(isinstance(t, tuple) for _, t in props):
                # variable-length rows: walk them one by one
                for _ in range(count):
                    for _pname, ptype in props:
                        if isinstance(ptype, tuple):
                            cdt = np.dtype(endian + _PLY_TYPES[ptype[1]])
                            n = int(np.frombuffer(body, cdt, 1, offset)[0])
                            offset += cdt.itemsize + n * np.dtype(_PLY_TYPES[ptype[2]]).itemsize
                        else:
                            offset += np.dtype(_PLY_TYPES[ptype]).itemsize
                if name == "vertex":
                    raise ValueError("list properties on vertices are not supported")
                continue
            dt = np.dtype([(p, endian + _PLY_TYPES[t]) for p, t in props])
            arr = np.frombuffer(body, dt, count, offset)
            offset += dt.itemsize * count
            if name == "vertex":
                cols = {p: arr[p].astype(float) for p, _ in props}
                break
    else:
        raise ValueError(f"unsupported PLY format {fmt!r}")
    if not cols or not all(k in cols for k in "xyz"):
        raise ValueError(f"{path}: PLY has no vertex x/y/z")
    pts = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    normals = None
    if all(k in cols for k in ("nx", "ny", "nz")):
        normals = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1)
    return pts, normals


def write_ply(path, points, normals=None, binary=False):
    points = np.asarray(points, dtype=float)
    props = ["x", "y", "z"] + (["nx", "ny", "nz"] if normals is not None else [])
    data = points if normals is None else np.hstack([points, np.asarray(normals, dtype=float)])
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {len(points)}"]
    header += [f"property double {p}" for p in props] + ["end_header"]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(data.astype("<f8").tobytes())
        else:
            for row in data:
                fh.write((" ".join(repr(float(v)) for v in row) + "\n").encode("ascii"))


def read_obj_vertices(path):
    pts = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("v "):
                pts.append([float(v) for v in line.split()[1:4]])
    if not pts:
        raise ValueError(f"{path}: no vertices")
    return np.array(pts)


def load_points(path):
    """Raw point set from a PLY or OBJ file."""
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return read_ply(path)[0]
    if suffix == ".obj":
        return read_obj_vertices(path)
    raise ValueError(f"unsupported point-set format {suffix!r} (expected .ply or .obj)")
