"""Point-cloud readers (PLY, XYZ text, KITTI velodyne bin) and PLY mesh writer."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .mesher import TriangleMesh

log = logging.getLogger(__name__)

FORMATS = ("ply", "xyz", "kitti-bin")

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


class CloudParseError(ValueError):
    """Malformed input file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int, path=None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (byte offset {offset})")
        self.offset = offset
        self.path = path


@dataclass
class PointCloud:
    points: np.ndarray
    sensor_pose: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.points)


def _finite_cloud(points: np.ndarray, sensor_pose, path) -> PointCloud:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    keep = np.isfinite(pts).all(axis=1)
    dropped = int((~keep).sum())
    if dropped:
        log.warning("%s: dropped %d non-finite points", path, dropped)
    return PointCloud(pts[keep], np.asarray(sensor_pose, dtype=np.float64).reshape(3), dropped)


def detect_format(path) -> str:
    ext = Path(path).suffix.lower()
    if ext == ".ply":
        return "ply"
    if ext in (".xyz", ".txt"):
        return "xyz"
    if ext == ".bin":
        return "kitti-bin"
    raise CloudParseError(f"cannot infer format from extension {ext!r}", 0, path)


def read_cloud(path, fmt: Optional[str] = None, sensor_pose=(0.0, 0.0, 0.0)) -> PointCloud:
    """Load a point cloud; non-finite rows are dropped and counted."""
    fmt = fmt or detect_format(path)
    data = Path(path).read_bytes()
    if fmt == "ply":
        elements = parse_ply(data, path)
        pts = _ply_xyz(elements, path)
    elif fmt == "xyz":
        pts = _parse_xyz(data, path)
    elif fmt == "kitti-bin":
        pts = _parse_kitti(data, path)
    else:
        raise CloudParseError(f"unknown format {fmt!r}; expected one of {FORMATS}", 0, path)
    return _finite_cloud(pts, sensor_pose, path)


def read_mesh(path) -> TriangleMesh:
    elements = parse_ply(Path(path).read_bytes(), path)
    verts = _ply_xyz(elements, path)
    faces = elements.get("face")
    if faces is None:
        tris = np.zeros((0, 3), dtype=np.int64)
    else:
        lists = faces.get("vertex_indices", faces.get("vertex_index"))
        if lists is None:
            raise CloudParseError("face element has no vertex_indices property", 0, path)
        tris = _lists_to_triangles(lists, path)
    return TriangleMesh(verts, tris)


def _lists_to_triangles(lists, path) -> np.ndarray:
    if isinstance(lists, np.ndarray) and lists.ndim == 2:
        arr = lists
    else:
        if any(len(f) != 3 for f in lists):
            raise CloudParseError("only triangular faces are supported", 0, path)
        arr = np.array([list(f) for f in lists]).reshape(-1, 3)
    if arr.shape[1] != 3:
        raise CloudParseError("only triangular faces are supported", 0, path)
    return arr.astype(np.int64)


def _ply_xyz(elements, path) -> np.ndarray:
    vert = elements.get("vertex")
    if vert is None:
        raise CloudParseError("no vertex element", 0, path)
    try:
        return np.stack([np.asarray(vert[c], dtype=np.float64) for c in "xyz"], axis=1)
    except KeyError as e:
        raise CloudParseError(f"vertex element lacks property {e.args[0]!r}", 0, path) from None


@dataclass
class _Element:
    name: str
    count: int
    props: List[Tuple[str, str, Optional[str]]]  # (name, value dtype, list count dtype)


def _parse_header(data: bytes, path):
    if not data.startswith(b"ply"):
        raise CloudParseError("missing 'ply' magic", 0, path)
    pos = 0
    fmt = None
    elements: List[_Element] = []
    while True:
        end = data.find(b"\n", pos)
        if end < 0:
            raise CloudParseError("header is not terminated by end_header", pos, path)
        line = data[pos:end].decode("ascii", errors="replace").strip()
        words = line.split()
        start = pos
        pos = end + 1
        if not words or words[0] in ("ply", "comment", "obj_info"):
            continue
        if words[0] == "format":
            if len(words) < 2:
                raise CloudParseError("bad format line", start, path)
            fmt = words[1]
            if fmt == "binary_big_endian":
                raise CloudParseError("big-endian PLY is not supported", start, path)
            if fmt not in ("ascii", "binary_little_endian"):
                raise CloudParseError(f"unknown PLY format {fmt!r}", start, path)
        elif words[0] == "element":
            if len(words) != 3 or not words[2].isdigit():
                raise CloudParseError(f"bad element line {line!r}", start, path)
            elements.append(_Element(words[1], int(words[2]), []))
        elif words[0] == "property":
            if not elements:
                raise CloudParseError("property before any element", start, path)
            try:
                if words[1] == "list":
                    elements[-1].props.append((words[4], _PLY_TYPES[words[3]], _PLY_TYPES[words[2]]))
                else:
                    elements[-1].props.append((words[2], _PLY_TYPES[words[1]], None))
            except (IndexError, KeyError):
                raise CloudParseError(f"bad property line {line!r}", start, path) from None
        elif words[0] == "end_header":
            break
        else:
            raise CloudParseError(f"unexpected header line {line!r}", start, path)
    if fmt is None:
        raise CloudParseError("header has no format line", 0, path)
    return fmt, elements, pos


def parse_ply(data: bytes, path=None) -> Dict[str, Dict[str, np.ndarray]]:
    """Parse a PLY file into ``{element: {property: values}}``.

    List properties come back as a 2D array when every list has the same
    length, otherwise as a Python list of arrays.
    """
    fmt, elements, pos = _parse_header(data, path)
    out: Dict[str, Dict[str, np.ndarray]] = {}
    if fmt == "ascii":
        _parse_ascii_body(data, pos, elements, out, path)
        return out
    for el in elements:
        out[el.name], pos = _parse_binary_element(data, pos, el, path)
    return out


def _parse_binary_element(data, pos, el: _Element, path):
    if all(p[2] is None for p in el.props):
        dtype = np.dtype([(name, "<" + t) for name, t, _ in el.props])
        need = dtype.itemsize * el.count
        if pos + need > len(data):
            raise CloudParseError(f"truncated {el.name} payload: need {need} bytes, have {len(data) - pos}", len(data), path)
        arr = np.frombuffer(data, dtype=dtype, count=el.count, offset=pos)
        return {name: arr[name].copy() for name, _, _ in el.props}, pos + need

    # fast path: a single list property of uniform length
    if len(el.props) == 1 and el.count > 0:
        name, t, ct = el.props[0]
        cdt = np.dtype("<" + ct)
        if pos + cdt.itemsize > len(data):
            raise CloudParseError(f"truncated {el.name} payload", len(data), path)
        n0 = int(np.frombuffer(data, dtype=cdt, count=1, offset=pos)[0])
        row = np.dtype([("n", "<" + ct), ("v", "<" + t, (n0,))])
        need = row.itemsize * el.count
        if pos + need <= len(data):
            arr = np.frombuffer(data, dtype=row, count=el.count, offset=pos)
            if np.all(arr["n"] == n0):
                return {name: arr["v"].reshape(el.count, n0).copy()}, pos + need

    cols: Dict[str, list] = {name: [] for name, _, _ in el.props}
    for _ in range(el.count):
        for name, t, ct in el.props:
            if ct is None:
                dt = np.dtype("<" + t)
                if pos + dt.itemsize > len(data):
                    raise CloudParseError(f"truncated {el.name} payload", pos, path)
                cols[name].append(np.frombuffer(data, dtype=dt, count=1, offset=pos)[0])
                pos += dt.itemsize
            else:
                cdt, dt = np.dtype("<" + ct), np.dtype("<" + t)
                if pos + cdt.itemsize > len(data):
                    raise CloudParseError(f"truncated {el.name} payload", pos, path)
                n = int(np.frombuffer(data, dtype=cdt, count=1, offset=pos)[0])
                pos += cdt.itemsize
                if pos + n * dt.itemsize > len(data):
                    raise CloudParseError(f"truncated {el.name} payload", pos, path)
                cols[name].append(np.frombuffer(data, dtype=dt, count=n, offset=pos).copy())
                pos += n * dt.itemsize
    result = {}
    for name, t, ct in el.props:
        result[name] = np.array(cols[name]) if ct is None else cols[name]
    return result, pos


def _parse_ascii_body(data, pos, elements, out, path):
    lines = _lines_with_offsets(data, pos)
    li = 0
    for el in elements:
        cols: Dict[str, list] = {name: [] for name, _, _ in el.props}
        for _ in range(el.count):
            while li < len(lines) and not lines[li][1].strip():
                li += 1
            if li >= len(lines):
                raise CloudParseError(f"truncated {el.name} payload", len(data), path)
            offset, text = lines[li]
            tokens = text.split()
            ti = 0
            try:
                for name, t, ct in el.props:
                    if ct is None:
                        cols[name].append(float(tokens[ti]))
                        ti += 1
                    else:
                        n = int(tokens[ti])
                        cols[name].append(np.array([float(x) for x in tokens[ti + 1:ti + 1 + n]]))
                        if len(cols[name][-1]) != n:
                            raise IndexError
                        ti += 1 + n
            except (IndexError, ValueError):
                raise CloudParseError(f"bad {el.name} row {text.strip()!r}", offset, path) from None
            li += 1
        res = {}
        for name, t, ct in el.props:
            if ct is None:
                res[name] = np.array(cols[name], dtype=t)
            else:
                lens = {len(v) for v in cols[name]}
                res[name] = np.array(cols[name], dtype=t) if len(lens) == 1 else cols[name]
        out[el.name] = res


def _lines_with_offsets(data: bytes, pos: int = 0):
    out = []
    while pos < len(data):
        end = data.find(b"\n", pos)
        if end < 0:
            end = len(data)
        out.append((pos, data[pos:end].decode("ascii", errors="replace")))
        pos = end + 1
    return out


def _parse_xyz(data: bytes, path) -> np.ndarray:
    rows = []
    for offset, text in _lines_with_offsets(data):
        s = text.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.replace(",", " ").split()
        try:
            rows.append((float(parts[0]), float(parts[1]), float(parts[2])))
        except (IndexError, ValueError):
            raise CloudParseError(f"bad xyz row {s!r}", offset, path) from None
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def _parse_kitti(data: bytes, path) -> np.ndarray:
    rem = len(data) % 16
    if rem:
        raise CloudParseError(f"truncated record: file size {len(data)} is not a multiple of 16", len(data) - rem, path)
    arr = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    return arr[:, :3].astype(np.float64)


def mesh_to_ply_bytes(mesh: TriangleMesh) -> bytes:
    verts = np.asarray(mesh.vertices, dtype="<f4").reshape(-1, 3)
    tris = np.asarray(mesh.triangles).reshape(-1, 3)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(verts)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        f"element face {len(tris)}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    ).encode("ascii")
    faces = np.zeros(len(tris), dtype=np.dtype([("n", "u1"), ("v", "<i4", (3,))]))
    faces["n"] = 3
    faces["v"] = tris
    return header + verts.tobytes() + faces.tobytes()


def cloud_to_ply_bytes(points) -> bytes:
    pts = np.asarray(points, dtype="<f4").reshape(-1, 3)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(pts)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "end_header\n"
    ).encode("ascii")
    return header + pts.tobytes()


def _write(path, payload: bytes):
    try:
        Path(path).write_bytes(payload)
    except OSError as e:
        raise OSError(e.errno, f"cannot write {os.fspath(path)}: {e.strerror}") from e


def write_mesh(mesh: TriangleMesh, path) -> None:
    """Binary little-endian PLY with float32 vertices and int32 triangle lists."""
    _write(path, mesh_to_ply_bytes(mesh))


def write_cloud(points, path) -> None:
    _write(path, cloud_to_ply_bytes(points))


def write_xyz(points, path) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    _write(path, "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in pts.tolist()).encode("ascii"))
