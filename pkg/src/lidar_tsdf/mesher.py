"""Marching-cubes extraction of the zero level set of a :class:`TsdfField`."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._mc_tables import CORNER_OFFSETS, EDGE_CORNERS, TRI_TABLE
from .tsdf import TsdfField

_TRI = np.array(TRI_TABLE, dtype=np.int64)
_TRI_COUNT = (_TRI >= 0).sum(axis=1) // 3
_CORNERS = np.array(CORNER_OFFSETS, dtype=np.int64)
_EDGES = np.array(EDGE_CORNERS, dtype=np.int64)
# lower corner offset and axis of every cube edge
_EDGE_LOWER = np.minimum(_CORNERS[_EDGES[:, 0]], _CORNERS[_EDGES[:, 1]])
_EDGE_AXIS = np.argmax(np.abs(_CORNERS[_EDGES[:, 1]] - _CORNERS[_EDGES[:, 0]]), axis=1)


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: Optional[np.ndarray] = None

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.triangles)

    def face_normals(self) -> np.ndarray:
        """Unnormalized geometric normals (right-hand rule over the index order)."""
        v = self.vertices[self.triangles]
        return np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])

    def boundary_edges(self) -> int:
        """Number of undirected edges not shared by exactly two triangles."""
        if len(self.triangles) == 0:
            return 0
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        e = np.sort(e, axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return int((counts != 2).sum())


def marching_cubes(field: TsdfField, alpha: Optional[float] = None) -> TriangleMesh:
    """Triangulate the zero crossing of ``field``.

    Cells with an undefined (NaN) corner are skipped. Corners with value
    exactly zero count as positive. Edge vertices are shared between cells
    and placed at ``t = d_a / (d_a - d_b)`` from the lower corner ``a``.
    Triangles face the positive side of the field.
    """
    vals = np.asarray(field.values, dtype=np.float64)
    cell = float(field.cell_size if alpha is None else alpha)
    if vals.ndim != 3 or min(vals.shape) < 2:
        return TriangleMesh.empty()
    nx, ny, nz = vals.shape
    cx, cy, cz = nx - 1, ny - 1, nz - 1

    def corner(c):
        ox, oy, oz = CORNER_OFFSETS[c]
        return vals[ox:ox + cx, oy:oy + cy, oz:oz + cz]

    valid = np.ones((cx, cy, cz), dtype=bool)
    case = np.zeros((cx, cy, cz), dtype=np.uint8)
    for c in range(8):
        v = corner(c)
        valid &= np.isfinite(v)
        case |= (v < 0).astype(np.uint8) << np.uint8(c)
    active = valid & (case != 0) & (case != 255)
    cells = np.argwhere(active)
    if len(cells) == 0:
        return TriangleMesh.empty()
    cases = case[active].astype(np.int64)

    ntri = _TRI_COUNT[cases]
    cell_of_tri = np.repeat(np.arange(len(cells)), ntri)
    slot = np.arange(len(cell_of_tri)) - np.repeat(np.cumsum(ntri) - ntri, ntri)
    cols = slot[:, None] * 3 + np.arange(3)
    tri_edges = _TRI[cases[cell_of_tri][:, None], cols]

    # global edge key: linear index of the edge's lower grid vertex, times 3, plus axis
    lower = cells[cell_of_tri][:, None, :] + _EDGE_LOWER[tri_edges]
    axis = _EDGE_AXIS[tri_edges]
    keys = (np.ravel_multi_index(lower.reshape(-1, 3).T, vals.shape).reshape(lower.shape[:2]) * 3 + axis)
    ukeys, inverse = np.unique(keys.reshape(-1), return_inverse=True)
    triangles = inverse.reshape(-1, 3)

    base = np.stack(np.unravel_index(ukeys // 3, vals.shape), axis=1)
    uaxis = ukeys % 3
    tip = base.copy()
    tip[np.arange(len(tip)), uaxis] += 1
    da = vals[tuple(base.T)]
    db = vals[tuple(tip.T)]
    t = np.clip(da / (da - db), 0.0, 1.0)
    pos = base.astype(np.float64)
    pos[np.arange(len(pos)), uaxis] += t
    vertices = field.origin + cell * (field.lo + pos)

    # the table winds triangles toward the negative side; flip to face positive
    triangles = triangles[:, ::-1].copy()
    return TriangleMesh(vertices, triangles.astype(np.int64))
