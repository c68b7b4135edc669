"""Iso-surface extraction: marching cubes and coarse-to-fine refinement (MISE).

The 256-case triangle table is generated at import time by tracing the
iso-contour around the six faces of the cube. Faces with two diagonal inside
corners always separate those corners, a rule that depends only on the face's
own values, so neighbouring cubes agree and the output is watertight.

"Inside" means value > iso. Triangles wind so their normals point toward
decreasing values.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .errors import ContractError

log = logging.getLogger(__name__)

# corner c sits at offset (c & 1, c >> 1 & 1, c >> 2 & 1)
CORNERS = np.array([[c & 1, c >> 1 & 1, c >> 2 & 1] for c in range(8)])
# edge = (axis, lower corner)
EDGES = [(a, c) for a in range(3) for c in range(8) if not c >> a & 1]
_EDGE_ID = {(c, c | 1 << a): e for e, (a, c) in enumerate(EDGES)}


def _edge_between(c0, c1):
    return _EDGE_ID[(min(c0, c1), max(c0, c1))]


def _faces():
    faces = []
    for a in range(3):
        u, v = [d for d in range(3) if d != a]
        for s in (0, 1):
            ring = []
            for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
                ring.append((s << a) | (du << u) | (dv << v))
            faces.append(ring)
    return faces


def _case_triangles(case):
    inside = [bool(case >> c & 1) for c in range(8)]
    links = {}

    def link(e0, e1):
        links.setdefault(e0, []).append(e1)
        links.setdefault(e1, []).append(e0)

    for ring in _faces():
        edges = [_edge_between(ring[i], ring[(i + 1) % 4]) for i in range(4)]
        crossed = [i for i in range(4) if inside[ring[i]] != inside[ring[(i + 1) % 4]]]
        if len(crossed) == 2:
            link(edges[crossed[0]], edges[crossed[1]])
        elif len(crossed) == 4:
            for i in range(4):
                if inside[ring[i]]:
                    link(edges[i - 1], edges[i])

    mid = {e: CORNERS[c] + 0.5 * (np.arange(3) == a) for e, (a, c) in enumerate(EDGES)}
    tris = []
    seen = set()
    for start in sorted(links):
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        prev, cur = None, start
        while True:
            nxt = [e for e in links[cur] if e != prev]
            nxt = nxt[0] if nxt else links[cur][0]
            if nxt == start:
                break
            loop.append(nxt)
            seen.add(nxt)
            prev, cur = cur, nxt
        pts = np.array([mid[e] for e in loop])
        # Newell normal of the loop
        normal = np.cross(pts, np.roll(pts, -1, axis=0)).sum(axis=0)
        outward = np.zeros(3)
        for e in loop:
            a, c = EDGES[e]
            c_in = c if inside[c] else c | 1 << a
            outward += mid[e] - CORNERS[c_in]
        if normal @ outward < 0:
            loop = loop[::-1]
        for i in range(1, len(loop) - 1):
            tris.append((loop[0], loop[i], loop[i + 1]))
    return tris


def _build_table():
    cases = [_case_triangles(c) for c in range(256)]
    width = max(len(t) for t in cases)
    table = np.full((256, width, 3), -1, dtype=np.int64)
    for c, tris in enumerate(cases):
        if tris:
            table[c, :len(tris)] = tris
    return table


TRI_TABLE = _build_table()
TRI_COUNT = (TRI_TABLE[:, :, 0] >= 0).sum(axis=1)


@dataclass
class TriMesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    @property
    def is_empty(self):
        return len(self.faces) == 0

    def validate(self):
        if not np.all(np.isfinite(self.vertices)):
            raise ContractError("mesh has non-finite vertices")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ContractError("face index out of range")
        f = self.faces
        if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise ContractError("mesh has degenerate faces")
        return self

    def edges(self):
        """Undirected edges ``[E, 2]`` with their face counts."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0, return_counts=True)

    def boundary_edge_count(self):
        if self.is_empty:
            return 0
        _, counts = self.edges()
        return int(np.sum(counts == 1))

    def euler_characteristic(self):
        if self.is_empty:
            return 0
        used = np.unique(self.faces)
        edges, _ = self.edges()
        return len(used) - len(edges) + len(self.faces)

    def face_normals(self):
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        return n

    def transformed(self, scale, translation):
        return TriMesh(self.vertices * scale + translation, self.faces.copy())


def marching_cubes(grid, iso=0.5, cell_size=1.0, origin=(0.0, 0.0, 0.0), closed=False):
    """Triangulate the ``iso`` level set of a lattice of values.

    ``grid`` is ``[nx, ny, nz]`` with sample ``(i, j, k)`` at
    ``origin + (i, j, k) * cell_size``. Vertices on shared lattice edges are
    merged by edge key. ``closed`` surrounds the grid with one layer of
    outside samples so surfaces cut by the border get capped there.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3 or min(grid.shape) < 2:
        raise ContractError(f"marching_cubes needs a 3-D grid with >= 2 samples per axis, got {grid.shape}")
    if not np.all(np.isfinite(grid)):
        raise ContractError("marching_cubes: non-finite grid values")
    shift = 0
    if closed:
        grid = np.pad(grid, 1, constant_values=min(grid.min(), iso) - 1.0)
        shift = 1
    nx, ny, nz = grid.shape
    inside = grid > iso
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for c, (dx, dy, dz) in enumerate(CORNERS):
        case |= inside[dx:nx - 1 + dx, dy:ny - 1 + dy, dz:nz - 1 + dz].astype(np.int64) << c
    cells = np.argwhere(TRI_COUNT[case] > 0)
    if len(cells) == 0:
        return TriMesh()
    cases = case[cells[:, 0], cells[:, 1], cells[:, 2]]
    local = TRI_TABLE[cases]  # [K, T, 3]
    valid = local[:, :, 0] >= 0
    cell_of_tri = np.repeat(np.arange(len(cells)), valid.sum(axis=1))
    tri_edges = local[valid]  # [F, 3] local edge ids

    edge_axis = np.array([a for a, _ in EDGES])
    edge_base = CORNERS[[c for _, c in EDGES]]
    base = cells[cell_of_tri][:, None, :] + edge_base[tri_edges]  # [F, 3, 3]
    axis = edge_axis[tri_edges]
    key = ((axis * nx + base[..., 0]) * ny + base[..., 1]) * nz + base[..., 2]
    uniq, inv = np.unique(key.ravel(), return_inverse=True)

    a = uniq // (nx * ny * nz)
    rest = uniq % (nx * ny * nz)
    p0 = np.stack([rest // (ny * nz), rest // nz % ny, rest % nz], axis=1)
    p1 = p0 + np.eye(3, dtype=np.int64)[a]
    v0 = grid[p0[:, 0], p0[:, 1], p0[:, 2]]
    v1 = grid[p1[:, 0], p1[:, 1], p1[:, 2]]
    t = (iso - v0) / (v1 - v0)
    verts = np.asarray(origin, dtype=np.float64) + (p0 - shift + t[:, None] * (p1 - p0)) * cell_size
    return TriMesh(verts, inv.reshape(-1, 3))


@dataclass
class MiseConfig:
    initial_res: int = 32
    final_res: int = 128
    iso: float = 0.5
    # cap surfaces that leave the extraction box so meshes stay watertight
    closed: bool = True

    def validate(self):
        if self.initial_res < 1 or self.final_res < self.initial_res:
            raise ContractError("MISE resolutions must satisfy 1 <= initial_res <= final_res")
        ratio = self.final_res // self.initial_res
        if ratio * self.initial_res != self.final_res or ratio & (ratio - 1):
            raise ContractError(
                f"final_res {self.final_res} must be initial_res {self.initial_res} times a power of 2")
        return self

    @property
    def steps(self):
        return int(np.log2(self.final_res // self.initial_res))


def _lattice_points(idx, res, lo, hi):
    return lo + idx * ((hi - lo) / res)


def _active_cells(values, iso):
    inside = values > iso
    r = np.array(values.shape) - 1
    any_in = np.zeros(tuple(r), dtype=bool)
    all_in = np.ones(tuple(r), dtype=bool)
    for dx, dy, dz in CORNERS:
        c = inside[dx:dx + r[0], dy:dy + r[1], dz:dz + r[2]]
        any_in |= c
        all_in &= c
    active = any_in & ~all_in
    grown = active.copy()
    grown[1:] |= active[:-1]
    grown[:-1] |= active[1:]
    grown[:, 1:] |= active[:, :-1]
    grown[:, :-1] |= active[:, 1:]
    grown[:, :, 1:] |= active[:, :, :-1]
    grown[:, :, :-1] |= active[:, :, 1:]
    return grown


def mise(query, cfg=None, box=((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))):
    """Coarse-to-fine extraction of the ``cfg.iso`` level set of ``query``.

    ``query(points [M, 3]) -> values [M]``. Returns ``(mesh, evaluations)``.
    """
    cfg = (cfg or MiseConfig()).validate()
    lo = np.asarray(box[0], dtype=np.float64)
    hi = np.asarray(box[1], dtype=np.float64)
    res = cfg.initial_res
    idx = np.indices((res + 1,) * 3).reshape(3, -1).T
    values = np.asarray(query(_lattice_points(idx, res, lo, hi)), dtype=np.float64)
    values = values.reshape((res + 1,) * 3)
    evaluated = np.ones(values.shape, dtype=bool)
    count = values.size

    for _ in range(cfg.steps):
        active = _active_cells(values, cfg.iso)
        fine_res = 2 * res
        n = fine_res + 1
        ancestor = np.arange(n) // 2
        fine = values[np.ix_(ancestor, ancestor, ancestor)]
        fine_eval = np.zeros((n, n, n), dtype=bool)
        fine_eval[::2, ::2, ::2] = evaluated
        want = np.zeros((n, n, n), dtype=bool)
        for dx, dy, dz in product(range(3), repeat=3):
            want[dx:dx + fine_res - 1:2, dy:dy + fine_res - 1:2, dz:dz + fine_res - 1:2] |= active
        todo = want & ~fine_eval
        pts_idx = np.argwhere(todo)
        if len(pts_idx):
            fine[todo] = np.asarray(query(_lattice_points(pts_idx, fine_res, lo, hi)), dtype=np.float64)
        fine_eval |= todo
        count += len(pts_idx)
        values, evaluated, res = fine, fine_eval, fine_res
        log.debug("mise level %d: %d new evaluations", res, len(pts_idx))

    mesh = marching_cubes(values, cfg.iso, (hi - lo) / res, lo, cfg.closed)
    return mesh, count
