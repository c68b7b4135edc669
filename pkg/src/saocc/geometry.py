"""Analytic CSG shapes, point sampling and unit-cube normalization.

Shapes give exact signed distances for primitives and sign-exact bounds for
boolean combinations (``min``/``max``), which is enough to label occupancy.
Occupancy convention: 1 inside (sdf < 0), 0 outside.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ContractError, DegenerateError

PRIMITIVES = ("sphere", "box", "torus")
BOOLEANS = ("union", "intersection", "difference")
UNIT_BOX = (np.zeros(3), np.ones(3))


@dataclass
class Transform:
    """Rigid motion mapping local coordinates to parent coordinates."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def to_local(self, p):
        return (p - self.translation) @ self.rotation


@dataclass
class Shape:
    """One node of a CSG tree (a primitive or a boolean combination)."""

    type: str
    params: dict = field(default_factory=dict)
    children: list = field(default_factory=list)
    transform: Transform | None = None

    def __post_init__(self):
        if self.type in PRIMITIVES:
            _validate_primitive(self.type, self.params)
            if self.children:
                raise ContractError(f"{self.type} cannot have children")
        elif self.type in BOOLEANS:
            if len(self.children) < 2:
                raise ContractError(f"{self.type} needs at least two children")
        else:
            raise ContractError(f"unknown shape type {self.type!r}")

    def sdf(self, points):
        """Signed distance (bound) at ``[N, 3]`` points, negative inside."""
        p = np.asarray(points, dtype=np.float64)
        if self.transform is not None:
            p = self.transform.to_local(p)
        if self.type == "sphere":
            return np.linalg.norm(p - self.params["center"], axis=-1) - self.params["radius"]
        if self.type == "box":
            q = np.abs(p - self.params["center"]) - self.params["half_extents"]
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            return outside + np.minimum(q.max(axis=-1), 0.0)
        if self.type == "torus":
            d = p - self.params["center"]
            ring = np.hypot(d[..., 0], d[..., 1]) - self.params["major_radius"]
            return np.hypot(ring, d[..., 2]) - self.params["minor_radius"]
        values = [c.sdf(p) for c in self.children]
        if self.type == "union":
            return np.min(values, axis=0)
        if self.type == "intersection":
            return np.max(values, axis=0)
        return np.max([values[0]] + [-v for v in values[1:]], axis=0)

    def occupancy(self, points):
        return (self.sdf(points) < 0).astype(np.float64)

    def primitive_count(self):
        if self.type in PRIMITIVES:
            return 1
        return int(np.sum([c.primitive_count() for c in self.children]))

    def depth(self):
        return 1 + max((c.depth() for c in self.children), default=0)

    # -- serialization -----------------------------------------------------

    def to_dict(self):
        d = {"type": self.type,
             "params": {k: (np.asarray(v).tolist() if np.ndim(v) else float(v))
                        for k, v in self.params.items()},
             "children": [c.to_dict() for c in self.children]}
        if self.transform is not None:
            d["transform"] = {"rotation": self.transform.rotation.tolist(),
                              "translation": self.transform.translation.tolist()}
        else:
            d["transform"] = None
        return d

    @classmethod
    def from_dict(cls, d):
        params = {k: (np.asarray(v, dtype=np.float64) if isinstance(v, list) else float(v))
                  for k, v in d.get("params", {}).items()}
        tr = d.get("transform")
        transform = None
        if tr is not None:
            transform = Transform(np.asarray(tr["rotation"], dtype=np.float64),
                                  np.asarray(tr["translation"], dtype=np.float64))
        return cls(d["type"], params, [cls.from_dict(c) for c in d.get("children", [])],
                   transform)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def __eq__(self, other):
        return isinstance(other, Shape) and self.to_dict() == other.to_dict()


def _validate_primitive(kind, params):
    need = {"sphere": ("center", "radius"), "box": ("center", "half_extents"),
            "torus": ("center", "major_radius", "minor_radius")}[kind]
    missing = [k for k in need if k not in params]
    if missing:
        raise ContractError(f"{kind} is missing parameters {missing}")
    params["center"] = np.asarray(params["center"], dtype=np.float64).reshape(3)
    if kind == "sphere" and not params["radius"] > 0:
        raise ContractError("sphere radius must be positive")
    if kind == "box":
        params["half_extents"] = np.asarray(params["half_extents"], dtype=np.float64).reshape(3)
        if not np.all(params["half_extents"] > 0):
            raise ContractError("box half extents must be positive")
    if kind == "torus":
        R, r = params["major_radius"], params["minor_radius"]
        if not (0 < r < R):
            raise ContractError("torus needs 0 < minor_radius < major_radius")


def sphere(center, radius):
    return Shape("sphere", {"center": center, "radius": float(radius)})


def box(center, half_extents):
    return Shape("box", {"center": center, "half_extents": half_extents})


def torus(center, major_radius, minor_radius):
    return Shape("torus", {"center": center, "major_radius": float(major_radius),
                           "minor_radius": float(minor_radius)})


def union(*children):
    return Shape("union", children=list(children))


def intersection(*children):
    return Shape("intersection", children=list(children))


def difference(*children):
    return Shape("difference", children=list(children))


def sdf_eval(shape, q):
    """Signed distance and occupancy bit at one point or an ``[N, 3]`` batch."""
    d = shape.sdf(np.asarray(q, dtype=np.float64))
    return d, (d < 0).astype(np.int8)


# ---------------------------------------------------------------------------
# point clouds


@dataclass
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if self.normals.shape != self.points.shape:
                raise ContractError("normals must match points")

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class DomainTransform:
    """``cube = scale * world + translation``."""

    scale: float
    translation: np.ndarray

    def to_cube(self, x):
        return np.asarray(x) * self.scale + self.translation

    def to_world(self, x):
        return (np.asarray(x) - self.translation) / self.scale


def _grad_sdf(shape, p, h=1e-6):
    g = np.empty_like(p)
    for ax in range(3):
        e = np.zeros(3)
        e[ax] = h
        g[:, ax] = (shape.sdf(p + e) - shape.sdf(p - e)) / (2 * h)
    return g


def _line_project(shape, p, tol, iters=60):
    """Bisection along the gradient line for points where Newton cycles at creases."""
    f0 = shape.sdf(p)
    d = _grad_sdf(shape, p)
    d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
    # walk against the sign of f until the sign flips
    lo = np.zeros(len(p))
    hi = -2.0 * f0
    f_hi = shape.sdf(p + hi[:, None] * d)
    bracket = np.sign(f_hi) != np.sign(f0)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        fm = shape.sdf(p + mid[:, None] * d)
        same = np.sign(fm) == np.sign(f0)
        lo = np.where(same, mid, lo)
        hi = np.where(same, hi, mid)
    t = np.where(bracket, 0.5 * (lo + hi), 0.0)
    return p + t[:, None] * d


def sample_surface(shape, n, seed, bbox=UNIT_BOX, band=0.02, tol=1e-6, max_iter=20):
    """``n`` points on the zero level set, with unit normals.

    Candidates are drawn uniformly in ``bbox`` and kept when within ``band``
    of the surface (both scaled by the box size), then Newton-projected along
    the numerical sdf gradient.
    """
    if n < 1:
        raise ContractError("sample_surface needs n >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    scale = float(np.max(hi - lo))
    band, tol = band * scale, tol * scale
    out = []
    total = failed = found = 0
    draw = 20000
    for _ in range(200):
        cand = rng.uniform(lo, hi, size=(draw, 3))
        cand = cand[np.abs(shape.sdf(cand)) < band]
        yield_ = max(len(cand), 1) / draw
        p = cand
        for _ in range(max_iter):
            f = shape.sdf(p)
            done = np.abs(f) <= tol
            if done.all():
                break
            g = _grad_sdf(shape, p)
            gg = np.einsum("ij,ij->i", g, g)
            step = np.where(done | (gg == 0), 0.0, f / np.where(gg == 0, 1.0, gg))
            p = p - step[:, None] * g
        stuck = np.abs(shape.sdf(p)) > tol
        if stuck.any():
            p[stuck] = _line_project(shape, p[stuck], tol)
        ok = np.abs(shape.sdf(p)) <= tol
        total += len(p)
        failed += int((~ok).sum())
        out.append(p[ok])
        found += int(ok.sum())
        if found >= n:
            break
        draw = int(min(2_000_000, max(20000, 1.2 * (n - found) / yield_)))
    else:
        raise DegenerateError("could not find enough surface points")
    # min/max bounds admit spurious band candidates near concave creases
    # (a positive local minimum of the bound); those are discarded
    if failed > 0.5 * total:
        raise DegenerateError(f"surface projection failed for {failed}/{total} candidates")
    pts = np.concatenate(out)
    pts = pts[rng.permutation(len(pts))[:n]]
    normals = _grad_sdf(shape, pts)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return PointCloud(pts, normals)


def sample_uniform(bbox, n, seed):
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    if not np.all(hi > lo):
        raise ContractError("bounding box is degenerate")
    return np.random.default_rng(seed).uniform(lo, hi, size=(n, 3))


def add_noise(pc, sigma, seed):
    """Gaussian jitter of every coordinate; normals are dropped."""
    if sigma < 0:
        raise ContractError("sigma must be non-negative")
    rng = np.random.default_rng(seed)
    return PointCloud(pc.points + rng.normal(0.0, sigma, size=pc.points.shape) if sigma
                      else pc.points.copy())


def normalize_to_unit_cube(pc, padding=0.05):
    """Center the tight bbox in ``[0, 1]^3`` with its longest side ``1 - 2*padding``."""
    pts = pc.points
    if len(pts) < 2:
        raise DegenerateError("need at least two points to normalize")
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = float(np.max(hi - lo))
    if extent <= 0:
        raise DegenerateError("all points coincide")
    s = (1.0 - 2.0 * padding) / extent
    t = 0.5 - s * (lo + hi) / 2.0
    tr = DomainTransform(s, t)
    normals = None if pc.normals is None else pc.normals.copy()
    return PointCloud(tr.to_cube(pts), normals), tr


# ---------------------------------------------------------------------------
# random shapes


@dataclass
class ShapeConfig:
    min_primitives: int = 1
    max_primitives: int = 4
    min_radius: float = 0.1
    max_radius: float = 0.35
    margin: float = 0.08
    min_volume: float = 0.01
    max_retries: int = 100


def _random_primitive(rng, cfg):
    kind = PRIMITIVES[rng.integers(len(PRIMITIVES))]
    center = rng.uniform(0.3, 0.7, size=3)
    lo, hi = cfg.min_radius, cfg.max_radius
    if kind == "sphere":
        node = sphere(center, rng.uniform(lo, hi))
    elif kind == "box":
        node = box(center, rng.uniform(lo, hi, size=3) * 0.8)
    else:
        major = rng.uniform(max(lo * 1.5, lo), hi)
        minor = rng.uniform(lo * 0.6, min(0.55 * major, hi))
        node = torus(center, major, max(minor, 0.5 * lo))
    if kind != "sphere":
        rot = Rotation.random(random_state=rng.integers(2 ** 31)).as_matrix()
        # rotate about the primitive's center
        node.transform = Transform(rot, center - rot @ center)
    return node


def _valid(shape, cfg, res=48):
    g = (np.arange(res) + 0.5) / res
    grid = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    inside = shape.sdf(grid) < 0
    if inside.mean() < cfg.min_volume:
        return False
    band = np.any((grid < cfg.margin) | (grid > 1.0 - cfg.margin), axis=1)
    return not inside[band].any()


def random_shape(seed, config=None):
    """A random CSG shape lying inside the unit cube (deterministic per seed)."""
    cfg = config or ShapeConfig()
    if not (1 <= cfg.min_primitives <= cfg.max_primitives) or not (
            0 < cfg.min_radius <= cfg.max_radius):
        raise ContractError("invalid shape config bounds")
    rng = np.random.default_rng(seed)
    for _ in range(cfg.max_retries):
        k = int(rng.integers(cfg.min_primitives, cfg.max_primitives + 1))
        node = _random_primitive(rng, cfg)
        for _ in range(k - 1):
            other = _random_primitive(rng, cfg)
            op = rng.choice(BOOLEANS, p=[0.6, 0.15, 0.25])
            node = Shape(str(op), children=[node, other])
        if node.primitive_count() == k and _valid(node, cfg):
            return node
    # fall back to a centered sphere rather than failing
    return sphere([0.5, 0.5, 0.5], 0.5 * (cfg.min_radius + cfg.max_radius))
