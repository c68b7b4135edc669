"""Surface metrics between a reconstructed mesh and ground truth samples."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractError
from .meshing import TriMesh


@dataclass
class SampledSurface:
    points: np.ndarray
    normals: np.ndarray

    def __len__(self):
        return len(self.points)


@dataclass
class MetricsReport:
    cd: float
    nc: float
    fs_tau: float
    fs_2tau: float
    tau: float

    def scaled(self):
        """Every metric multiplied by 100."""
        return {"cd": 100 * self.cd, "nc": 100 * self.nc,
                "fs_tau": 100 * self.fs_tau, "fs_2tau": 100 * self.fs_2tau}

    def to_dict(self):
        return {"raw": asdict(self), "scaled": self.scaled()}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def sample_mesh(mesh: TriMesh, n, seed=0):
    """Area-weighted uniform samples with face normals."""
    if mesh.is_empty:
        raise ContractError("cannot sample an empty mesh")
    cross = mesh.face_normals()
    area2 = np.linalg.norm(cross, axis=1)
    total = area2.sum()
    if total <= 0:
        raise ContractError("mesh has no non-degenerate faces")
    rng = np.random.default_rng(seed)
    face = rng.choice(len(area2), size=n, p=area2 / total)
    u, v = rng.random(n), rng.random(n)
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    tri = mesh.vertices[mesh.faces[face]]
    pts = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])
    normals = cross[face] / area2[face, None]
    return SampledSurface(pts, normals)


def nearest(src, dst):
    """Distance and index of the nearest ``dst`` point for each ``src`` point."""
    return cKDTree(dst).query(src, k=1)


def nearest_brute(src, dst):
    d2 = ((src[:, None, :] - dst[None, :, :]) ** 2).sum(axis=2)
    idx = np.argmin(d2, axis=1)
    return np.sqrt(d2[np.arange(len(src)), idx]), idx


def _fscore(p, r):
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def compute_metrics(pred: SampledSurface, gt: SampledSurface, tau=0.01):
    if tau <= 0:
        raise ContractError(f"tau must be positive, got {tau}")
    if len(pred) == 0 or len(gt) == 0:
        raise ContractError("metrics need non-empty point sets")
    d_pg, i_pg = nearest(pred.points, gt.points)
    d_gp, i_gp = nearest(gt.points, pred.points)
    cd = 0.5 * (d_pg.mean() + d_gp.mean())
    nc = 0.5 * (np.abs(np.sum(pred.normals * gt.normals[i_pg], axis=1)).mean()
                + np.abs(np.sum(gt.normals * pred.normals[i_gp], axis=1)).mean())
    fs = [_fscore(np.mean(d_pg <= t), np.mean(d_gp <= t)) for t in (tau, 2 * tau)]
    return MetricsReport(float(cd), float(min(nc, 1.0)), float(fs[0]), float(fs[1]), float(tau))
