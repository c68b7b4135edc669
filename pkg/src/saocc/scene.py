"""Sliding-window reconstruction of inputs larger than one network volume.

The global domain is a lattice of ``global_res`` voxels. It is tiled into
disjoint cores; each window sees its core dilated by a margin, encodes only
the points inside that input box, and writes occupancy for the lattice
vertices owned by its core. One marching-cubes pass runs on the assembled grid.

Vertex ``v`` of the ``(global_res + 1)**3`` lattice is owned by the core that
contains voxel ``min(v, global_res - 1)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from itertools import product

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .geometry import PointCloud
from .meshing import marching_cubes
from .network import VoxelGrid, encode, occupancy, receptive_radius
from .pipeline import sa_optimize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Window:
    index: int
    core_lo: tuple
    core_hi: tuple
    input_lo: tuple
    input_hi: tuple


@dataclass
class WindowPlan:
    global_res: int
    core: int
    margin: int
    windows: list = field(default_factory=list)
    origin: tuple = (0.0, 0.0, 0.0)
    voxel_size: float = 1.0

    @property
    def grid(self):
        return VoxelGrid(tuple(self.origin), self.voxel_size, (self.global_res,) * 3)

    def dump(self):
        lines = [f"# global_res={self.global_res} core={self.core} margin={self.margin} "
                 f"voxel_size={self.voxel_size!r} windows={len(self.windows)}"]
        for w in self.windows:
            lines.append(f"{w.index} core={list(w.core_lo)}..{list(w.core_hi)} "
                         f"input={list(w.input_lo)}..{list(w.input_hi)}")
        return "\n".join(lines) + "\n"


def plan_windows(global_res, core, margin, origin=(0.0, 0.0, 0.0), voxel_size=None):
    """Row-major tiling into cores of ``core`` voxels; inputs dilated by ``margin``."""
    if core < 1 or margin < 0 or global_res < 1:
        raise ContractError("need global_res >= 1, core >= 1, margin >= 0")
    margin = int(math.ceil(margin))
    voxel_size = 1.0 / global_res if voxel_size is None else voxel_size
    core = min(core, global_res)
    starts = list(range(0, global_res, core))
    windows = []
    for i, (x, y, z) in enumerate(product(starts, repeat=3)):
        lo = (x, y, z)
        hi = tuple(min(s + core, global_res) for s in lo)
        windows.append(Window(
            i, lo, hi,
            tuple(max(s - margin, 0) for s in lo),
            tuple(min(e + margin, global_res) for e in hi)))
    return WindowPlan(global_res, core, margin, windows, tuple(origin), float(voxel_size))


def default_margin(cfg):
    """Receptive radius plus one voxel for the trilinear lookup, rounded up to pooling blocks."""
    step = 2 ** cfg.unet_depth
    return step * math.ceil((receptive_radius(cfg) + 1) / step)


def window_seed(seed, index):
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _aligned(lo, hi, step, limit):
    return (tuple(step * (v // step) for v in lo),
            tuple(min(limit, step * -(-v // step)) for v in hi))


def window_input(plan, window, points, step=1):
    """Snapped input grid for ``window`` and the points whose voxel lies inside it."""
    if plan.global_res % step:
        raise ContractError(f"global_res {plan.global_res} must be a multiple of {step}")
    lo, hi = _aligned(window.input_lo, window.input_hi, step, plan.global_res)
    cell, _, _ = plan.grid.cell_of(points)
    keep = np.all((cell >= lo) & (cell < hi), axis=1)
    grid = VoxelGrid(tuple(plan.grid.lo + np.asarray(lo) * plan.voxel_size), plan.voxel_size,
                     tuple(h - l for l, h in zip(lo, hi)))
    return grid, keep


def core_vertices(plan, window):
    """Global lattice indices ``[K, 3]`` of the vertices owned by ``window``."""
    axes = []
    for lo, hi in zip(window.core_lo, window.core_hi):
        stop = hi + 1 if hi == plan.global_res else hi
        axes.append(np.arange(lo, stop))
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


def assemble_grid(model, pc, plan, sa_cfg=None, seed=0, audit=None):
    """Occupancy at every global lattice vertex, written window by window."""
    R = plan.global_res
    values = np.full((R + 1,) * 3, np.nan)
    writes = np.zeros((R + 1,) * 3, dtype=np.int32)
    step = 2 ** model.config.unet_depth
    for w in plan.windows:
        grid, keep = window_input(plan, w, pc.points, step)
        idx = core_vertices(plan, w)
        if not keep.any():
            log.info("window %d has no input points; core left empty", w.index)
            values[idx[:, 0], idx[:, 1], idx[:, 2]] = 0.0
        else:
            local = PointCloud(pc.points[keep])
            net = model
            if sa_cfg is not None:
                net, _ = sa_optimize(model, local, replace(sa_cfg, seed=window_seed(seed, w.index)),
                                     grid=grid)
            with ad.no_grad():
                vol = encode(net, local, grid)
            q = plan.grid.lo + idx * plan.voxel_size
            values[idx[:, 0], idx[:, 1], idx[:, 2]] = occupancy(net, vol, q)
        writes[idx[:, 0], idx[:, 1], idx[:, 2]] += 1
    if audit is not None:
        audit["writes"] = writes
    if np.any(writes != 1):
        raise ContractError("window cores do not cover the global lattice exactly once")
    return values


def full_volume_grid(model, pc, plan):
    """Single-pass reference: encode everything on the global grid at once."""
    R = plan.global_res
    with ad.no_grad():
        vol = encode(model, pc, plan.grid)
    idx = np.indices((R + 1,) * 3).reshape(3, -1).T
    return occupancy(model, vol, plan.grid.lo + idx * plan.voxel_size).reshape((R + 1,) * 3)


def reconstruct_scene(model, pc, plan, sa_cfg=None, seed=0, iso=0.5, closed=True):
    """Windowed occupancy followed by one global marching-cubes pass."""
    if len(pc) == 0:
        raise ContractError("cannot reconstruct an empty point cloud")
    values = assemble_grid(model, pc, plan, sa_cfg, seed)
    return marching_cubes(values, iso, plan.voxel_size, plan.grid.lo, closed)
