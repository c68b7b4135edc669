"""Supervised pretraining and sign-agnostic test-time optimization.

Pretraining fits occupancy with binary cross-entropy on analytic shapes.
Test-time optimization adapts a copy of the network to one input cloud using
only unsigned information: the observed points should sit on the 0.5 level
set, random points in the cube should be confidently inside *or* outside.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, NonFiniteError
from .geometry import PointCloud, normalize_to_unit_cube, sample_surface
from .meshing import MiseConfig, TriMesh, mise
from .network import NetConfig, encode, init_model, occupancy, query_logits

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    batch_size: int = 8
    lr: float = 1e-4
    iterations: int = 5000
    queries_per_shape: int = 1024
    surface_points_per_shape: int = 3000
    noise_sigma: float = 0.05
    seed: int = 0
    # clean surface samples drawn once per shape; inputs are subsets of this pool
    pool_size: int = 10000
    padding: float = 0.05

    def validate(self):
        for name in ("batch_size", "iterations", "queries_per_shape",
                     "surface_points_per_shape", "pool_size"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")
        if self.lr <= 0:
            raise ContractError("lr must be positive")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be non-negative")
        return self


@dataclass
class SAOptConfig:
    iterations: int = 1000
    # kept for parity with the reference setup; n_surface/n_nonsurface are per-step totals
    batch: int = 16
    lr0: float = 3e-5
    decay: float = 0.3
    every: int = 400
    n_surface: int = 512
    n_nonsurface: int = 1536
    mode: str = "full"
    seed: int = 0
    reduction: str = "mean"

    def validate(self):
        if self.n_surface < 0 or self.n_nonsurface < 0 or self.n_surface + self.n_nonsurface < 1:
            raise ContractError("need n_surface + n_nonsurface > 0 (both >= 0)")
        if not 0 < self.decay <= 1:
            raise ContractError("decay must be in (0, 1]")
        if self.lr0 <= 0 or self.every < 1 or self.iterations < 0:
            raise ContractError("invalid lr0 / every / iterations")
        if self.mode not in ("full", "encoder_only"):
            raise ContractError(f"unknown mode {self.mode!r}")
        if self.reduction not in ("mean", "sum"):
            raise ContractError(f"unknown reduction {self.reduction!r}")
        return self


@dataclass
class TraceRow:
    iteration: int
    loss: float
    lr: float


@dataclass
class PretrainResult:
    model: object
    trace: list = field(default_factory=list)
    seconds: float = 0.0


def _check_loss(value, iteration, lr):
    if not np.isfinite(value):
        raise NonFiniteError(f"non-finite loss at iteration {iteration} (lr={lr:g}); aborting")


def _abort(exc, iteration, lr):
    return NonFiniteError(f"{exc} at iteration {iteration} (lr={lr:g}); aborting")


# ---------------------------------------------------------------------------
# pretraining


def make_training_sample(shape, pool, cfg, rng):
    """Noisy normalized input cloud, query points and their true occupancy."""
    pick = rng.choice(len(pool), size=cfg.surface_points_per_shape,
                      replace=len(pool) < cfg.surface_points_per_shape)
    pts = pool[pick] + rng.normal(0.0, cfg.noise_sigma, size=(len(pick), 3))
    cloud, tr = normalize_to_unit_cube(PointCloud(pts), cfg.padding)
    q = rng.random((cfg.queries_per_shape, 3))
    occ = shape.occupancy(tr.to_world(q)).astype(np.float64)
    return cloud, q, occ


def pretrain(shapes, cfg=None, net_cfg=None, model=None, progress=None):
    """Train from scratch (or continue ``model``) with mean BCE."""
    cfg = (cfg or PretrainConfig()).validate()
    if not shapes:
        raise ContractError("pretraining needs at least one shape")
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = init_model(net_cfg or NetConfig(), "random", seed=cfg.seed)
    pools = [sample_surface(s, cfg.pool_size, seed=int(rng.integers(2**31))).points
             for s in shapes]
    opt = ad.Adam(model.parameters())
    trace = []
    for it in range(cfg.iterations):
        opt.zero_grad()
        total = 0.0
        for b in rng.choice(len(shapes), size=cfg.batch_size):
            cloud, q, occ = make_training_sample(shapes[b], pools[b], cfg, rng)
            try:
                with ad.Graph():
                    logits = query_logits(model, encode(model, cloud), q)
                    loss = ad.scale(ad.bce(ad.sigmoid(logits), occ), 1.0 / cfg.batch_size)
                    ad.backward(loss)
            except NonFiniteError as exc:
                raise _abort(exc, it, cfg.lr) from None
            total += loss.item()
        _check_loss(total, it, cfg.lr)
        opt.step(cfg.lr)
        trace.append(TraceRow(it, total, cfg.lr))
        if progress is not None:
            progress(it, total)
    return PretrainResult(model, trace, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# sign-agnostic optimization


def unsigned_occupancy(logits):
    """``sigmoid(|g|)``, always in ``[0.5, 1)``."""
    return ad.sigmoid(ad.abs(logits))


def uce_loss(surface_logits, nonsurface_logits, reduction="mean"):
    """BCE of ``sigmoid(|g|)`` against 0.5 on the surface and 1 elsewhere."""
    s, k = ad.as_tensor(surface_logits), ad.as_tensor(nonsurface_logits)
    if s.size + k.size < 1:
        raise ContractError("uce_loss needs at least one logit")
    parts = [t for t in (s, k) if t.size]
    g = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
    target = np.concatenate([np.full(s.size, 0.5), np.ones(k.size)])
    return ad.bce(unsigned_occupancy(g), target, reduction=reduction)


def _draw_queries(points, cfg, rng, lo, hi):
    n = len(points)
    idx = rng.choice(n, size=cfg.n_surface, replace=n < cfg.n_surface)
    return points[idx], rng.uniform(lo, hi, size=(cfg.n_nonsurface, 3))


def _uce_step(model, pc, surf, free, grid, reduction):
    vol = encode(model, pc, grid)
    return uce_loss(query_logits(model, vol, surf), query_logits(model, vol, free), reduction)


def evaluate_uce(model, pc, cfg=None, seed=12345, grid=None, repeats=4):
    """UCE on a fixed query draw, for before/after comparisons."""
    cfg = (cfg or SAOptConfig()).validate()
    rng = np.random.default_rng(seed)
    lo, hi = _box(grid)
    total = 0.0
    with ad.no_grad():
        for _ in range(repeats):
            surf, free = _draw_queries(pc.points, cfg, rng, lo, hi)
            total += _uce_step(model, pc, surf, free, grid, cfg.reduction).item()
    return total / repeats


def _box(grid):
    if grid is None:
        return np.zeros(3), np.ones(3)
    return grid.lo, grid.hi


def sa_optimize(model, pc, cfg=None, grid=None, callback=None):
    """Adapt a clone of ``model`` to ``pc``; returns ``(model, trace)``.

    The input cloud is re-encoded every step. In ``encoder_only`` mode the
    decoder is excluded from the optimizer and left untouched.
    ``callback(iterations_done, model)`` runs after each step.
    """
    cfg = (cfg or SAOptConfig()).validate()
    if len(pc) == 0:
        raise ContractError("sa_optimize needs a non-empty point cloud")
    model = model.clone()
    if cfg.mode == "encoder_only":
        for name in model.decoder_names():
            model.params[name].requires_grad = False
        trainable = [model.params[n] for n in model.encoder_names()]
    else:
        trainable = model.parameters()
    opt = ad.Adam(trainable)
    rng = np.random.default_rng(cfg.seed)
    lo, hi = _box(grid)
    trace = []
    for it in range(cfg.iterations):
        lr = ad.staircase_lr(cfg.lr0, it, cfg.decay, cfg.every)
        surf, free = _draw_queries(pc.points, cfg, rng, lo, hi)
        opt.zero_grad()
        try:
            with ad.Graph():
                loss = _uce_step(model, pc, surf, free, grid, cfg.reduction)
                ad.backward(loss)
        except NonFiniteError as exc:
            raise _abort(exc, it, lr) from None
        value = loss.item()
        _check_loss(value, it, lr)
        opt.step(lr)
        trace.append(TraceRow(it, value, lr))
        if callback is not None:
            callback(it + 1, model)
    for p in model.parameters():
        p.requires_grad = True
        p.grad = None
    return model, trace


# ---------------------------------------------------------------------------
# end to end


def extract_mesh(model, pc, mise_cfg=None, grid=None):
    """Level set of ``model`` conditioned on ``pc``, in the model frame."""
    with ad.no_grad():
        vol = encode(model, pc, grid)
    lo, hi = _box(grid)
    mesh, _ = mise(lambda q: occupancy(model, vol, q), mise_cfg or MiseConfig(), (lo, hi))
    return mesh


def reconstruct(model, pc, sa_cfg=None, mise_cfg=None, padding=0.05, trace=None):
    """Normalize, optionally adapt, extract, and map back to world coordinates."""
    if len(pc) == 0:
        raise ContractError("cannot reconstruct an empty point cloud")
    cloud, tr = normalize_to_unit_cube(pc, padding)
    if sa_cfg is not None:
        model, rows = sa_optimize(model, cloud, sa_cfg)
        if trace is not None:
            trace.extend(rows)
    mesh = extract_mesh(model, cloud, mise_cfg)
    return TriMesh(tr.to_world(mesh.vertices), mesh.faces)


def write_trace(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss", "lr"])
        for r in rows:
            w.writerow([r.iteration, repr(float(r.loss)), repr(float(r.lr))])


def read_trace(path):
    with open(path, newline="") as fh:
        return [TraceRow(int(r["iteration"]), float(r["loss"]), float(r["lr"]))
                for r in csv.DictReader(fh)]


def plot_trace(rows, path, title="loss"):
    """Loss (log scale) and learning rate against iteration."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    it = [r.iteration for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(it, [r.loss for r in rows], lw=0.8, color="tab:blue")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title(title)
    ax2 = ax.twinx()
    ax2.plot(it, [r.lr for r in rows], lw=0.8, color="tab:gray", ls="--")
    ax2.set_ylabel("lr")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
