"""Convolutional occupancy network.

Point encoder (ResNet-FC blocks with intermediate grid pooling) -> average
pooling into a voxel grid -> hourglass 3D conv net -> feature volume. The
decoder reads trilinearly interpolated features at query points and maps
``[q, f_q]`` to an occupancy logit.

Coordinates live in a fixed model frame. Grids are axis-aligned lattices of
cubic voxels; feature ``(i, j, k)`` sits at the center of voxel ``(i, j, k)``.
The point encoder sees only each point's offset inside its voxel, so the
feature volume is equivariant to whole-voxel translations (in multiples of
``2**unet_depth`` voxels, which keeps pooling blocks aligned).
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .geometry import PointCloud


@dataclass
class NetConfig:
    grid_res: int = 32
    feature_dim: int = 32
    pointnet_blocks: int = 5
    unet_depth: int = 2
    decoder_blocks: int = 5
    decoder_hidden: int = 32
    encoder_hidden: int = 16
    unet_width: int = 16

    def validate(self):
        R = self.grid_res
        if R < 2 or R & (R - 1):
            raise ContractError(f"grid_res must be a power of two, got {R}")
        if not 1 <= self.unet_depth <= int(np.log2(R)):
            raise ContractError(f"unet_depth must be in [1, log2(R)], got {self.unet_depth}")
        for k, v in asdict(self).items():
            if v < 1:
                raise ContractError(f"{k} must be >= 1")
        return self


@dataclass(frozen=True)
class VoxelGrid:
    """Lattice of ``dims`` voxels of edge ``voxel_size`` starting at ``origin``."""

    origin: tuple
    voxel_size: float
    dims: tuple

    @classmethod
    def unit(cls, res):
        return cls((0.0, 0.0, 0.0), 1.0 / res, (res, res, res))

    @property
    def lo(self):
        return np.asarray(self.origin, dtype=np.float64)

    @property
    def hi(self):
        return self.lo + np.asarray(self.dims) * self.voxel_size

    def lattice_coords(self, points):
        """Feature-lattice coordinates (voxel centers at integers)."""
        return (np.asarray(points) - self.lo) / self.voxel_size - 0.5

    def cell_of(self, points):
        """Integer voxel index and in-voxel offset in ``[-0.5, 0.5)``."""
        u = (np.asarray(points) - self.lo) / self.voxel_size
        dims = np.asarray(self.dims)
        cell = np.clip(np.floor(u).astype(np.int64), 0, dims - 1)
        local = np.clip(u - cell, 0.0, 1.0) - 0.5
        flat = (cell[:, 0] * dims[1] + cell[:, 1]) * dims[2] + cell[:, 2]
        return cell, flat, local


@dataclass
class FeatureVolume:
    features: ad.Tensor
    grid: VoxelGrid


class ConvOccNet:
    """Named parameter store plus the forward passes."""

    def __init__(self, config, params):
        self.config = config
        self.params = params

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def decoder_names(self):
        return [k for k in self.params if k.startswith("dec.")]

    def encoder_names(self):
        return [k for k in self.params if not k.startswith("dec.")]

    def num_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def clone(self):
        params = {k: ad.Tensor(v.data.copy(), requires_grad=True, name=k)
                  for k, v in self.params.items()}
        return ConvOccNet(copy.deepcopy(self.config), params)

    def __getitem__(self, name):
        return self.params[name]


# ---------------------------------------------------------------------------
# parameter layout


def parameter_shapes(cfg):
    """Ordered ``name -> shape`` map; fully determined by the config."""
    h, C, H, w = cfg.encoder_hidden, cfg.feature_dim, cfg.decoder_hidden, cfg.unet_width
    shapes = {}

    def lin(name, i, o):
        shapes[f"{name}.W"] = (o, i)
        shapes[f"{name}.b"] = (o,)

    def resblock(name, i, o):
        lin(f"{name}.fc0", i, o)
        lin(f"{name}.fc1", o, o)
        if i != o:
            lin(f"{name}.short", i, o)

    def conv(name, i, o):
        shapes[f"{name}.K"] = (o, i, 3, 3, 3)
        shapes[f"{name}.b"] = (o,)

    lin("enc.pos", 3, 2 * h)
    for i in range(cfg.pointnet_blocks):
        resblock(f"enc.block{i}", 2 * h, h)
    lin("enc.out", h, C)
    for lvl in range(1, cfg.unet_depth + 1):
        conv(f"unet.down{lvl}", C if lvl == 1 else w, w)
    for lvl in range(cfg.unet_depth - 1, 0, -1):
        conv(f"unet.up{lvl}", 2 * w, w)
    conv("unet.final", w, C)
    lin("dec.lift", 3 + C, H)
    for i in range(cfg.decoder_blocks):
        resblock(f"dec.block{i}", H, H)
    lin("dec.head", H, 1)
    return shapes


def _fan_in(shape):
    return int(np.prod(shape[1:]))


def init_model(cfg=None, mode="random", seed=0, radius=0.3):
    """Create a network.

    ``random``: Kaiming-normal weights (fan-in), zero biases, and a zero
    second layer in every residual branch. ``geometric``: the same, except the
    decoder's coordinate pathway is built so that, with zero features, the
    logit approximates ``|q - c| - radius`` around the cube center ``c``.
    """
    cfg = (cfg or NetConfig()).validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".b"):
            data = np.zeros(shape)
        elif ".fc1." in name:
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, np.sqrt(2.0 / _fan_in(shape)), size=shape)
        params[name] = ad.Tensor(data, requires_grad=True, name=name)
    if mode == "geometric":
        if not 0 < radius < 0.5:
            raise ContractError(f"geometric init radius must be in (0, 0.5), got {radius}")
        _geometric_decoder(params, cfg, radius, rng)
    elif mode != "random":
        raise ContractError(f"unknown init mode {mode!r}")
    return ConvOccNet(cfg, params)


def _hemisphere(n):
    # Fibonacci lattice restricted to z > 0
    k = np.arange(n) + 0.5
    z = 1.0 - k / n
    phi = np.pi * (3.0 - np.sqrt(5.0)) * k
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def _geometric_decoder(params, cfg, radius, rng):
    H = cfg.decoder_hidden
    center = np.full(3, 0.5)
    dirs = _hemisphere(H // 2)
    dirs = np.concatenate([dirs, -dirs])
    W = np.zeros((H, 3 + cfg.feature_dim))
    W[:len(dirs), :3] = dirs
    b = np.zeros(H)
    b[:len(dirs)] = -dirs @ center
    params["dec.lift.W"].data[...] = W
    params["dec.lift.b"].data[...] = b
    # residual branches start at zero, so the hidden state is relu-free up to the head
    # head fitted by least squares to the sphere distance over the unit cube
    q = rng.uniform(0.0, 1.0, size=(20000, 3))
    hidden = np.maximum(q @ W[:, :3].T + b, 0.0)
    target = np.linalg.norm(q - center, axis=1) - radius
    A = np.concatenate([hidden, np.ones((len(q), 1))], axis=1)
    sol = np.linalg.lstsq(A, target, rcond=None)[0]
    params["dec.head.W"].data[...] = sol[:H][None, :]
    params["dec.head.b"].data[...] = sol[H:]


# ---------------------------------------------------------------------------
# forward


def _resblock(params, name, x):
    h = ad.linear(x, params[f"{name}.fc0.W"], params[f"{name}.fc0.b"])
    h = ad.linear(ad.relu(h), params[f"{name}.fc1.W"], params[f"{name}.fc1.b"])
    if f"{name}.short.W" in params:
        x = ad.linear(x, params[f"{name}.short.W"], params[f"{name}.short.b"])
    return ad.add(x, h)


def _conv(params, name, x):
    return ad.conv3d(x, params[f"{name}.K"], params[f"{name}.b"])


def encode_points(model, points, grid):
    """Per-point features ``[N, C]`` and their flat voxel ids."""
    p = model.params
    cfg = model.config
    _, flat, local = grid.cell_of(points)
    cells, seg = np.unique(flat, return_inverse=True)
    net = ad.linear(local, p["enc.pos.W"], p["enc.pos.b"])
    for i in range(cfg.pointnet_blocks):
        net = _resblock(p, f"enc.block{i}", net)
        if i < cfg.pointnet_blocks - 1:
            pooled = ad.gather_rows(ad.segment_mean(net, seg, len(cells)), seg)
            net = ad.concat([net, pooled], axis=1)
    return ad.linear(net, p["enc.out.W"], p["enc.out.b"]), flat


def hourglass(model, v0):
    """``[X, Y, Z, C] -> [X, Y, Z, C]``; all convolutions run at half resolution or below."""
    p = model.params
    D = model.config.unet_depth
    x = ad.reshape(v0, (1,) + v0.shape)
    skips = []
    cur = x
    for lvl in range(1, D + 1):
        cur = ad.relu(_conv(p, f"unet.down{lvl}", ad.resample3d(cur, "avg_down2")))
        skips.append(cur)
    for lvl in range(D - 1, 0, -1):
        up = ad.resample3d(cur, "nearest_up2")
        cur = ad.relu(_conv(p, f"unet.up{lvl}", ad.concat([up, skips[lvl - 1]], axis=-1)))
    cur = _conv(p, "unet.final", cur)
    out = ad.add(ad.resample3d(cur, "nearest_up2"), x)
    return ad.reshape(out, v0.shape)


def encode(model, pc, grid=None):
    """Point cloud -> :class:`FeatureVolume` on ``grid`` (default: unit cube, R^3)."""
    points = pc.points if isinstance(pc, PointCloud) else np.asarray(pc, dtype=np.float64)
    if len(points) == 0:
        raise ContractError("cannot encode an empty point cloud")
    # a canonical order makes pooling sums independent of the input order
    points = points[np.lexsort(points.T[::-1])]
    grid = grid or VoxelGrid.unit(model.config.grid_res)
    step = 2 ** model.config.unet_depth
    if any(d % step for d in grid.dims):
        raise ContractError(f"grid dims {grid.dims} must be multiples of {step}")
    feats, flat = encode_points(model, points, grid)
    v0 = ad.scatter_mean(feats, flat, grid.dims)
    return FeatureVolume(hourglass(model, v0), grid)


def query_logits(model, vol, coords):
    """Occupancy logits ``[M]`` at model-frame ``coords`` ``[M, 3]``."""
    p = model.params
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    f = ad.trilinear_query(vol.features, vol.grid.lattice_coords(coords))
    net = ad.linear(ad.concat([ad.Tensor(coords), f], axis=1), p["dec.lift.W"], p["dec.lift.b"])
    for i in range(model.config.decoder_blocks):
        net = _resblock(p, f"dec.block{i}", net)
    out = ad.linear(ad.relu(net), p["dec.head.W"], p["dec.head.b"])
    return ad.reshape(out, (coords.shape[0],))


def decoder_logits(model, coords, features):
    """Decoder alone on explicit feature rows (no volume lookup)."""
    p = model.params
    with ad.no_grad():
        net = ad.linear(ad.concat([ad.Tensor(coords), ad.Tensor(features)], axis=1),
                        p["dec.lift.W"], p["dec.lift.b"])
        for i in range(model.config.decoder_blocks):
            net = _resblock(p, f"dec.block{i}", net)
        return ad.linear(ad.relu(net), p["dec.head.W"], p["dec.head.b"]).data[:, 0]


def occupancy(model, vol, coords, chunk=65536):
    """Inference-only occupancy probabilities."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    out = np.empty(len(coords))
    with ad.no_grad():
        for s in range(0, len(coords), chunk):
            out[s:s + chunk] = ad.sigmoid(query_logits(model, vol, coords[s:s + chunk])).data
    return out


def receptive_radius(cfg):
    """Largest voxel distance at which a pooled input voxel can change an output voxel.

    Interval propagation along one axis through the hourglass (pool, conv,
    upsample), maximised over the input's position within a pooling block.
    """
    D = cfg.unet_depth
    worst = 0
    for x in range(2 ** D):
        a = b = x
        for _ in range(D):
            a, b = a // 2 - 1, b // 2 + 1
        for _ in range(D - 1):
            a, b = 2 * a - 1, 2 * b + 2
        a, b = 2 * (a - 1), 2 * (b + 1) + 1  # final conv at half resolution, then upsample
        worst = max(worst, x - a, b - x)
    return worst
