"""Differentiable operations.

Volumes are channels-last: ``[B, X, Y, Z, C]`` for batched conv inputs and
``[X, Y, Z, C]`` for a single feature volume. Convolution kernels keep the
usual ``[O, C, 3, 3, 3]`` layout.
"""

from __future__ import annotations

import logging
from itertools import product

import numpy as np
import scipy.sparse as sp

from ..errors import DimensionError, NonFiniteError
from .tensor import Tensor, make_result

log = logging.getLogger(__name__)

BCE_EPS = 1e-7
# largest double strictly below 1 and smallest positive normal double
_SIG_HI = np.nextafter(1.0, 0.0)
_SIG_LO = np.finfo(np.float64).tiny


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(kind, arr):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{kind}: non-finite input")


# ---------------------------------------------------------------------------
# elementwise


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, _SIG_LO, _SIG_HI)


def elementwise(x, kind):
    """Apply ``relu``, ``sigmoid`` or ``abs`` elementwise."""
    x = as_tensor(x)
    _check_finite(kind, x.data)
    xd = x.data
    if kind == "relu":
        mask = xd > 0
        out = np.where(mask, xd, 0.0)

        def bw(g):
            return (g * mask,)
    elif kind == "sigmoid":
        out = _sigmoid(xd)

        def bw(g):
            return (g * out * (1.0 - out),)
    elif kind == "abs":
        out = np.abs(xd)
        sign = np.sign(xd)

        def bw(g):
            return (g * sign,)
    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return make_result(kind, out, (x,), bw)


def relu(x):
    return elementwise(x, "relu")


def sigmoid(x):
    return elementwise(x, "sigmoid")


def abs(x):  # noqa: A001 - mirrors numpy naming
    return elementwise(x, "abs")


# ---------------------------------------------------------------------------
# arithmetic plumbing


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return make_result("add", a.data + b.data, (a, b), lambda g: (g, g))


def scale(x, c):
    x = as_tensor(x)
    c = float(c)
    return make_result("scale", x.data * c, (x,), lambda g: (g * c,))


def mean(x):
    x = as_tensor(x)
    n = x.data.size
    shape = x.shape
    return make_result("mean", np.array(x.data.mean()), (x,),
                       lambda g: (np.full(shape, float(g) / n),))


def sum(x):  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    return make_result("sum", np.array(x.data.sum()), (x,),
                       lambda g: (np.full(shape, float(g)),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise DimensionError(
                f"concat: shapes {[t.shape for t in tensors]} disagree off axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return make_result("concat", out, tensors, bw)


def gather_rows(x, index):
    """``x[index]`` for a 2-D tensor; gradients are summed per source row."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    rows = x.shape[0]
    if index.size and (index.min() < 0 or index.max() >= rows):
        raise IndexError(f"gather_rows: index out of range [0, {rows})")
    out = x.data[index]

    def bw(g):
        m = sp.csr_matrix(
            (np.ones(index.size), (index, np.arange(index.size))), shape=(rows, index.size))
        return (np.asarray(m @ g),)

    return make_result("gather_rows", out, (x,), bw)


# ---------------------------------------------------------------------------
# dense layers


def linear(x, W, b):
    """Rows of ``x @ W.T + b``."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.ndim != 2 or W.ndim != 2 or b.ndim != 1 or x.shape[1] != W.shape[1] \
            or W.shape[0] != b.shape[0]:
        raise DimensionError(
            f"linear: x {x.shape}, W {W.shape}, b {b.shape} are incompatible")
    xd, Wd = x.data, W.data
    out = xd @ Wd.T + b.data

    def bw(g):
        dx = g @ Wd if x.requires_grad else None
        return (dx, g.T @ xd, g.sum(axis=0))

    return make_result("linear", out, (x, W, b), bw)


_OFFSETS = list(product(range(3), repeat=3))


def conv3d(x, k, b):
    """3x3x3 convolution, stride 1, zero padding 1.

    ``x`` is ``[B, X, Y, Z, C]``, ``k`` is ``[O, C, 3, 3, 3]``, ``b`` is ``[O]``.
    Each of the 27 taps is one contiguous GEMM over the flattened padded
    volume; rows that land in the padding are computed and discarded.
    """
    x, k, b = as_tensor(x), as_tensor(k), as_tensor(b)
    if x.ndim != 5 or k.ndim != 5 or k.shape[2:] != (3, 3, 3):
        raise DimensionError(f"conv3d: x {x.shape} / kernel {k.shape} not supported")
    B, X, Y, Z, C = x.shape
    O = k.shape[0]
    if k.shape[1] != C or b.shape != (O,):
        raise DimensionError(
            f"conv3d: input channels {C} vs kernel {k.shape}, bias {b.shape}")
    P1, P2 = Y + 2, Z + 2
    rows = X * P1 * P2
    offs = [i * P1 * P2 + j * P2 + l for i, j, l in _OFFSETS]
    taps = np.ascontiguousarray(k.data.transpose(2, 3, 4, 1, 0)).reshape(27, C, O)
    # one extra trailing slab keeps every tap slice in bounds
    xp = np.pad(x.data, ((0, 0), (1, 2), (1, 1), (1, 1), (0, 0))).reshape(B, -1, C)

    out = np.empty((B, X, Y, Z, O))
    for n in range(B):
        acc = np.zeros((rows, O))
        flat = xp[n]
        for t, off in enumerate(offs):
            acc += flat[off:off + rows] @ taps[t]
        out[n] = acc.reshape(X, P1, P2, O)[:, :Y, :Z]
    out += b.data

    def bw(g):
        taps_t = np.ascontiguousarray(taps.transpose(0, 2, 1))
        dtaps = np.zeros((27, C, O))
        dxp = np.zeros_like(xp)
        for n in range(B):
            gp = np.zeros((X, P1, P2, O))
            gp[:, :Y, :Z] = g[n]
            gp = gp.reshape(rows, O)
            flat = xp[n]
            dflat = dxp[n]
            for t, off in enumerate(offs):
                dtaps[t] += flat[off:off + rows].T @ gp
                dflat[off:off + rows] += gp @ taps_t[t]
        dx = dxp.reshape(B, X + 3, P1, P2, C)[:, 1:X + 1, 1:Y + 1, 1:Z + 1]
        dk = dtaps.reshape(3, 3, 3, C, O).transpose(4, 3, 0, 1, 2)
        return (np.ascontiguousarray(dx), np.ascontiguousarray(dk), g.sum(axis=(0, 1, 2, 3)))

    return make_result("conv3d", out, (x, k, b), bw)


def resample3d(x, mode):
    """``avg_down2`` (2x2x2 mean pooling) or ``nearest_up2`` on ``[B,X,Y,Z,C]``."""
    x = as_tensor(x)
    if x.ndim != 5:
        raise DimensionError(f"resample3d: expected [B,X,Y,Z,C], got {x.shape}")
    B, X, Y, Z, C = x.shape
    if mode == "avg_down2":
        if X % 2 or Y % 2 or Z % 2:
            raise DimensionError(f"avg_down2: spatial dims {(X, Y, Z)} must be even")
        out = x.data.reshape(B, X // 2, 2, Y // 2, 2, Z // 2, 2, C).mean(axis=(2, 4, 6))

        def bw(g):
            g8 = g / 8.0
            return (np.repeat(np.repeat(np.repeat(g8, 2, 1), 2, 2), 2, 3),)
    elif mode == "nearest_up2":
        out = np.repeat(np.repeat(np.repeat(x.data, 2, 1), 2, 2), 2, 3)

        def bw(g):
            return (g.reshape(B, X, 2, Y, 2, Z, 2, C).sum(axis=(2, 4, 6)),)
    else:
        raise ValueError(f"unknown resample mode {mode!r}")
    return make_result(mode, out, (x,), bw)


# ---------------------------------------------------------------------------
# point <-> grid


def segment_mean(feats, segment, num_segments):
    """Mean of the rows of ``feats`` sharing a segment id; empty segments are 0."""
    feats = as_tensor(feats)
    segment = np.asarray(segment, dtype=np.int64)
    N = feats.shape[0]
    if feats.ndim != 2 or segment.shape != (N,):
        raise DimensionError(
            f"segment_mean: feats {feats.shape} vs index {segment.shape}")
    if N and (segment.min() < 0 or segment.max() >= num_segments):
        raise IndexError(f"segment_mean: index out of range [0, {num_segments})")
    counts = np.bincount(segment, minlength=num_segments)
    w = 1.0 / counts[segment]
    m = sp.csr_matrix((w, (segment, np.arange(N))), shape=(num_segments, N))
    out = np.asarray(m @ feats.data)
    return make_result("segment_mean", out, (feats,), lambda g: (np.asarray(m.T @ g),))


def reshape(x, shape):
    x = as_tensor(x)
    src = x.shape
    return make_result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def scatter_mean(feats, cell_index, grid_res):
    """Average point features into an ``[X, Y, Z, C]`` grid.

    ``grid_res`` is ``R`` for a cube or an ``(X, Y, Z)`` triple; ``cell_index``
    holds flat row-major cell ids.
    """
    feats = as_tensor(feats)
    dims = (int(grid_res),) * 3 if np.ndim(grid_res) == 0 else tuple(int(d) for d in grid_res)
    ncell = dims[0] * dims[1] * dims[2]
    cell_index = np.asarray(cell_index, dtype=np.int64)
    if cell_index.size and (cell_index.min() < 0 or cell_index.max() >= ncell):
        raise IndexError(f"scatter_mean: cell index out of range [0, {ncell})")
    flat = segment_mean(feats, cell_index, ncell)
    return reshape(flat, dims + (feats.shape[1],))


def trilinear_weights(dims, coords):
    """Sparse ``[M, X*Y*Z]`` interpolation matrix for lattice-unit coords.

    Coordinates are clamped into ``[0, dim-1]`` per axis.
    """
    dims = np.asarray(dims, dtype=np.int64)
    u = np.asarray(coords, dtype=np.float64)
    if u.ndim != 2 or u.shape[1] != 3:
        raise DimensionError(f"trilinear_query: coords must be [M,3], got {u.shape}")
    _check_finite("trilinear_query", u)
    hi = (dims - 1).astype(np.float64)
    clamped = np.clip(u, 0.0, hi)
    if np.any(clamped != u):
        log.debug("trilinear_query: clamped %d coordinates to the volume box",
                  int(np.any(clamped != u, axis=1).sum()))
    i0 = np.minimum(np.floor(clamped).astype(np.int64), np.maximum(dims - 2, 0))
    t = clamped - i0
    M = u.shape[0]
    idx = np.empty((M, 8), dtype=np.int64)
    w = np.empty((M, 8))
    strides = np.array([dims[1] * dims[2], dims[2], 1])
    for c, (a, bb, cc) in enumerate(product((0, 1), repeat=3)):
        corner = i0 + np.array([a, bb, cc])
        corner = np.minimum(corner, dims - 1)
        idx[:, c] = corner @ strides
        w[:, c] = ((t[:, 0] if a else 1 - t[:, 0])
                   * (t[:, 1] if bb else 1 - t[:, 1])
                   * (t[:, 2] if cc else 1 - t[:, 2]))
    return sp.csr_matrix((w.ravel(), idx.ravel(), np.arange(0, 8 * M + 1, 8)),
                         shape=(M, int(np.prod(dims))))


def trilinear_query(volume, coords):
    """Interpolate an ``[X, Y, Z, C]`` volume at ``[M, 3]`` lattice coordinates.

    Lattice node ``(i, j, k)`` sits at coordinate ``(i, j, k)``. Gradients
    flow to the volume only.
    """
    volume = as_tensor(volume)
    if volume.ndim != 4:
        raise DimensionError(f"trilinear_query: volume must be [X,Y,Z,C], got {volume.shape}")
    X, Y, Z, C = volume.shape
    m = trilinear_weights((X, Y, Z), coords)
    out = np.asarray(m @ volume.data.reshape(-1, C))
    return make_result("trilinear_query", out, (volume,),
                       lambda g: (np.asarray(m.T @ g).reshape(X, Y, Z, C),))


# ---------------------------------------------------------------------------
# loss


def bce(pred, target, reduction="mean"):
    """Binary cross-entropy with ``pred`` clamped to ``[1e-7, 1 - 1e-7]``."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"bce: pred {pred.shape} vs target {target.shape}")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    p = pred.data
    y = target.data
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    inside = (p >= BCE_EPS) & (p <= 1.0 - BCE_EPS)
    lp, l1p = np.log(pc), np.log1p(-pc)
    terms = -y * lp - (1.0 - y) * l1p
    n = terms.size if reduction == "mean" else 1
    out = np.array(terms.sum() / n)

    def bw(g):
        g = float(g) / n
        dp = g * (-y / pc + (1.0 - y) / (1.0 - pc)) * inside
        dy = g * (l1p - lp)
        return (dp, dy)

    return make_result("bce", out, (pred, target), bw)
