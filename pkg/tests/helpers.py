"""Shared test utilities: finite-difference oracle and acceptance reporting."""

import numpy as np

from saocc import autodiff as ad

ACCEPTANCE_LINES = []


def report(number, passed, detail):
    line = f"ACCEPTANCE {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def numeric_grad(f, arrays, h=1e-5):
    """Central differences of scalar ``f(*arrays)`` w.r.t. every entry of every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f(*arrays)
            flat[i] = old - h
            fm = f(*arrays)
            flat[i] = old
            gf[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(build, arrays):
    """Gradients of ``build(*tensors)`` (a scalar Tensor) via the tape."""
    ts = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with ad.Graph():
        out = build(*ts)
        ad.backward(out)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def rel_error(a, n):
    scale = max(np.max(np.abs(n)), np.max(np.abs(a)), 1e-8)
    return float(np.max(np.abs(a - n)) / scale)


def grad_check(build, arrays, h=1e-5):
    """Worst relative error between tape and finite-difference gradients."""
    def f(*xs):
        with ad.no_grad():
            return build(*[ad.Tensor(x) for x in xs]).item()
    num = numeric_grad(f, [a.copy() for a in arrays], h)
    ana = analytic_grad(build, arrays)
    return max(rel_error(a, n) for a, n in zip(ana, num))


def projector(shape, rng):
    """Fixed random weights turning any output into a scalar via a weighted sum."""
    w = ad.Tensor(rng.normal(size=(1, int(np.prod(shape)))))
    zero = ad.Tensor(np.zeros(1))
    # [1, n] @ [n, 1] through linear, then down to a scalar
    return lambda t: ad.reshape(ad.linear(ad.reshape(t, (1, -1)), w, zero), ())


# ---------------------------------------------------------------------------
# gradient suite: name -> (instance factory, tolerance)
# a factory takes an rng and returns (build, arrays) where build maps tensors to a scalar


def _away_from_zero(rng, shape):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.05, 2.0, size=shape)


def _case_elementwise(kind):
    def make(rng):
        shape = tuple(rng.integers(1, 5, size=2))
        x = _away_from_zero(rng, shape) * (3.0 if kind == "sigmoid" else 1.0)
        proj = projector(shape, rng)
        return (lambda t: proj(ad.elementwise(t, kind))), [x]
    return make


def _case_add(rng):
    shape = tuple(rng.integers(1, 5, size=3))
    proj = projector(shape, rng)
    return (lambda a, b: proj(ad.add(a, b))), [rng.normal(size=shape), rng.normal(size=shape)]


def _case_scale(rng):
    shape = tuple(rng.integers(1, 6, size=2))
    c = rng.normal()
    proj = projector(shape, rng)
    return (lambda a: proj(ad.scale(a, c))), [rng.normal(size=shape)]


def _case_mean(rng):
    shape = tuple(rng.integers(1, 6, size=2))
    return (lambda a: ad.mean(a)), [rng.normal(size=shape)]


def _case_sum(rng):
    shape = tuple(rng.integers(1, 6, size=3))
    return (lambda a: ad.sum(a)), [rng.normal(size=shape)]


def _case_concat(rng):
    rows = int(rng.integers(1, 5))
    widths = rng.integers(1, 4, size=int(rng.integers(2, 4)))
    arrays = [rng.normal(size=(rows, int(w))) for w in widths]
    proj = projector((rows, int(widths.sum())), rng)
    return (lambda *ts: proj(ad.concat(list(ts), axis=1))), arrays


def _case_reshape(rng):
    x = rng.normal(size=(2, 3, 4))
    proj = projector((4, 6), rng)
    return (lambda t: proj(ad.reshape(t, (4, 6)))), [x]


def _case_gather(rng):
    n, c = int(rng.integers(1, 6)), int(rng.integers(1, 4))
    index = rng.integers(0, n, size=int(rng.integers(1, 10)))
    proj = projector((len(index), c), rng)
    return (lambda t: proj(ad.gather_rows(t, index))), [rng.normal(size=(n, c))]


def _case_linear(rng):
    b, i, o = (int(v) for v in rng.integers(1, 6, size=3))
    proj = projector((b, o), rng)
    return (lambda x, w, bias: proj(ad.linear(x, w, bias))), [
        rng.normal(size=(b, i)), rng.normal(size=(o, i)), rng.normal(size=o)]


def _case_conv(rng):
    B = int(rng.integers(1, 3))
    X, Y, Z = (int(v) for v in rng.integers(1, 4, size=3))
    C, O = (int(v) for v in rng.integers(1, 3, size=2))
    proj = projector((B, X, Y, Z, O), rng)
    return (lambda x, k, b: proj(ad.conv3d(x, k, b))), [
        rng.normal(size=(B, X, Y, Z, C)), rng.normal(size=(O, C, 3, 3, 3)), rng.normal(size=O)]


def _case_resample(mode):
    def make(rng):
        B, C = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        small = tuple(int(v) for v in rng.integers(1, 3, size=3))
        big = tuple(2 * d for d in small)
        src, dst = (big, small) if mode == "avg_down2" else (small, big)
        proj = projector((B,) + dst + (C,), rng)
        return (lambda t: proj(ad.resample3d(t, mode))), [rng.normal(size=(B,) + src + (C,))]
    return make


def _case_segment_mean(rng):
    n, c, s = int(rng.integers(1, 8)), int(rng.integers(1, 4)), int(rng.integers(1, 5))
    seg = rng.integers(0, s, size=n)
    proj = projector((s, c), rng)
    return (lambda t: proj(ad.segment_mean(t, seg, s))), [rng.normal(size=(n, c))]


def _case_scatter_mean(rng):
    dims = tuple(int(v) for v in rng.integers(1, 4, size=3))
    n, c = int(rng.integers(1, 10)), int(rng.integers(1, 3))
    cells = rng.integers(0, int(np.prod(dims)), size=n)
    proj = projector(dims + (c,), rng)
    return (lambda t: proj(ad.scatter_mean(t, cells, dims))), [rng.normal(size=(n, c))]


def _case_trilinear(rng):
    dims = tuple(int(v) for v in rng.integers(2, 5, size=3))
    c, m = int(rng.integers(1, 4)), int(rng.integers(1, 8))
    coords = rng.uniform(0, np.array(dims) - 1, size=(m, 3))
    proj = projector((m, c), rng)
    return (lambda v: proj(ad.trilinear_query(v, coords))), [rng.normal(size=dims + (c,))]


def _case_bce(rng):
    n = int(rng.integers(1, 10))
    reduction = "mean" if rng.random() < 0.5 else "sum"
    return (lambda p, y: ad.bce(p, y, reduction)), [
        rng.uniform(0.05, 0.95, size=n), rng.uniform(0.0, 1.0, size=n)]


GRAD_CASES = {
    "relu": (_case_elementwise("relu"), 1e-4),
    "abs": (_case_elementwise("abs"), 1e-4),
    "sigmoid": (_case_elementwise("sigmoid"), 1e-6),
    "add": (_case_add, 1e-4),
    "scale": (_case_scale, 1e-4),
    "mean": (_case_mean, 1e-4),
    "sum": (_case_sum, 1e-4),
    "concat": (_case_concat, 1e-4),
    "reshape": (_case_reshape, 1e-4),
    "gather_rows": (_case_gather, 1e-4),
    "linear": (_case_linear, 1e-6),
    "conv3d": (_case_conv, 1e-4),
    "avg_down2": (_case_resample("avg_down2"), 1e-4),
    "nearest_up2": (_case_resample("nearest_up2"), 1e-4),
    "segment_mean": (_case_segment_mean, 1e-4),
    "scatter_mean": (_case_scatter_mean, 1e-4),
    "trilinear_query": (_case_trilinear, 1e-6),
    "bce": (_case_bce, 1e-6),
}


def run_grad_suite(instances, seed=0):
    """``{op: worst relative error}`` over ``instances`` random cases per op."""
    worst = {}
    for k, (name, (make, _)) in enumerate(GRAD_CASES.items()):
        rng = np.random.default_rng([seed, k])
        err = 0.0
        for _ in range(instances):
            build, arrays = make(rng)
            err = max(err, grad_check(build, arrays))
        worst[name] = err
    return worst
