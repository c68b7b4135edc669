import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.ndimage import correlate

from helpers import GRAD_CASES, grad_check
from saocc import autodiff as ad
from saocc.errors import ContractError, DimensionError, NonFiniteError

finite = st.floats(-50, 50, allow_nan=False)


@pytest.mark.parametrize("name", list(GRAD_CASES))
def test_gradients_match_finite_differences(name):
    make, tol = GRAD_CASES[name]
    rng = np.random.default_rng(7)
    for _ in range(20):
        build, arrs = make(rng)
        assert grad_check(build, arrs) <= tol


def test_conv3d_matches_scipy_correlate():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 5, 4, 6, 3))
    k = rng.normal(size=(4, 3, 3, 3, 3))
    b = rng.normal(size=4)
    out = ad.conv3d(x, k, b).data
    for n in range(2):
        for o in range(4):
            ref = sum(correlate(x[n, ..., c], k[o, c], mode="constant") for c in range(3)) + b[o]
            assert np.allclose(out[n, ..., o], ref, atol=1e-12)


def test_linear_shape_mismatch_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\)"):
        ad.linear(np.ones((2, 3)), np.ones((4, 5)), np.ones(4))


def test_add_requires_identical_shapes():
    with pytest.raises(DimensionError):
        ad.add(np.ones((2, 3)), np.ones((3, 2)))


def test_nonfinite_input_is_rejected():
    with pytest.raises(NonFiniteError):
        ad.relu(np.array([1.0, np.nan]))


def test_backward_needs_scalar():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.Graph():
        y = ad.relu(x)
        with pytest.raises(ContractError):
            ad.backward(y)


def test_second_backward_is_an_error():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.Graph():
        loss = ad.sum(ad.relu(x))
        ad.backward(loss)
        with pytest.raises(ContractError):
            ad.backward(loss)


def test_gradients_accumulate_across_graphs():
    x = ad.Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    for _ in range(2):
        with ad.Graph():
            ad.backward(ad.sum(x))
    assert np.array_equal(x.grad, [2.0, 2.0, 2.0])


def test_no_grad_records_nothing():
    x = ad.Tensor(np.ones(4), requires_grad=True)
    with ad.Graph() as g:
        with ad.no_grad():
            y = ad.sum(ad.relu(x))
        assert len(g) == 0 and y.node is None


def test_shared_input_gradient_sums_both_uses():
    x = ad.Tensor(np.array([0.5, 2.0]), requires_grad=True)
    with ad.Graph():
        ad.backward(ad.sum(ad.add(x, x)))
    assert np.array_equal(x.grad, [2.0, 2.0])


def test_abs_subgradient_at_zero_is_zero():
    x = ad.Tensor(np.array([0.0, -1.0, 2.0]), requires_grad=True)
    with ad.Graph():
        ad.backward(ad.sum(ad.abs(x)))
    assert np.array_equal(x.grad, [0.0, -1.0, 1.0])


@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-800, 800)))
def test_sigmoid_strictly_inside_unit_interval(x):
    s = ad.sigmoid(x).data
    assert np.all(s > 0) and np.all(s < 1)


def test_bce_clamps_extreme_predictions():
    loss = ad.bce(np.array([0.0, 1.0]), np.array([1.0, 0.0]))
    assert np.isclose(loss.item(), -np.log(1e-7))


def test_bce_known_value():
    assert np.isclose(ad.bce(np.array([0.5]), np.array([1.0])).item(), np.log(2), atol=1e-15)


def test_trilinear_reproduces_affine_field():
    rng = np.random.default_rng(3)
    dims = (5, 6, 7)
    A, c = rng.normal(size=(3, 2)), rng.normal(size=2)
    idx = np.indices(dims).reshape(3, -1).T
    vol = (idx @ A + c).reshape(dims + (2,))
    q = rng.uniform(0, np.array(dims) - 1, size=(200, 3))
    assert np.allclose(ad.trilinear_query(vol, q).data, q @ A + c, atol=1e-12)


def test_trilinear_clamps_outside_queries():
    vol = np.arange(8, dtype=float).reshape(2, 2, 2, 1)
    inside = ad.trilinear_query(vol, np.array([[1.0, 1.0, 1.0]])).data
    outside = ad.trilinear_query(vol, np.array([[3.0, 5.0, 9.0]])).data
    assert np.array_equal(inside, outside)


def test_segment_mean_empty_segments_are_zero():
    out = ad.segment_mean(np.array([[1.0], [3.0]]), np.array([2, 2]), 4).data
    assert np.array_equal(out[:, 0], [0.0, 0.0, 2.0, 0.0])


def test_segment_mean_rejects_bad_ids():
    with pytest.raises(IndexError):
        ad.segment_mean(np.ones((2, 1)), np.array([0, 5]), 3)


def test_avg_down_rejects_odd_dims():
    with pytest.raises(DimensionError):
        ad.resample3d(np.ones((1, 3, 2, 2, 1)), "avg_down2")


@settings(max_examples=30)
@given(arrays(np.float64, (4, 3), elements=finite), st.permutations(range(4)))
def test_segment_mean_is_permutation_invariant(x, perm):
    seg = np.array([0, 1, 0, 1])
    perm = np.array(perm)
    a = ad.segment_mean(x, seg, 2).data
    b = ad.segment_mean(x[perm], seg[perm], 2).data
    assert np.allclose(a, b, atol=1e-12)


def test_adam_first_step_moves_by_lr():
    p = ad.Tensor(np.array([1.0, -1.0]), requires_grad=True)
    opt = ad.Adam([p])
    p.grad = np.array([0.3, -5.0])
    opt.step(0.01)
    # bias correction makes the first step exactly lr * sign(g) (up to eps)
    assert np.allclose(p.data, [0.99, -0.99], atol=1e-9)


def test_adam_rejects_nonpositive_lr():
    p = ad.Tensor(np.ones(2), requires_grad=True)
    p.grad = np.ones(2)
    with pytest.raises(ContractError):
        ad.Adam([p]).step(0.0)


@given(st.floats(1e-6, 1.0), st.integers(0, 5000))
def test_staircase_schedule(lr0, i):
    assert ad.staircase_lr(lr0, i) == lr0 * 0.3 ** (i // 400)


def test_independent_graphs_in_threads():
    results = {}

    def work(k):
        x = ad.Tensor(np.full(3, float(k)), requires_grad=True)
        for _ in range(50):
            x.grad = None
            with ad.Graph():
                ad.backward(ad.sum(ad.sigmoid(x)))
        results[k] = x.grad.copy()

    threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for k in range(4):
        s = 1 / (1 + np.exp(-k))
        assert np.allclose(results[k], s * (1 - s))
