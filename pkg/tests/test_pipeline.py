import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saocc import autodiff as ad
from saocc.errors import ContractError, NonFiniteError
from saocc.geometry import PointCloud, sample_surface, sphere
from saocc.meshing import MiseConfig
from saocc.network import NetConfig, init_model
from saocc.pipeline import (PretrainConfig, SAOptConfig, evaluate_uce, plot_trace, pretrain,
                            read_trace, reconstruct, sa_optimize, uce_loss, unsigned_occupancy,
                            write_trace)

SMALL = NetConfig(grid_res=16, feature_dim=16, encoder_hidden=16, unet_width=16, decoder_hidden=32)
TINY = NetConfig(grid_res=8, feature_dim=4, encoder_hidden=4, unet_width=4, decoder_hidden=8,
                 pointnet_blocks=2, decoder_blocks=2)
BALL = sphere([0.5, 0.5, 0.5], 0.3)
QUICK = PretrainConfig(batch_size=1, iterations=5, surface_points_per_shape=300, queries_per_shape=64,
                       pool_size=500)


def _uce(s, k):
    return uce_loss(np.asarray(s, float), np.asarray(k, float)).item()


@pytest.fixture(scope="module")
def sphere_model():
    """Small model pretrained on one sphere, plus its training trace."""
    cfg = PretrainConfig(batch_size=1, iterations=2000, surface_points_per_shape=1000,
                         noise_sigma=0.0, pool_size=3000)
    return pretrain([BALL], cfg, SMALL)


@pytest.fixture(scope="module")
def sphere_cloud():
    return sample_surface(BALL, 3000, seed=11)


def test_uce_all_zero_is_ln2():
    assert abs(_uce(np.zeros(7), np.zeros(13)) - math.log(2)) <= 1e-12
    assert abs(_uce(np.zeros(3), []) - math.log(2)) <= 1e-12
    assert abs(_uce([], np.zeros(3)) - math.log(2)) <= 1e-12


def test_uce_mixed_closed_form():
    k = np.where(np.arange(1536) % 2, 10.0, -10.0)
    expected = (512 * math.log(2) + 1536 * math.log1p(math.exp(-10))) / 2048
    assert abs(expected - 0.173321) <= 1e-6
    assert abs(_uce(np.zeros(512), k) - expected) <= 1e-12


def test_uce_needs_a_point():
    with pytest.raises(ContractError):
        uce_loss(np.zeros(0), np.zeros(0))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 40), st.integers(0, 40))
def test_uce_is_sign_agnostic_and_in_range(seed, s, k):
    if s + k == 0:
        return
    rng = np.random.default_rng(seed)
    gs, gk = rng.normal(scale=5, size=s), rng.normal(scale=5, size=k)
    assert abs(_uce(gs, gk) - _uce(-gs, -gk)) <= 1e-12
    occ = unsigned_occupancy(np.concatenate([gs, gk])).data
    assert np.all((occ >= 0.5) & (occ < 1))


def test_single_surface_logit_optimum_at_zero():
    grid = np.linspace(0, 12, 241)
    vals = np.array([_uce([g], []) for g in grid])
    assert vals[0] == pytest.approx(math.log(2), abs=1e-15)
    assert np.all(np.diff(vals) > 0)
    assert np.allclose(vals, [_uce([-g], []) for g in grid], rtol=0, atol=1e-15)


def test_sum_reduction_scales_mean():
    rng = np.random.default_rng(0)
    s, k = rng.normal(size=5), rng.normal(size=9)
    assert uce_loss(s, k, "sum").item() == pytest.approx(14 * uce_loss(s, k).item(), rel=1e-13)


def test_config_validation():
    with pytest.raises(ContractError):
        SAOptConfig(n_surface=0, n_nonsurface=0).validate()
    with pytest.raises(ContractError):
        SAOptConfig(decay=0).validate()
    with pytest.raises(ContractError):
        SAOptConfig(mode="decoder_only").validate()
    with pytest.raises(ContractError):
        PretrainConfig(lr=0).validate()
    with pytest.raises(ContractError):
        PretrainConfig(batch_size=0).validate()


def test_staircase_schedule_in_trace():
    pc = PointCloud(np.random.default_rng(0).random((200, 3)))
    cfg = SAOptConfig(iterations=9, lr0=2e-5, every=4, decay=0.3, n_surface=8, n_nonsurface=8)
    _, trace = sa_optimize(init_model(TINY, seed=0), pc, cfg)
    assert [r.iteration for r in trace] == list(range(9))
    assert [r.lr for r in trace] == [2e-5 * 0.3 ** (i // 4) for i in range(9)]
    assert ad.staircase_lr(3e-5, 400) == pytest.approx(0.3 * 3e-5, rel=1e-15)
    assert ad.staircase_lr(3e-5, 800) == pytest.approx(0.09 * 3e-5, rel=1e-15)
    assert ad.staircase_lr(3e-5, 399) == 3e-5


def test_encoder_only_freezes_decoder_bytes():
    model = init_model(TINY, seed=0)
    pc = PointCloud(np.random.default_rng(0).random((300, 3)))
    cfg = SAOptConfig(iterations=5, lr0=1e-2, mode="encoder_only", n_surface=32, n_nonsurface=32)
    adapted, _ = sa_optimize(model, pc, cfg)
    for name in model.decoder_names():
        assert adapted[name].data.tobytes() == model[name].data.tobytes(), name
    moved = [n for n in model.encoder_names()
             if not np.array_equal(adapted[n].data, model[n].data)]
    assert moved
    assert all(p.requires_grad for p in adapted.parameters())


def test_full_mode_leaves_input_model_untouched():
    model = init_model(TINY, seed=0)
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    pc = PointCloud(np.random.default_rng(0).random((300, 3)))
    adapted, _ = sa_optimize(model, pc, SAOptConfig(iterations=3, lr0=1e-2, n_surface=16, n_nonsurface=16))
    assert all(np.array_equal(before[n], p.data) for n, p in model.named_parameters())
    assert not np.array_equal(adapted["dec.head.W"].data, model["dec.head.W"].data)


def test_sa_rejects_empty_cloud():
    with pytest.raises(ContractError):
        sa_optimize(init_model(TINY), PointCloud(np.zeros((0, 3))), SAOptConfig(iterations=1))


def test_pretrain_is_deterministic_and_traces_every_iteration():
    a = pretrain([BALL], QUICK, TINY)
    b = pretrain([BALL], QUICK, TINY)
    assert len(a.trace) == QUICK.iterations
    for (n1, p1), (n2, p2) in zip(a.model.named_parameters(), b.model.named_parameters()):
        assert p1.data.tobytes() == p2.data.tobytes(), n1
    assert [r.loss for r in a.trace] == [r.loss for r in b.trace]


def test_pretrain_needs_shapes():
    with pytest.raises(ContractError):
        pretrain([], QUICK, TINY)


def test_nonfinite_parameters_abort_with_diagnostic():
    model = init_model(TINY, seed=0)
    model["dec.head.b"].data[...] = np.inf
    with pytest.raises(NonFiniteError, match=r"iteration 0 \(lr=0\.0001\)"):
        pretrain([BALL], QUICK, model=model)
    pc = PointCloud(np.random.default_rng(0).random((50, 3)))
    with pytest.raises(NonFiniteError, match=r"iteration 0 \(lr=3e-05\)"):
        sa_optimize(model, pc, SAOptConfig(iterations=2, n_surface=4, n_nonsurface=4))


def test_single_shape_overfit(sphere_model):
    loss = np.array([r.loss for r in sphere_model.trace])
    assert len(loss) == 2000
    assert abs(loss[:20].mean() - math.log(2)) < 0.15
    smooth = np.convolve(loss, np.ones(100) / 100, mode="valid")
    checkpoints = smooth[::200]
    # allow for minibatch noise that survives a 100-step window
    assert np.all(np.diff(checkpoints) <= 0.01)
    assert smooth[-1] < 0.1


def test_sa_reduces_uce_on_the_training_shape(sphere_model, sphere_cloud):
    cloud = PointCloud(0.05 + 0.9 * (sphere_cloud.points - 0.2) / 0.6)
    cfg = SAOptConfig(iterations=60, lr0=3e-5, n_surface=256, n_nonsurface=768)
    before = evaluate_uce(sphere_model.model, cloud, cfg)
    adapted, trace = sa_optimize(sphere_model.model, cloud, cfg)
    assert len(trace) == 60
    assert evaluate_uce(adapted, cloud, cfg) < before


def test_reconstruct_sphere_is_watertight_and_deterministic(sphere_model, sphere_cloud):
    mise = MiseConfig(16, 64)
    sa = SAOptConfig(iterations=3, n_surface=64, n_nonsurface=64, seed=4)
    a = reconstruct(sphere_model.model, sphere_cloud, sa, mise)
    b = reconstruct(sphere_model.model, sphere_cloud, sa, mise)
    assert not a.is_empty
    a.validate()
    assert a.boundary_edge_count() == 0
    assert np.array_equal(a.vertices, b.vertices) and np.array_equal(a.faces, b.faces)
    r = np.linalg.norm(a.vertices - 0.5, axis=1)
    assert abs(np.median(r) - 0.3) < 0.05


def test_reconstruct_rejects_empty_cloud(sphere_model):
    with pytest.raises(ContractError):
        reconstruct(sphere_model.model, PointCloud(np.zeros((0, 3))))


def test_trace_csv_round_trip_and_plot(tmp_path, sphere_model):
    path = tmp_path / "t.csv"
    write_trace(sphere_model.trace[:50], path)
    assert read_trace(path) == sphere_model.trace[:50]
    with open(path) as fh:
        assert next(csv.reader(fh)) == ["iteration", "loss", "lr"]
    plot_trace(sphere_model.trace, tmp_path / "t.png")
    assert (tmp_path / "t.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
