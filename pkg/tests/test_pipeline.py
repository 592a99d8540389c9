import numpy as np
import pytest

from motionem import pipeline as pl
from motionem.diffeo import warp_intensity
from motionem.errors import ConfigurationError, ShapeError
from motionem.grid import GridSpec, Image
from motionem.pipeline import (GateSet, PipelineConfig, baseline_aggregate, iteration_sweep, oracle_no_motion,
                               run_pipeline, simulate_gated_data)
from motionem.projector import ProjGeometry, Sinogram, get_projector
from motionem.recon import CompoundOperator, mlem, mmlem
from motionem.registration import RegConfig
from motionem.synthesis import GrfConfig, RngSeed, derenzo_phantom

FAST_REG = RegConfig(levels=3, iters_per_level=30)


@pytest.fixture(scope="module")
def geom():
    return ProjGeometry(GridSpec.square(64), 40, 90)


@pytest.fixture(scope="module")
def phantom(geom):
    return Image(geom.grid, derenzo_phantom(geom.grid).values * 0.05)


@pytest.fixture(scope="module")
def moving(geom, phantom):
    return simulate_gated_data(phantom, geom, 10.0, 2, None, RngSeed(3))


def test_gate_set_validation(geom):
    s = Sinogram(geom, np.zeros(geom.shape))
    other = ProjGeometry(geom.grid, 10, 90)
    with pytest.raises(ConfigurationError):
        GateSet(geom, (), 1.0)
    with pytest.raises(ConfigurationError):
        GateSet(geom, (s,), 0.0)
    with pytest.raises(ShapeError):
        GateSet(geom, (s, Sinogram(other, np.zeros(other.shape))), 1.0)
    assert GateSet(geom, [s, s, s], 1.0).n_motion == 2


def test_config_validation_and_round_trip():
    with pytest.raises(ConfigurationError):
        PipelineConfig(n_init=0)
    with pytest.raises(ConfigurationError):
        PipelineConfig(n_outer=0)
    with pytest.raises(ConfigurationError):
        PipelineConfig(n_inner=-1)
    cfg = PipelineConfig(n_init=3, n_inner=7, reg=RegConfig(lam_rel=1e-3), seed=RngSeed(5, 2))
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg


def test_simulation_structure(moving, phantom, geom):
    assert np.array_equal(moving.truths[0].values, phantom.values)
    proj = get_projector(geom)
    for i in range(1, 3):
        again = warp_intensity(moving.motion[i - 1], moving.truths[i - 1])
        assert np.array_equal(again.values, moving.truths[i].values)
    for f, m, c in zip(moving.truths, moving.means, moving.gates.sinograms):
        assert np.array_equal(m.values, proj.forward_array(f.values * 10.0))
        assert np.array_equal(c.values, np.round(c.values))


def test_single_gate_pipeline_is_continued_mlem(geom, phantom):
    sim = simulate_gated_data(phantom, geom, 10.0, 0, None, RngSeed(1))
    res = run_pipeline(sim.gates, PipelineConfig(n_init=4, n_inner=5, n_outer=2), phantom)
    ref = mlem(geom, sim.gates.sinograms[0], 14)
    assert np.array_equal(res.f0.values, ref.iterate.values)
    assert res.registrations == [[], []]


def test_gate_images_are_warped_reference(moving, phantom):
    res = run_pipeline(moving.gates, PipelineConfig(n_init=4, n_inner=3, reg=FAST_REG), phantom)
    assert len(res.gates) == 3 and len(res.psi) == 2 and len(res.phi) == 3
    for i in (1, 2):
        assert np.array_equal(res.gates[i].values, warp_intensity(res.phi[i], res.f0).values)
    assert all(np.all(f.values >= 0) for f in res.gates)
    assert len(res.mmlem[0].psnr) == 4 and len(res.init[0].psnr) == 5
    assert set(res.seconds) == {"init", "registration", "mmlem"}


def test_identical_gates_reduce_to_mean_data_mlem(moving, geom):
    g0 = moving.gates.sinograms[0]
    gates = GateSet(geom, (g0, g0, g0), 10.0)
    res = run_pipeline(gates, PipelineConfig(n_init=3, n_inner=6))
    for r in res.registrations[0]:
        assert np.all(r.velocity.vx == 0) and np.all(r.velocity.vy == 0)
    plain = mmlem([CompoundOperator(geom)] * 3, [g0, g0, g0], 6, f0=res.init[0].iterate)
    scale = np.abs(plain.iterate.values).max()
    assert np.abs(res.f0.values - plain.iterate.values).max() <= 1e-12 * scale
    summed = Sinogram(geom, 3 * g0.values)
    single = mlem(geom, summed, 6, f0=Image(geom.grid, 3 * res.init[0].iterate.values))
    assert np.abs(3 * res.f0.values - single.iterate.values).max() <= 1e-12 * 3 * scale


def test_static_phantom_beats_single_gate(geom, phantom):
    still = GrfConfig(kernel_scale=4.0, amplitude=0.0, mask_margin=4)
    sim = simulate_gated_data(phantom, geom, 10.0, 3, still, RngSeed(8))
    single = max(mlem(geom, sim.gates.sinograms[0], 60, truth=Image(geom.grid, phantom.values * 10)).psnr)
    res = run_pipeline(sim.gates, PipelineConfig(n_init=4, n_inner=60), phantom)
    assert max(res.mmlem[0].psnr) >= single


def test_pipeline_is_deterministic_across_workers(moving, phantom):
    cfg = PipelineConfig(n_init=3, n_inner=4, reg=FAST_REG)
    a = run_pipeline(moving.gates, cfg, phantom)
    b = run_pipeline(moving.gates, PipelineConfig(n_init=3, n_inner=4, reg=FAST_REG, workers=2), phantom)
    assert np.array_equal(a.f0.values, b.f0.values)
    for p, q in zip(a.phi, b.phi):
        assert np.array_equal(p.fwd.vx, q.fwd.vx) and np.array_equal(p.inv.vy, q.inv.vy)
    assert a.mmlem[0].kl == b.mmlem[0].kl


def test_stalled_registration_falls_back_to_identity(moving, monkeypatch):
    real = pl.register

    def stalling(f1, f2, cfg):
        res = real(f1, f2, cfg)
        res.stalled = True
        return res

    monkeypatch.setattr(pl, "register", stalling)
    res = run_pipeline(moving.gates, PipelineConfig(n_init=2, n_inner=1, reg=FAST_REG))
    assert res.stalled == [[True, True]]
    assert all(p.is_identity for p in res.psi)


def test_baseline_single_gate_is_mlem(moving, phantom, geom):
    base = baseline_aggregate(moving.gates, 1, 7, phantom)
    ref = mlem(geom, moving.gates.sinograms[0], 7, truth=Image(geom.grid, phantom.values * 10.0))
    assert np.array_equal(base.iterate.values, ref.iterate.values)
    assert base.psnr == ref.psnr
    with pytest.raises(ConfigurationError):
        baseline_aggregate(moving.gates, 0, 3)
    with pytest.raises(ConfigurationError):
        baseline_aggregate(moving.gates, 4, 3)


def test_moving_aggregate_is_worse_than_single_gate(moving, phantom):
    one = max(baseline_aggregate(moving.gates, 1, 40, phantom).psnr)
    three = max(baseline_aggregate(moving.gates, 3, 40, phantom).psnr)
    assert three < one


def test_oracle_mean_counts_scale_with_gates(geom, phantom):
    state = oracle_no_motion(phantom, geom, 10.0, 3, 30, RngSeed(2))
    counts = get_projector(geom).forward_array(state.iterate.values).sum()
    expected = 4 * 10.0 * get_projector(geom).forward_array(phantom.values).sum()
    assert abs(counts - expected) <= 5 * np.sqrt(expected)
    single = mlem(geom, simulate_gated_data(phantom, geom, 10.0, 0, None, RngSeed(2)).gates.sinograms[0], 30,
                  truth=Image(geom.grid, phantom.values * 10.0))
    assert max(state.psnr) > max(single.psnr)


def test_sweep_zero_column_is_plain_mlem(moving, phantom):
    res = iteration_sweep(moving.gates, phantom, [2, 5], [0, 3], PipelineConfig(reg=FAST_REG))
    base = baseline_aggregate(moving.gates, 1, 5, phantom).psnr
    assert res.value(2, 0) == base[2] and res.value(5, 0) == base[5]
    e, d, p = res.argmax()
    assert p == res.psnr.max() and res.value(e, d) == p
    assert len(res.rows()) == 4
    with pytest.raises(ConfigurationError):
        iteration_sweep(moving.gates, phantom, [], [0])
