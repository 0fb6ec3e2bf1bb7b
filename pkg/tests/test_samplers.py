import math

import numpy as np
import pytest

from src.errors import DomainError, NumericFailureError
from src.guidance import GuidanceRule
from src.lookup_table import AVG
from src.samplers import (
    ODE_EULER,
    ODE_RK4,
    SampleBatch,
    SamplerConfig,
    ddim_affine_map,
    ddim_run,
    ode_run,
    write_samples_csv,
)
from src.schedule import make_grid
from src.shift_theory import cfg_toy_flow, recfg_toy_distribution
from src.worlds import ExactOracle


def test_cfg_and_embedded_recfg_are_bitwise_equal(exact, sigma_grid):
    cfg = SamplerConfig(sigma_grid, 500, seed=3)
    for gamma in (1.5, 2.0, 3.0):
        a = ddim_run(exact, GuidanceRule.cfg(gamma), cfg, cond=1.0)
        b = ddim_run(exact, GuidanceRule.recfg(gamma, gamma0=1.0 - gamma), cfg, cond=1.0)
        assert np.array_equal(a.x0, b.x0)


def test_batch_is_worker_independent(exact, small_grid):
    rule = GuidanceRule.cfg(2.0)
    serial = ddim_run(exact, rule, SamplerConfig(small_grid, 20_000, seed=1, workers=1))
    parallel = ddim_run(exact, rule, SamplerConfig(small_grid, 20_000, seed=1, workers=4))
    assert np.array_equal(serial.x0, parallel.x0)
    assert np.array_equal(serial.c, parallel.c)


def test_different_seeds_differ(exact, small_grid):
    a = ddim_run(exact, GuidanceRule.none(), SamplerConfig(small_grid, 100, seed=1), cond=1.0)
    b = ddim_run(exact, GuidanceRule.none(), SamplerConfig(small_grid, 100, seed=2), cond=1.0)
    assert not np.array_equal(a.x0, b.x0)


def test_affine_map_matches_sampler(exact, sigma_grid):
    rule = GuidanceRule.cfg(2.5)
    slope, intercept = ddim_affine_map(exact, rule, sigma_grid, 1.0)
    x_init = np.linspace(-3.0, 5.0, 9)[:, None]
    batch = ddim_run(exact, rule, SamplerConfig(sigma_grid, 9), cond=1.0, x_init=x_init)
    assert np.max(np.abs(batch.x0 - (slope * x_init + intercept))) <= 1e-10


def test_unguided_affine_map_is_near_the_flow(exact):
    grid = make_grid(9.0, 512, spacing="sigma")
    slope, intercept = ddim_affine_map(exact, GuidanceRule.none(), grid, 1.0)
    assert float(slope[0]) == pytest.approx(1.0 / math.sqrt(10.0), rel=0.02)
    assert float(slope[0] + intercept[0]) == pytest.approx(1.0, abs=0.02)


def test_affine_map_needs_affine_oracle(exact, small_grid):
    class Curved(ExactOracle):
        affine = False

    with pytest.raises(DomainError):
        ddim_affine_map(Curved(exact.world, exact.sched), GuidanceRule.none(), small_grid, 1.0)


def test_unguided_samples_match_conditional(exact):
    grid = make_grid(99.0, 512, spacing="sigma")
    batch = ddim_run(exact, GuidanceRule.none(), SamplerConfig(grid, 20_000, seed=5), cond=1.0)
    x = batch.x0[:, 0]
    assert abs(x.mean() - 1.0) < 4 * x.std() / math.sqrt(batch.size)
    assert x.var(ddof=1) == pytest.approx(1.0, rel=0.05)


def test_recfg_without_gamma0_shrinks_variance(exact):
    grid = make_grid(9.0, 128, spacing="sigma")
    cfg = SamplerConfig(grid, 20_000, seed=6, method=ODE_RK4)
    batch = ode_run(exact, GuidanceRule.recfg(2.0, gamma0=0.0), cfg, cond=1.0)
    report = recfg_toy_distribution(2.0, 0.0, 9.0)
    x = batch.x0[:, 0]
    assert report.variance == pytest.approx(0.1)
    assert x.var(ddof=1) == pytest.approx(report.variance, rel=0.05)
    assert abs(x.mean() - 1.0) < 4 * x.std() / math.sqrt(batch.size)


def test_ode_matches_closed_form_flow(exact):
    grid = make_grid(9.0, 400, t_min=1e-8, spacing="sigma")
    x_init = np.array([[-1.0], [0.0], [2.0]])
    batch = ode_run(exact, GuidanceRule.cfg(2.0), SamplerConfig(grid, 3, method=ODE_RK4), cond=1.0, x_init=x_init)
    expected = [cfg_toy_flow(2.0, 9.0, 0.0, float(x), 1.0) for x in x_init[:, 0]]
    assert batch.x0[:, 0] == pytest.approx(expected, abs=1e-5)


def test_rk4_converges_faster_than_euler(exact):
    exact_x = cfg_toy_flow(2.0, 9.0, 0.0, 1.0, 1.0)
    errors = {}
    for method in (ODE_EULER, ODE_RK4):
        for n in (20, 40):
            grid = make_grid(9.0, n, t_min=1e-8)
            batch = ode_run(exact, GuidanceRule.cfg(2.0), SamplerConfig(grid, 1, method=method), cond=1.0,
                            x_init=1.0)
            errors[method, n] = abs(float(batch.x0[0, 0]) - exact_x)
    assert 10.0 <= errors[ODE_RK4, 20] / errors[ODE_RK4, 40] <= 22.0
    assert errors[ODE_RK4, 40] < errors[ODE_EULER, 40]


def test_unguided_ode_agrees_with_ddim(exact):
    grid = make_grid(9.0, 256, spacing="sigma")
    x_init = np.linspace(-5.0, 7.0, 13)[:, None]
    cfg = SamplerConfig(grid, 13, method=ODE_RK4)
    ode = ode_run(exact, GuidanceRule.cfg(1.0), cfg, cond=1.0, x_init=x_init)
    ddim = ddim_run(exact, GuidanceRule.none(), SamplerConfig(grid, 13), cond=1.0, x_init=x_init)
    assert np.max(np.abs(ode.x0 - ddim.x0)) <= 1e-2 * np.max(np.abs(x_init - 1.0))


def test_non_finite_state_is_reported(exact, small_grid):
    class Exploding(ExactOracle):
        def eps_cond(self, x, c, t):
            out = super().eps_cond(x, c, t)
            return out * np.inf if t < 5.0 else out

    oracle = Exploding(exact.world, exact.sched)
    with pytest.raises(NumericFailureError) as info:
        ddim_run(oracle, GuidanceRule.cfg(2.0), SamplerConfig(small_grid, 10), cond=1.0)
    assert info.value.step is not None
    assert info.value.t < 5.0


def test_prior_conditions_use_avg(exact, small_grid):
    batch = ddim_run(exact, GuidanceRule.none(), SamplerConfig(small_grid, 40_000, seed=2))
    assert batch.cond_id == AVG
    assert abs(batch.c.mean()) < 0.02
    assert batch.c.var() == pytest.approx(1.0, rel=0.03)
    assert len(np.unique(batch.c)) > 1000


def test_trajectory_is_kept(exact, small_grid):
    cfg = SamplerConfig(small_grid, 5, keep_trajectory=True)
    batch = ddim_run(exact, GuidanceRule.cfg(2.0), cfg, cond=1.0)
    assert batch.trajectory.shape == (small_grid.nfe + 1, 5, 1)
    assert np.array_equal(batch.trajectory[-1], batch.x0)


def test_sampler_config_validation(small_grid):
    with pytest.raises(DomainError):
        SamplerConfig(small_grid, 10, method="Heun")
    with pytest.raises(DomainError):
        SamplerConfig(small_grid, 0)


def test_sample_batch_rejects_nan():
    with pytest.raises(NumericFailureError):
        SampleBatch(np.array([[np.nan]]), np.array([[1.0]]))


def test_write_samples_csv(tmp_path, exact, small_grid):
    batch = ddim_run(exact, GuidanceRule.cfg(2.0), SamplerConfig(small_grid, 3), cond=1.0, cond_id="c")
    path = tmp_path / "samples.csv"
    write_samples_csv(batch, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "chain,condition,x0_0"
    assert len(lines) == 4
    assert lines[1].startswith("0,c,")
    assert float(lines[3].split(",")[2]) == float(batch.x0[2, 0])
