import math

import numpy as np
import pytest

from src.errors import DimensionMismatchError, DomainError, OrderingError
from src.schedule import (
    NoiseSchedule,
    TimeGrid,
    check_snr_monotone,
    ddim_step_coeffs,
    eval_schedule,
    forward_perturb,
    make_grid,
    pf_ode_coeffs,
)


@pytest.mark.parametrize("t, expected", [(4.0, (1.0, 2.0)), (0.0, (1.0, 0.0)), (1.0, (1.0, 1.0))])
def test_ve_schedule_values(ve, t, expected):
    assert eval_schedule(ve, t) == expected


def test_negative_time_rejected(ve):
    with pytest.raises(DomainError):
        eval_schedule(ve, -0.1)


@pytest.mark.parametrize("t, t_prev, expected", [(1.0, 0.25, (1.0, -0.5)), (1.0, 0.0, (1.0, -1.0)),
                                                  (4.0, 1.0, (1.0, -1.0))])
def test_ddim_step_coeffs_ve(ve, t, t_prev, expected):
    assert ddim_step_coeffs(ve, t, t_prev) == pytest.approx(expected)


def test_ddim_step_requires_decreasing_time(ve):
    with pytest.raises(OrderingError):
        ddim_step_coeffs(ve, 1.0, 1.0)


def test_ddim_step_is_translation_consistent(vp):
    a, b = ddim_step_coeffs(vp, 0.6, 0.3)
    x, eps, shift = 0.7, -0.2, 1.5
    assert (a * (x + shift) + b * eps) - (a * x + b * eps) == pytest.approx(a * shift)


@pytest.mark.parametrize("x0, t, noise, expected", [(0.0, 9.0, 0.0, 0.0), (1.0, 9.0, 1.0, 4.0), (2.0, 0.0, 5.0, 2.0)])
def test_forward_perturb_ve(ve, x0, t, noise, expected):
    assert forward_perturb(ve, [x0], t, [noise]) == pytest.approx([expected])


def test_forward_perturb_dimension_mismatch(ve):
    with pytest.raises(DimensionMismatchError):
        forward_perturb(ve, [1.0, 2.0], 1.0, [0.0])


@pytest.mark.parametrize("t", [0.05, 1.0, 9.0])
def test_forward_then_reverse_recovers_x0(ve, vp, t):
    x0 = np.array([-2.0, 0.0, 0.5, 3.0])
    noise = np.array([0.3, -1.1, 2.0, 0.0])
    for sched in (ve, vp):
        if sched is vp and t > 1.0:
            continue
        a, b = ddim_step_coeffs(sched, t, 0.0)
        x_t = forward_perturb(sched, x0, t, noise)
        assert a * x_t + b * noise == pytest.approx(x0, abs=1e-12)


def test_vp_is_variance_preserving(vp):
    for t in (0.0, 0.01, 0.3, 1.0):
        alpha, sigma = eval_schedule(vp, t)
        assert alpha ** 2 + sigma ** 2 == pytest.approx(1.0)


def test_snr_strictly_decreasing(ve, vp):
    times = np.linspace(0.01, 1.0, 50)
    check_snr_monotone(ve, times)
    check_snr_monotone(vp, times)


def test_snr_check_rejects_flat_schedule():
    flat = NoiseSchedule.custom(lambda t: 1.0, lambda t: 1.0)
    with pytest.raises(DomainError):
        check_snr_monotone(flat, [0.1, 0.2])


def test_pf_ode_coeffs_ve(ve):
    assert pf_ode_coeffs(ve, 3.0) == (0.0, 1.0)


def test_pf_ode_coeffs_custom_matches_linear_vp(vp):
    custom = NoiseSchedule.custom(lambda t: eval_schedule(vp, t)[0], lambda t: eval_schedule(vp, t)[1])
    for t in (0.2, 0.5, 0.9):
        assert pf_ode_coeffs(custom, t) == pytest.approx(pf_ode_coeffs(vp, t), rel=1e-5)


def test_uniform_grid():
    grid = make_grid(10.0, 5, t_min=1e-3)
    assert grid.nfe == 5
    assert grid.steps[0] == 10.0
    assert grid.steps[-1] == 0.0
    assert grid.eval_times == pytest.approx(tuple(np.linspace(10.0, 1e-3, 5)))


def test_sigma_grid_is_uniform_in_sigma():
    grid = make_grid(99.0, 50, spacing="sigma")
    sigmas = np.sqrt(grid.eval_times)
    assert np.diff(sigmas) == pytest.approx(np.full(49, np.diff(sigmas)[0]))


def test_sigma_grid_vp(vp):
    grid = make_grid(1.0, 10, spacing="sigma", sched=vp)
    sigmas = [eval_schedule(vp, t)[1] for t in grid.eval_times]
    assert np.diff(sigmas) == pytest.approx(np.full(9, np.diff(sigmas)[0]), abs=1e-9)


def test_grid_pairs_cover_the_trajectory():
    grid = make_grid(4.0, 3)
    pairs = list(grid.pairs())
    assert [i for i, _, _ in pairs] == [0, 1, 2]
    assert pairs[-1][2] == 0.0


@pytest.mark.parametrize("steps", [(1.0, 1.0, 0.0), (1.0, 0.5, 0.7), (2.0, 0.5, 0.0)])
def test_invalid_grids(steps):
    with pytest.raises(OrderingError):
        TimeGrid(1.0, steps)


def test_grid_dict_roundtrip():
    grid = make_grid(99.0, 7, spacing="sigma")
    assert TimeGrid.from_dict(grid.to_dict()) == grid


def test_nearest_index():
    grid = make_grid(10.0, 11, t_min=0.5)
    assert grid.nearest_index(10.0) == 0
    assert grid.nearest_index(0.4) == grid.nfe - 1


@pytest.mark.parametrize("kwargs", [{"nfe": 0}, {"t_min": 0.0}, {"t_min": 20.0}, {"spacing": "log"}])
def test_make_grid_validation(kwargs):
    args = {"T": 10.0, "nfe": 4} | kwargs
    with pytest.raises(DomainError):
        make_grid(**args)


def test_ve_sigma_is_sqrt_t(ve):
    assert eval_schedule(ve, 2.0)[1] == math.sqrt(2.0)
