import numpy as np
import pytest

from src.errors import DimensionMismatchError, DomainError, InfeasibleClampError
from src.guidance import (
    LOOSE,
    OFF,
    STRICT,
    GuidanceCoefficients,
    GuidanceRule,
    clamp_coeffs,
    combine_cfg,
    combine_recfg,
    residual_eps,
)
from src.lookup_table import LookupTable
from src.schedule import make_grid


@pytest.mark.parametrize("gamma, expected", [(1.0, 1.0), (2.0, 1.5), (0.0, 0.5)])
def test_combine_cfg(gamma, expected):
    assert combine_cfg(np.array([1.0]), np.array([0.5]), gamma) == pytest.approx([expected])


def test_combine_recfg_unguided():
    eps_c = np.array([0.3, -1.2])
    assert np.array_equal(combine_recfg(eps_c, np.array([5.0, 7.0]), GuidanceCoefficients(1.0, 0.0, OFF)), eps_c)


def test_combine_recfg_componentwise():
    coeffs = GuidanceCoefficients([2.0, 3.0], [-1.0, -2.0], OFF)
    assert combine_recfg(np.ones(2), np.ones(2), coeffs) == pytest.approx([1.0, 1.0])


def test_cfg_embedding_is_exact():
    rng = np.random.default_rng(1)
    eps_c, eps_u = rng.standard_normal((2, 100, 3))
    for gamma in (1.0, 1.5, 2.0, 7.5):
        coeffs = GuidanceCoefficients(gamma, 1.0 - gamma, OFF)
        assert np.array_equal(combine_recfg(eps_c, eps_u, coeffs), combine_cfg(eps_c, eps_u, gamma))


def test_combine_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        combine_cfg(np.ones(2), np.ones(3), 2.0)
    with pytest.raises(DimensionMismatchError):
        combine_recfg(np.ones(2), np.ones(2), GuidanceCoefficients([1.0, 1.0, 1.0], 0.0, OFF))


@pytest.mark.parametrize("gamma1, gamma0, expected", [(3.0, 0.5, 0.0), (1.2, -0.5, -0.2), (2.0, -0.7, -0.7)])
def test_strict_clamp(gamma1, gamma0, expected):
    out = clamp_coeffs(GuidanceCoefficients(gamma1, gamma0, STRICT))
    assert float(out.gamma0) == pytest.approx(expected)
    assert float(out.gamma1) == gamma1


def test_loose_clamp_allows_down_to_minus_gamma1():
    out = clamp_coeffs(GuidanceCoefficients(2.0, -1.5, LOOSE))
    assert float(out.gamma0) == -1.5
    out = clamp_coeffs(GuidanceCoefficients(2.0, -3.0, LOOSE))
    assert float(out.gamma0) == -2.0


def test_clamp_is_idempotent_and_feasible():
    rng = np.random.default_rng(7)
    gamma1 = 1.0 + 3.0 * rng.random(50)
    gamma0 = 4.0 * rng.standard_normal(50)
    once = clamp_coeffs(GuidanceCoefficients(gamma1, gamma0, STRICT))
    twice = clamp_coeffs(once)
    assert np.array_equal(once.gamma0, twice.gamma0)
    assert np.all(once.gamma0 <= 0)
    assert np.all(once.gamma1 + once.gamma0 >= 1 - 1e-12)


def test_strict_clamp_infeasible():
    with pytest.raises(InfeasibleClampError):
        clamp_coeffs(GuidanceCoefficients([2.0, 0.5], 0.0, STRICT))


def test_clamp_off_passes_through():
    coeffs = GuidanceCoefficients(0.5, 3.0, OFF)
    assert clamp_coeffs(coeffs) is coeffs


def test_residual_eps():
    eps_c, eps_u = np.array([0.4, -1.0]), np.array([1.5, 2.0])
    assert residual_eps(eps_c, eps_u, GuidanceCoefficients(1.0, 0.0, OFF)) == pytest.approx([0.0, 0.0])
    gamma = 2.5
    cfg = residual_eps(eps_c, eps_u, GuidanceCoefficients(gamma, 1 - gamma, OFF))
    assert cfg == pytest.approx((gamma - 1) * (eps_c - eps_u))
    same = np.array([0.3, 0.3])
    assert residual_eps(same, same, GuidanceCoefficients(2.0, -1.0, OFF)) == pytest.approx([0.0, 0.0])


def test_unknown_clamp_mode():
    with pytest.raises(DomainError):
        GuidanceCoefficients(1.0, 0.0, "sideways")


def _table(nfe: int, ratios: np.ndarray) -> LookupTable:
    grid = make_grid(9.0, nfe)
    return LookupTable("test", grid, 1, {"c": ratios.reshape(nfe, 1)}, {"c": 10})


def test_rule_reads_table_per_step():
    table = _table(4, np.array([0.3, -0.3, 0.0, 0.1]))
    rule = GuidanceRule.recfg(2.0, table=table)
    gamma0 = [float(co.gamma0[0]) for co in rule.schedule(table.grid, "c")]
    assert gamma0 == pytest.approx([-0.3, 0.0, 0.0, -0.1])


def test_rule_uses_nearest_table_row_on_nfe_mismatch(caplog):
    table = _table(4, np.array([0.3, 0.2, 0.1, 0.05]))
    rule = GuidanceRule.recfg(2.0, table=table)
    grid = make_grid(9.0, 7)
    with caplog.at_level("WARNING"):
        schedule = rule.schedule(grid, "c")
    assert "nearest-time" in caplog.text
    assert float(schedule[0].gamma0[0]) == pytest.approx(-0.3)
    assert float(schedule[-1].gamma0[0]) == pytest.approx(-0.05)


def test_rule_modes():
    grid = make_grid(9.0, 3)
    none = GuidanceRule.none().coeffs_at(grid, 0, 9.0)
    assert float(none.gamma1) == 1.0 and float(none.gamma0) == 0.0
    cfg = GuidanceRule.cfg(2.5).coeffs_at(grid, 0, 9.0)
    assert float(cfg.gamma0) == -1.5
    forced = GuidanceRule.recfg(2.5, gamma0=-1.5).coeffs_at(grid, 0, 9.0)
    assert np.array_equal(forced.gamma0, cfg.gamma0)


def test_recfg_rule_needs_a_source():
    with pytest.raises(DomainError):
        GuidanceRule.recfg(2.0)
