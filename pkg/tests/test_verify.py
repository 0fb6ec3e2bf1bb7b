import json

import numpy as np
import pytest

from src import verify
from src.config import resolve_config
from src.errors import DomainError


@pytest.fixture
def cfg():
    return resolve_config(None)


FAST_CHECKS = [
    verify.check_special_values,
    verify.check_recurrence,
    verify.check_closed_forms,
    verify.check_bounds,
    verify.check_phi_finite_matches_limit,
    verify.check_snr,
    verify.check_clamp,
    verify.check_combiner_linearity,
    verify.check_bayes_consistency,
    verify.check_guidance_equivalence,
    verify.check_affine_exactness,
    verify.check_ode,
    verify.check_ode_unguided,
    verify.check_density_mass,
    verify.check_condition_spread,
]


@pytest.mark.parametrize("check", FAST_CHECKS)
def test_fast_checks_pass(cfg, check):
    result = check(cfg)
    assert result.passed, result.detail


@pytest.mark.parametrize("check", FAST_CHECKS)
def test_fast_check_results_are_json_ready(cfg, check):
    result = check(cfg)
    assert type(result.passed) is bool
    assert json.loads(json.dumps(result.to_dict(timing=True)))["name"] == result.name


def test_passed_is_coerced_to_bool():
    assert type(verify.CheckResult("x", np.float64(1e-7) <= 1e-6).passed) is bool


def test_cond_eps_mean_check_at_reduced_size():
    cfg = resolve_config(None, ["verify.identity_n=200000"])
    result = verify.check_cond_eps_mean(cfg)
    assert result.passed, result.detail
    assert set(result.values) == {"0.1", "1", "10", "99"}


def test_eps_identity_check_at_reduced_size():
    cfg = resolve_config(None, ["verify.identity_n=100000"])
    result = verify.check_eps_identity(cfg)
    assert result.passed, result.detail
    assert set(result.values) == {f"{o}@{t}" for o in ("exact", "perturbed") for t in ("0.1", "1", "10", "99")}


def test_timed_turns_lab_errors_into_failures():
    def check_raises(cfg):
        raise DomainError("nope")

    result = verify._timed(check_raises, None)
    assert not result.passed
    assert result.name == "raises"
    assert "DomainError" in result.detail
    assert result.seconds >= 0


def test_result_dict_hides_timing_by_default():
    result = verify.CheckResult("x", True, "ok", {"a": 1}, seconds=1.23456)
    assert result.to_dict() == {"name": "x", "passed": True, "detail": "ok", "values": {"a": 1}}
    assert result.to_dict(timing=True)["seconds"] == 1.235


@pytest.mark.slow
def test_table_check_at_full_scale(cfg):
    result = verify.check_table(cfg)
    assert result.passed, result.detail
