from pathlib import Path

import pytest

from src.config import OUTPUT_ENV, RunConfig, apply_overrides, load_config, resolve_config
from src.errors import ConfigError, DomainError
from src.guidance import CFG, RECFG
from src.samplers import ODE_RK4
from src.schedule import VP

CONFIG_PATH = Path(__file__).resolve().parent.parent / "config.yaml"


def test_defaults_are_valid():
    cfg = resolve_config(None)
    assert cfg.guidance.mode == RECFG
    assert cfg.grid.spacing == "sigma"
    assert cfg.workers == 1


def test_repo_config_loads():
    cfg = resolve_config(CONFIG_PATH)
    assert cfg.grid.T == 99.0
    assert cfg.table.conditions == {"c": 1.0}
    assert cfg.verify.convergence_ns == [1000, 10000, 100000, 1000000]


def test_overrides_are_yaml_parsed():
    cfg = resolve_config(CONFIG_PATH, ["guidance.mode=cfg", "guidance.gamma1=2.5", "sampler.condition=null",
                                       "sampler.method=ODE_RK4", "shift.gammas=[1, 3]"])
    assert cfg.guidance.mode == CFG
    assert cfg.guidance.gamma1 == 2.5
    assert cfg.sampler.condition is None
    assert cfg.sampler.method == ODE_RK4
    assert cfg.shift.gammas == [1, 3]


def test_conditions_are_replaced_not_merged(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text("table:\n  conditions:\n    lo: -1.0\n    hi: 2.0\n")
    cfg = resolve_config(path)
    assert cfg.table.conditions == {"lo": -1.0, "hi": 2.0}


def test_workers_flag_wins():
    assert resolve_config(CONFIG_PATH, ["workers=2"], workers=4).workers == 4


@pytest.mark.parametrize("override, field", [
    ("grid.nfe=0", "grid.nfe"),
    ("grid.t_min=200", "grid.t_min"),
    ("guidance.gamma1=0.5", "guidance.gamma1"),
    ("guidance.clamp_mode=sideways", "guidance.clamp_mode"),
    ("sampler.method=Heun", "sampler.method"),
    ("world.cond_var=-1", "world.cond_var"),
    ("world.prior_mean=[0, 1]", "world.prior_mean"),
    ("table.antithetic=maybe", "table.antithetic"),
    ("simulate.drift_form=guessed", "simulate.drift_form"),
    ("verify.convergence_ns=[1, 10]", "verify.convergence_ns"),
])
def test_invalid_values_name_the_field(override, field):
    with pytest.raises(ConfigError) as info:
        resolve_config(None, [override])
    assert info.value.field == field


def test_unknown_field_and_section():
    with pytest.raises(ConfigError) as info:
        resolve_config(None, ["grid.steps=10"])
    assert info.value.field == "grid.steps"
    with pytest.raises(ConfigError) as info:
        RunConfig.from_dict({"plots": {}})
    assert info.value.field == "plots"


def test_malformed_override():
    with pytest.raises(ConfigError):
        apply_overrides({}, ["guidance.gamma1"])


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")


def test_invalid_yaml(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text("grid: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_output_root_precedence(monkeypatch):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    assert resolve_config(None).output_root() == Path("output")
    monkeypatch.setenv(OUTPUT_ENV, "/tmp/lab")
    assert resolve_config(None).output_root() == Path("/tmp/lab")
    assert resolve_config(None, ["output.root=elsewhere"]).output_root() == Path("elsewhere")


def test_builders():
    cfg = resolve_config(None, ["schedule.kind=VP", "grid.T=1.0", "grid.nfe=16", "oracle.kind=perturbed",
                                "oracle.mean_bias=0.1"])
    assert cfg.build_schedule().kind == VP
    grid = cfg.build_grid()
    assert grid.T == 1.0 and grid.nfe == 16
    assert cfg.build_grid(nfe=4).nfe == 4
    oracle = cfg.build_oracle()
    assert oracle.mean_bias.tolist() == [0.1]
    with pytest.raises(DomainError):
        cfg.build_rule()
    fixed = resolve_config(None, ["guidance.gamma0=-0.5"]).build_rule()
    assert fixed.mode == RECFG and fixed.gamma0 == -0.5
    sc = cfg.sampler_config(grid, batch=10)
    assert sc.batch == 10 and sc.seed == 0


def test_cfg_rule_from_config():
    rule = resolve_config(None, ["guidance.mode=cfg"]).build_rule(gamma=3.0)
    assert rule.mode == CFG
    assert rule.gamma == 3.0
