"""Run configuration: config.yaml merged over defaults, then --set overrides on top."""

import copy
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from src.errors import ConfigError
from src.guidance import CLAMP_MODES, CFG, NONE, RECFG, GuidanceRule
from src.samplers import METHODS, SamplerConfig
from src.schedule import VE, VP, NoiseSchedule, TimeGrid, make_grid
from src.shift_theory import CLOSED_FORM, DRIFT_FORMS, QUADRATURE, RECURRENCE
from src.worlds import AnalyticWorld, ExactOracle, PerturbedOracle, ScoreOracle

OUTPUT_ENV = "GUIDANCE_LAB_OUTPUT"
DEFAULT_OUTPUT = "output"


@dataclass
class WorldConfig:
    dim: int = 1
    cond_var: object = 1.0
    prior_mean: object = 0.0
    prior_var: object = 1.0

    def validate(self, p: str) -> None:
        _positive_int(self.dim, f"{p}.dim")
        for name in ("cond_var", "prior_var"):
            for v in _as_list(getattr(self, name), f"{p}.{name}", self.dim):
                if not v > 0:
                    raise ConfigError(f"{p}.{name}", f"must be positive, got {v}")
        _as_list(self.prior_mean, f"{p}.prior_mean", self.dim)


@dataclass
class ScheduleConfig:
    kind: str = VE
    beta_min: float = 0.1
    beta_max: float = 20.0

    def validate(self, p: str) -> None:
        _choice(self.kind, (VE, VP), f"{p}.kind")
        if self.kind == VP:
            _positive(self.beta_min, f"{p}.beta_min")
            if not _number(self.beta_max, f"{p}.beta_max") >= self.beta_min:
                raise ConfigError(f"{p}.beta_max", f"must be >= beta_min, got {self.beta_max}")


@dataclass
class GridConfig:
    T: float = 99.0
    nfe: int = 4096
    t_min: float = 1e-3
    spacing: str = "sigma"

    def validate(self, p: str) -> None:
        _positive(self.T, f"{p}.T")
        _positive_int(self.nfe, f"{p}.nfe")
        if not 0 < _number(self.t_min, f"{p}.t_min") < self.T:
            raise ConfigError(f"{p}.t_min", f"must lie in (0, T), got {self.t_min}")
        _choice(self.spacing, ("uniform", "sigma"), f"{p}.spacing")


@dataclass
class GuidanceConfig:
    mode: str = RECFG
    gamma1: float = 2.0
    gamma0: float | None = None
    clamp_mode: str = "strict"
    fallback: bool = True

    def validate(self, p: str) -> None:
        _choice(self.mode, (NONE, CFG, RECFG), f"{p}.mode")
        if not _number(self.gamma1, f"{p}.gamma1") >= 1:
            raise ConfigError(f"{p}.gamma1", f"must be >= 1, got {self.gamma1}")
        if self.gamma0 is not None:
            _number(self.gamma0, f"{p}.gamma0")
        _choice(self.clamp_mode, CLAMP_MODES, f"{p}.clamp_mode")
        _bool(self.fallback, f"{p}.fallback")


@dataclass
class OracleConfig:
    kind: str = "exact"
    mean_bias: object = 0.0
    scale: object = 1.0

    def validate(self, p: str) -> None:
        _choice(self.kind, ("exact", "perturbed"), f"{p}.kind")
        _as_list(self.mean_bias, f"{p}.mean_bias")
        for v in _as_list(self.scale, f"{p}.scale"):
            if not v > 0:
                raise ConfigError(f"{p}.scale", f"must be positive, got {v}")


@dataclass
class SamplerSection:
    method: str = "DDIM"
    batch: int = 100_000
    seed: int = 0
    condition: object = 1.0
    cond_id: str | None = "c"

    def validate(self, p: str) -> None:
        _choice(self.method, METHODS, f"{p}.method")
        _positive_int(self.batch, f"{p}.batch")
        _int(self.seed, f"{p}.seed")
        if self.condition is not None:
            _as_list(self.condition, f"{p}.condition")


@dataclass
class TableConfig:
    path: str | None = None
    cache: str | None = None
    n_per_condition: int = 100_000
    conditions: dict = field(default_factory=lambda: {"c": 1.0})
    seed: int = 1
    antithetic: bool = True
    heatmap_condition: str | None = None

    def validate(self, p: str) -> None:
        _positive_int(self.n_per_condition, f"{p}.n_per_condition")
        if self.n_per_condition < 2:
            raise ConfigError(f"{p}.n_per_condition", "must be >= 2")
        if not isinstance(self.conditions, dict) or not self.conditions:
            raise ConfigError(f"{p}.conditions", "must be a non-empty mapping of id -> condition")
        for key, value in self.conditions.items():
            _as_list(value, f"{p}.conditions.{key}")
        _int(self.seed, f"{p}.seed")
        _bool(self.antithetic, f"{p}.antithetic")


@dataclass
class ShiftConfig:
    gammas: list = field(default_factory=lambda: [1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0])
    T: float = 99.0
    method: str = QUADRATURE
    limit: bool = True
    recfg_gamma0s: list = field(default_factory=list)

    def validate(self, p: str) -> None:
        for g in _as_list(self.gammas, f"{p}.gammas"):
            if not g >= 1:
                raise ConfigError(f"{p}.gammas", f"every gamma must be >= 1, got {g}")
        _positive(self.T, f"{p}.T")
        _choice(self.method, (QUADRATURE, CLOSED_FORM, RECURRENCE), f"{p}.method")
        _bool(self.limit, f"{p}.limit")
        _as_list(self.recfg_gamma0s, f"{p}.recfg_gamma0s")


@dataclass
class SimulateConfig:
    gammas: list = field(default_factory=lambda: [1.5, 2.0, 2.5])
    condition: float = 1.0
    drift_form: str = "tracked"

    def validate(self, p: str) -> None:
        for g in _as_list(self.gammas, f"{p}.gammas"):
            if not g >= 1:
                raise ConfigError(f"{p}.gammas", f"every gamma must be >= 1, got {g}")
        _number(self.condition, f"{p}.condition")
        _choice(self.drift_form, DRIFT_FORMS, f"{p}.drift_form")


@dataclass
class VerifyConfig:
    T: float = 99.0
    nfe: int = 4096
    batch: int = 100_000
    table_n: int = 100_000
    identity_n: int = 1_000_000
    identity_times: list = field(default_factory=lambda: [0.1, 1.0, 10.0, 99.0])
    convergence_ns: list = field(default_factory=lambda: [1_000, 10_000, 100_000, 1_000_000])
    gammas: list = field(default_factory=lambda: [1.5, 2.0, 2.5])
    seed: int = 2024

    def validate(self, p: str) -> None:
        _positive(self.T, f"{p}.T")
        for name in ("nfe", "batch", "table_n", "identity_n"):
            _positive_int(getattr(self, name), f"{p}.{name}")
        for n in _as_list(self.convergence_ns, f"{p}.convergence_ns"):
            if n < 2 or n != int(n):
                raise ConfigError(f"{p}.convergence_ns", f"entries must be integers >= 2, got {n}")
        _as_list(self.identity_times, f"{p}.identity_times")
        _as_list(self.gammas, f"{p}.gammas")
        _int(self.seed, f"{p}.seed")


@dataclass
class OutputConfig:
    root: str | None = None


SECTIONS = {
    "world": WorldConfig,
    "schedule": ScheduleConfig,
    "grid": GridConfig,
    "guidance": GuidanceConfig,
    "oracle": OracleConfig,
    "sampler": SamplerSection,
    "table": TableConfig,
    "shift": ShiftConfig,
    "simulate": SimulateConfig,
    "verify": VerifyConfig,
    "output": OutputConfig,
}


@dataclass
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    table: TableConfig = field(default_factory=TableConfig)
    shift: ShiftConfig = field(default_factory=ShiftConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    workers: int = 1

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("<root>", "configuration must be a mapping")
        unknown = set(data) - set(SECTIONS) - {"workers"}
        if unknown:
            raise ConfigError(sorted(unknown)[0], f"unknown section (known: {', '.join(SECTIONS)})")
        sections = {}
        for name, section_cls in SECTIONS.items():
            raw = data.get(name) or {}
            if not isinstance(raw, dict):
                raise ConfigError(name, "section must be a mapping")
            known = {f.name for f in fields(section_cls)}
            for key in raw:
                if key not in known:
                    raise ConfigError(f"{name}.{key}", f"unknown field (known: {', '.join(sorted(known))})")
            section = section_cls(**raw)
            if hasattr(section, "validate"):
                section.validate(name)
            sections[name] = section
        workers = data.get("workers", 1)
        _positive_int(workers, "workers")
        return cls(workers=workers, **sections)

    def to_dict(self) -> dict:
        out = {name: {f.name: getattr(getattr(self, name), f.name) for f in fields(cls)}
               for name, cls in SECTIONS.items()}
        out["workers"] = self.workers
        return out

    def output_root(self) -> Path:
        return Path(self.output.root or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)

    def build_world(self) -> AnalyticWorld:
        w = self.world
        return AnalyticWorld(w.dim, w.cond_var, w.prior_mean, w.prior_var)

    def build_schedule(self) -> NoiseSchedule:
        if self.schedule.kind == VE:
            return NoiseSchedule.ve()
        return NoiseSchedule.vp(self.schedule.beta_min, self.schedule.beta_max)

    def build_grid(self, T: float | None = None, nfe: int | None = None) -> TimeGrid:
        g = self.grid
        return make_grid(T or g.T, nfe or g.nfe, g.t_min, g.spacing, self.build_schedule())

    def build_oracle(self) -> ScoreOracle:
        exact = ExactOracle(self.build_world(), self.build_schedule())
        if self.oracle.kind == "exact":
            return exact
        return PerturbedOracle(exact, self.oracle.mean_bias, self.oracle.scale)

    def build_rule(self, table=None, gamma: float | None = None) -> GuidanceRule:
        g = self.guidance
        gamma = g.gamma1 if gamma is None else gamma
        if g.mode == NONE:
            return GuidanceRule.none()
        if g.mode == CFG:
            return GuidanceRule.cfg(gamma)
        return GuidanceRule.recfg(gamma, table=table, gamma0=g.gamma0,
                                  clamp_mode=g.clamp_mode, fallback=g.fallback)

    def sampler_config(self, grid: TimeGrid, batch: int | None = None, seed: int | None = None) -> SamplerConfig:
        s = self.sampler
        return SamplerConfig(grid, batch or s.batch, s.seed if seed is None else seed,
                             s.method, self.workers)


def _number(value, name: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise ConfigError(name, f"must be a finite number, got {value!r}")
    return float(value)


def _positive(value, name: str) -> float:
    if not _number(value, name) > 0:
        raise ConfigError(name, f"must be positive, got {value}")
    return float(value)


def _int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(name, f"must be an integer, got {value!r}")
    return value


def _positive_int(value, name: str) -> int:
    if _int(value, name) < 1:
        raise ConfigError(name, f"must be a positive integer, got {value}")
    return value


def _bool(value, name: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(name, f"must be true or false, got {value!r}")
    return value


def _choice(value, choices, name: str) -> str:
    if value not in choices:
        raise ConfigError(name, f"must be one of {', '.join(map(str, choices))}, got {value!r}")
    return value


def _as_list(value, name: str, length: int | None = None) -> list[float]:
    values = value if isinstance(value, list) else [value]
    out = [_number(v, name) for v in values]
    if length is not None and isinstance(value, list) and len(out) != length:
        raise ConfigError(name, f"expected a scalar or {length} values, got {len(out)}")
    return out


def load_config(config_path: str | Path = "config.yaml") -> dict:
    path = Path(config_path)
    if not path.exists():
        raise ConfigError("--config", f"configuration file {path} not found")
    try:
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError("--config", f"{path} is not valid YAML: {e}") from e
    return data or {}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key != "conditions":
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply `key.sub=value` overrides; values go through the YAML scalar parser."""
    out = copy.deepcopy(data)
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError("--set", f"expected key=value, got {item!r}")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(key, f"unparsable value {raw!r}: {e}") from e
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(key, f"{part} is not a section")
            node = child
        node[parts[-1]] = value
    return out


def resolve_config(config_path: str | Path | None, overrides: list[str] | None = None,
                   workers: int | None = None) -> RunConfig:
    """Defaults < config file < --set overrides < --workers."""
    data = RunConfig().to_dict()
    if config_path is not None:
        data = _merge(data, load_config(config_path))
    data = apply_overrides(data, overrides or [])
    if workers is not None:
        data["workers"] = workers
    return RunConfig.from_dict(data)
