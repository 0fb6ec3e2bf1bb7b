"""Combination rules for conditional/unconditional noise predictions.

CFG is the special case gamma1 = gamma, gamma0 = 1 - gamma of the rectified
rule and runs through the same code path, so the two agree bit for bit.
"""

import logging
from dataclasses import dataclass

import numpy as np

from src.errors import DimensionMismatchError, DomainError, InfeasibleClampError

logger = logging.getLogger(__name__)

STRICT = "strict"   # gamma0 <= 0 and gamma1 + gamma0 >= 1
LOOSE = "loose"     # gamma0 <= 0 and gamma1 + gamma0 >= 0
OFF = "off"
CLAMP_MODES = (STRICT, LOOSE, OFF)

NONE = "none"
CFG = "cfg"
RECFG = "recfg"


@dataclass(frozen=True, eq=False)
class GuidanceCoefficients:
    gamma1: np.ndarray
    gamma0: np.ndarray
    clamp_mode: str = STRICT

    def __post_init__(self):
        if self.clamp_mode not in CLAMP_MODES:
            raise DomainError(f"unknown clamp mode {self.clamp_mode!r}")
        object.__setattr__(self, "gamma1", np.asarray(self.gamma1, dtype=float))
        object.__setattr__(self, "gamma0", np.asarray(self.gamma0, dtype=float))

    def to_dict(self) -> dict:
        return {"gamma1": self.gamma1.tolist(), "gamma0": self.gamma0.tolist(),
                "clamp_mode": self.clamp_mode}


def _check_pair(eps_cond, eps_uncond) -> tuple[np.ndarray, np.ndarray]:
    eps_cond = np.asarray(eps_cond, dtype=float)
    eps_uncond = np.asarray(eps_uncond, dtype=float)
    if eps_cond.shape != eps_uncond.shape:
        raise DimensionMismatchError(
            f"eps_cond shape {eps_cond.shape} != eps_uncond shape {eps_uncond.shape}")
    return eps_cond, eps_uncond


def _check_coeff(coeff: np.ndarray, eps: np.ndarray, name: str) -> None:
    if coeff.ndim and eps.ndim and coeff.shape[-1] not in (1, eps.shape[-1]):
        raise DimensionMismatchError(
            f"{name} of length {coeff.shape[-1]} does not broadcast to eps dimension {eps.shape[-1]}")


def combine_recfg(eps_cond, eps_uncond, coeffs: GuidanceCoefficients) -> np.ndarray:
    """gamma1 * eps_cond + gamma0 * eps_uncond, element-wise."""
    eps_cond, eps_uncond = _check_pair(eps_cond, eps_uncond)
    _check_coeff(coeffs.gamma1, eps_cond, "gamma1")
    _check_coeff(coeffs.gamma0, eps_cond, "gamma0")
    return coeffs.gamma1 * eps_cond + coeffs.gamma0 * eps_uncond


def cfg_coeffs(gamma) -> GuidanceCoefficients:
    gamma = np.asarray(gamma, dtype=float)
    return GuidanceCoefficients(gamma, 1.0 - gamma, OFF)


def combine_cfg(eps_cond, eps_uncond, gamma) -> np.ndarray:
    """gamma * eps_cond + (1 - gamma) * eps_uncond."""
    return combine_recfg(eps_cond, eps_uncond, cfg_coeffs(gamma))


def residual_eps(eps_cond, eps_uncond, coeffs: GuidanceCoefficients) -> np.ndarray:
    """(gamma1 - 1) * eps_cond + gamma0 * eps_uncond, the part of the guided eps that drives the mean shift."""
    eps_cond, eps_uncond = _check_pair(eps_cond, eps_uncond)
    _check_coeff(coeffs.gamma1, eps_cond, "gamma1")
    _check_coeff(coeffs.gamma0, eps_cond, "gamma0")
    return (coeffs.gamma1 - 1.0) * eps_cond + coeffs.gamma0 * eps_uncond


def clamp_coeffs(coeffs: GuidanceCoefficients) -> GuidanceCoefficients:
    """Project each gamma0 onto [1 - gamma1, 0] (strict) or [-gamma1, 0] (loose)."""
    if coeffs.clamp_mode == OFF:
        return coeffs
    gamma1 = coeffs.gamma1
    lower = 1.0 - gamma1 if coeffs.clamp_mode == STRICT else -gamma1
    if np.any(lower > 0):
        bound = "1" if coeffs.clamp_mode == STRICT else "0"
        raise InfeasibleClampError(
            f"{coeffs.clamp_mode} clamp needs gamma1 >= {bound} in every component, got {gamma1.tolist()}")
    gamma0 = np.minimum(np.maximum(coeffs.gamma0, lower), 0.0)
    return GuidanceCoefficients(gamma1, gamma0, coeffs.clamp_mode)


@dataclass(frozen=True, eq=False)
class GuidanceRule:
    """How a sampler turns an eps pair into a guided eps at each step.

    mode none: gamma1=1, gamma0=0. mode cfg: (gamma, 1 - gamma). mode recfg:
    gamma1 fixed, gamma0 from `gamma0` if given, otherwise from the lookup
    table per (condition, step).
    """
    mode: str = NONE
    gamma: object = 1.0
    table: object = None
    gamma0: object = None
    clamp_mode: str = STRICT
    fallback: bool = True

    @classmethod
    def none(cls) -> "GuidanceRule":
        return cls(NONE)

    @classmethod
    def cfg(cls, gamma) -> "GuidanceRule":
        return cls(CFG, gamma)

    @classmethod
    def recfg(cls, gamma1, table=None, gamma0=None, clamp_mode: str = STRICT,
              fallback: bool = True) -> "GuidanceRule":
        if table is None and gamma0 is None:
            raise DomainError("recfg guidance needs a lookup table or a fixed gamma0")
        return cls(RECFG, gamma1, table, gamma0, clamp_mode, fallback)

    def table_index(self, grid, t_index: int, t: float) -> int:
        table_grid = self.table.grid
        if table_grid.nfe == grid.nfe:
            return t_index
        return table_grid.nearest_index(t)

    def coeffs_at(self, grid, t_index: int, t: float, cond_id: str | None = None) -> GuidanceCoefficients:
        if self.mode == NONE:
            return GuidanceCoefficients(1.0, 0.0, OFF)
        if self.mode == CFG:
            return cfg_coeffs(self.gamma)
        if self.gamma0 is not None:
            return clamp_coeffs(GuidanceCoefficients(self.gamma, self.gamma0, self.clamp_mode))
        from src.lookup_table import gamma0_for

        row = self.table_index(grid, t_index, t)
        gamma0 = gamma0_for(self.table, self.gamma, cond_id, row, self.clamp_mode,
                            fallback=self.fallback)
        return GuidanceCoefficients(self.gamma, gamma0, self.clamp_mode)

    def schedule(self, grid, cond_id: str | None = None) -> list[GuidanceCoefficients]:
        """Coefficients for every evaluation step of the grid."""
        if self.mode == RECFG and self.table is not None and self.table.grid.nfe != grid.nfe:
            logger.warning("grid has %d steps but table has %d; using nearest-time table rows",
                           grid.nfe, self.table.grid.nfe)
        return [self.coeffs_at(grid, i, t, cond_id) for i, t in enumerate(grid.eval_times)]

    def describe(self) -> str:
        if self.mode == NONE:
            return "none"
        if self.mode == CFG:
            return f"cfg(gamma={np.asarray(self.gamma).tolist()})"
        source = "table" if self.gamma0 is None else f"gamma0={np.asarray(self.gamma0).tolist()}"
        return f"recfg(gamma1={np.asarray(self.gamma).tolist()}, {source}, clamp={self.clamp_mode})"
