"""Deterministic reverse-time samplers: guided DDIM and the probability-flow ODE.

Chains are split into fixed blocks, each with its own random streams, so a
batch is identical for any number of workers.
"""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from src import rng
from src.errors import DomainError, NumericFailureError
from src.guidance import GuidanceCoefficients, GuidanceRule, combine_recfg
from src.lookup_table import AVG
from src.schedule import TimeGrid, ddim_step_coeffs, eval_schedule, pf_ode_coeffs
from src.worlds import ScoreOracle, forward_marginal

logger = logging.getLogger(__name__)

DDIM = "DDIM"
ODE_RK4 = "ODE_RK4"
ODE_EULER = "ODE_EULER"
METHODS = (DDIM, ODE_RK4, ODE_EULER)


@dataclass
class SamplerConfig:
    grid: TimeGrid
    batch: int
    seed: int = 0
    method: str = DDIM
    workers: int = 1
    keep_trajectory: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise DomainError(f"unknown sampler method {self.method!r}, expected one of {METHODS}")
        if self.batch < 1:
            raise DomainError(f"batch must be >= 1, got {self.batch}")
        if self.workers < 1:
            raise DomainError(f"workers must be >= 1, got {self.workers}")

    def to_dict(self) -> dict:
        return {"method": self.method, "grid": self.grid.to_dict(), "batch": self.batch,
                "seed": self.seed, "workers": self.workers}


@dataclass
class SampleBatch:
    x0: np.ndarray
    c: np.ndarray
    cond_id: str | None = None
    trajectory: np.ndarray | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.x0)):
            raise NumericFailureError("sample batch holds non-finite values")

    @property
    def size(self) -> int:
        return self.x0.shape[0]


def _initial_state(oracle: ScoreOracle, grid: TimeGrid, c: np.ndarray, seed: int, block: int) -> np.ndarray:
    mean, var = forward_marginal(oracle.world, oracle.sched, c, grid.T)
    noise = rng.stream(seed, 21, block).standard_normal(c.shape)
    return mean + np.sqrt(var) * noise


def _guided_eps(oracle: ScoreOracle, coeffs: GuidanceCoefficients, x, c, t: float) -> np.ndarray:
    e_c, e_u = oracle.eps_pair(x, c, t)
    return combine_recfg(e_c, e_u, coeffs)


def _ode_drift(oracle: ScoreOracle, coeffs: GuidanceCoefficients, x, c, t: float) -> np.ndarray:
    """dx/dt = f x - g^2 s / 2 with s = -eps_hat / sigma."""
    f, g2 = pf_ode_coeffs(oracle.sched, t)
    sigma = eval_schedule(oracle.sched, t)[1]
    return f * x + 0.5 * g2 * _guided_eps(oracle, coeffs, x, c, t) / sigma


def integrate_block(oracle: ScoreOracle, schedule: list[GuidanceCoefficients], grid: TimeGrid,
                    x: np.ndarray, c: np.ndarray, method: str = DDIM,
                    keep_trajectory: bool = False) -> tuple[np.ndarray, list | None]:
    """Run one block of chains from x at grid.T down the grid."""
    trajectory = [x.copy()] if keep_trajectory else None
    for i, t, t_prev in grid.pairs():
        coeffs = schedule[i]
        if method == DDIM or t_prev == 0:
            a, b = ddim_step_coeffs(oracle.sched, t, t_prev)
            x = a * x + b * _guided_eps(oracle, coeffs, x, c, t)
        elif method == ODE_EULER:
            x = x + (t_prev - t) * _ode_drift(oracle, coeffs, x, c, t)
        else:
            h = t_prev - t
            mid = t + 0.5 * h
            k1 = _ode_drift(oracle, coeffs, x, c, t)
            k2 = _ode_drift(oracle, coeffs, x + 0.5 * h * k1, c, mid)
            k3 = _ode_drift(oracle, coeffs, x + 0.5 * h * k2, c, mid)
            k4 = _ode_drift(oracle, coeffs, x + h * k3, c, t_prev)
            x = x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise NumericFailureError("sampler state became non-finite", i, t)
        if keep_trajectory:
            trajectory.append(x.copy())
    return x, trajectory


def _conditions(oracle: ScoreOracle, cfg: SamplerConfig, cond, block: int, size: int) -> np.ndarray:
    world = oracle.world
    if cond is not None:
        return np.broadcast_to(np.asarray(cond, dtype=float), (size, world.dim)).copy()
    z = rng.stream(cfg.seed, 20, block).standard_normal((size, world.dim))
    return world.prior_mean + np.sqrt(world.prior_var) * z


def _run(oracle: ScoreOracle, rule: GuidanceRule, cfg: SamplerConfig, method: str, cond, cond_id,
         x_init) -> SampleBatch:
    if cond is None and cond_id is None:
        cond_id = AVG
    schedule = rule.schedule(cfg.grid, cond_id)
    dim = oracle.world.dim
    if x_init is not None:
        x_init = np.broadcast_to(np.asarray(x_init, dtype=float), (cfg.batch, dim))

    def one(block_bounds):
        block, start, stop = block_bounds
        c = _conditions(oracle, cfg, cond, block, stop - start)
        x = x_init[start:stop].copy() if x_init is not None else _initial_state(oracle, cfg.grid, c, cfg.seed, block)
        x, traj = integrate_block(oracle, schedule, cfg.grid, x, c, method, cfg.keep_trajectory)
        return x, c, traj

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        parts = list(pool.map(one, rng.blocks(cfg.batch)))
    x0 = np.concatenate([p[0] for p in parts])
    c = np.concatenate([p[1] for p in parts])
    trajectory = None
    if cfg.keep_trajectory:
        trajectory = np.concatenate([np.stack(p[2]) for p in parts], axis=1)
    logger.info("%s with %s: %d chains over %d steps", method, rule.describe(), cfg.batch, cfg.grid.nfe)
    return SampleBatch(x0, c, cond_id, trajectory)


def ddim_run(oracle: ScoreOracle, rule: GuidanceRule, cfg: SamplerConfig, cond=None,
             cond_id: str | None = None, x_init=None) -> SampleBatch:
    """Guided deterministic DDIM from x_T ~ q_T(x|c).

    Without `cond`, each chain draws its own c ~ q(c) and table lookups use
    the avg entry.
    """
    return _run(oracle, rule, cfg, DDIM, cond, cond_id, x_init)


def ode_run(oracle: ScoreOracle, rule: GuidanceRule, cfg: SamplerConfig, cond=None,
            cond_id: str | None = None, x_init=None) -> SampleBatch:
    """PF-ODE with RK4 (or Euler); the final step onto t=0 is a DDIM step."""
    method = cfg.method if cfg.method != DDIM else ODE_RK4
    return _run(oracle, rule, cfg, method, cond, cond_id, x_init)


def ddim_affine_map(oracle: ScoreOracle, rule: GuidanceRule, grid: TimeGrid, cond,
                    cond_id: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(slope, intercept) of x_T -> x_0 for an affine oracle, per dimension."""
    if not oracle.affine:
        raise DomainError("the sampler is only an affine map for affine oracles")
    dim = oracle.world.dim
    c = np.broadcast_to(np.asarray(cond, dtype=float), (2, dim)).copy()
    x = np.stack([np.zeros(dim), np.ones(dim)])
    out, _ = integrate_block(oracle, rule.schedule(grid, cond_id), grid, x, c, DDIM)
    return out[1] - out[0], out[0]


def write_samples_csv(batch: SampleBatch, path: str | Path) -> None:
    dim = batch.x0.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["chain", "condition"] + [f"x0_{d}" for d in range(dim)])
        for i, (x, c) in enumerate(zip(batch.x0, batch.c)):
            label = batch.cond_id if batch.cond_id not in (None, AVG) else ";".join(f"{v:.17g}" for v in c)
            writer.writerow([i, label] + [f"{v:.17g}" for v in x])
