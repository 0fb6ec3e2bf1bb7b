"""Linear-Gaussian conditional data model with exact scores.

c ~ N(m_c, diag v_c), x_0 | c ~ N(c, diag v_1). With D=1, v_1=1, m_c=0, v_c=1
this is the one-dimensional toy where q_t(x_t|c) ~ N(c, 1+t) under VE.
"""

from dataclasses import dataclass

import numpy as np

from src import rng
from src.errors import DimensionMismatchError, DomainError
from src.schedule import NoiseSchedule, eval_schedule


@dataclass(eq=False)
class AnalyticWorld:
    dim: int
    cond_var: np.ndarray
    prior_mean: np.ndarray
    prior_var: np.ndarray

    def __post_init__(self):
        if self.dim < 1:
            raise DomainError(f"world dimension must be positive, got {self.dim}")
        self.cond_var = _vector(self.cond_var, self.dim, "cond_var")
        self.prior_mean = _vector(self.prior_mean, self.dim, "prior_mean")
        self.prior_var = _vector(self.prior_var, self.dim, "prior_var")
        if np.any(self.cond_var <= 0) or np.any(self.prior_var <= 0):
            raise DomainError("cond_var and prior_var must be positive")

    @classmethod
    def toy(cls) -> "AnalyticWorld":
        return cls(1, 1.0, 0.0, 1.0)

    @property
    def marginal_var(self) -> np.ndarray:
        return self.cond_var + self.prior_var

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "cond_var": self.cond_var.tolist(),
            "prior_mean": self.prior_mean.tolist(),
            "prior_var": self.prior_var.tolist(),
        }


def _vector(value, dim: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(dim, float(arr))
    if arr.shape != (dim,):
        raise DimensionMismatchError(f"{name} has shape {arr.shape}, expected ({dim},)")
    return arr.copy()


def _check(world: AnalyticWorld, **arrays) -> None:
    for name, arr in arrays.items():
        if arr.shape[-1:] != (world.dim,):
            raise DimensionMismatchError(
                f"{name} has trailing dimension {arr.shape[-1:]}, world has dim {world.dim}")


def _as_points(world: AnalyticWorld, x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = np.full(world.dim, float(arr))
    return arr


def cond_score(world: AnalyticWorld, sched: NoiseSchedule, x, c, t: float) -> np.ndarray:
    """grad log q_t(x|c) = -(x - alpha c) / (alpha^2 v_1 + sigma^2)."""
    x, c = _as_points(world, x), _as_points(world, c)
    _check(world, x=x, c=c)
    alpha, sigma = eval_schedule(sched, t)
    return -(x - alpha * c) / (alpha * alpha * world.cond_var + sigma * sigma)


def uncond_score(world: AnalyticWorld, sched: NoiseSchedule, x, t: float) -> np.ndarray:
    """grad log q_t(x) = -(x - alpha m_c) / (alpha^2 (v_1 + v_c) + sigma^2)."""
    x = _as_points(world, x)
    _check(world, x=x)
    alpha, sigma = eval_schedule(sched, t)
    return -(x - alpha * world.prior_mean) / (alpha * alpha * world.marginal_var + sigma * sigma)


def bayes_uncond_score(world: AnalyticWorld, sched: NoiseSchedule, x, t: float) -> np.ndarray:
    """Unconditional score as the q_t(c|x)-average of the conditional score.

    The conditional score is affine in c, so the average is the score at the
    posterior mean E[c|x].
    """
    x = _as_points(world, x)
    _check(world, x=x)
    alpha, sigma = eval_schedule(sched, t)
    a2 = alpha * alpha
    gain = alpha * world.prior_var / (a2 * world.marginal_var + sigma * sigma)
    post_mean = world.prior_mean + gain * (x - alpha * world.prior_mean)
    return -(x - alpha * post_mean) / (a2 * world.cond_var + sigma * sigma)


def forward_marginal(world: AnalyticWorld, sched: NoiseSchedule, c, t: float) -> tuple[np.ndarray, np.ndarray]:
    """(mean, var) of q_t(x_t|c)."""
    c = _as_points(world, c)
    alpha, sigma = eval_schedule(sched, t)
    return alpha * c, alpha * alpha * world.cond_var + sigma * sigma


def sample_data(world: AnalyticWorld, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """n i.i.d. pairs (x0, c) as two n x D arrays, reproducible per seed."""
    if n < 1:
        raise DomainError(f"need n >= 1 samples, got {n}")
    c = world.prior_mean + np.sqrt(world.prior_var) * rng.standard_normal(seed, n, world.dim, 0)
    x0 = c + np.sqrt(world.cond_var) * rng.standard_normal(seed, n, world.dim, 1)
    return x0, c


def sample_conditional(world: AnalyticWorld, c, n: int, seed: int, *keys: int) -> np.ndarray:
    """n draws of x0 ~ q_0(x0|c) for a single condition vector."""
    c = _as_points(world, c)
    _check(world, c=c)
    return c + np.sqrt(world.cond_var) * rng.standard_normal(seed, n, world.dim, 2, *keys)
