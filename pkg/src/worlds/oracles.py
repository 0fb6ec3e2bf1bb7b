"""Noise-prediction oracles: exact ones, and perturbed ones that mimic a learned model's bias."""

import abc

import numpy as np

from src.errors import DimensionMismatchError, DomainError, SingularSigmaError
from src.schedule import NoiseSchedule, eval_schedule
from src.worlds.gaussian import AnalyticWorld, cond_score, uncond_score


class ScoreOracle(abc.ABC):
    """Evaluates eps(x, c, t) and eps(x, t) on D-vectors (or n x D batches).

    Oracles are immutable after construction. `affine` marks oracles whose
    outputs are affine in x, so expectations equal evaluations at the mean.
    """

    world: AnalyticWorld
    sched: NoiseSchedule
    affine: bool = True

    @abc.abstractmethod
    def eps_cond(self, x, c, t: float) -> np.ndarray:
        ...

    @abc.abstractmethod
    def eps_uncond(self, x, t: float) -> np.ndarray:
        ...

    def eps_pair(self, x, c, t: float) -> tuple[np.ndarray, np.ndarray]:
        return self.eps_cond(x, c, t), self.eps_uncond(x, t)

    def describe(self) -> str:
        return type(self).__name__


def _sigma(sched: NoiseSchedule, t: float) -> float:
    sigma = eval_schedule(sched, t)[1]
    if sigma <= 0:
        raise SingularSigmaError(f"eps-parameterization undefined at t={t} (sigma_t = 0)")
    return sigma


class ExactOracle(ScoreOracle):
    """eps = -sigma_t * grad log q_t."""

    def __init__(self, world: AnalyticWorld, sched: NoiseSchedule):
        self.world = world
        self.sched = sched

    def eps_cond(self, x, c, t: float) -> np.ndarray:
        return -_sigma(self.sched, t) * cond_score(self.world, self.sched, x, c, t)

    def eps_uncond(self, x, t: float) -> np.ndarray:
        return -_sigma(self.sched, t) * uncond_score(self.world, self.sched, x, t)

    def describe(self) -> str:
        return f"exact(dim={self.world.dim}, schedule={self.sched.kind})"


class PerturbedOracle(ScoreOracle):
    """Conditional branch replaced by scale * eps_cond + mean_bias; unconditional branch untouched."""

    def __init__(self, base: ScoreOracle, mean_bias, scale=1.0):
        self.base = base
        self.world = base.world
        self.sched = base.sched
        dim = self.world.dim
        self.mean_bias = _broadcast(mean_bias, dim, "mean_bias")
        self.scale = _broadcast(scale, dim, "scale")
        if np.any(self.scale <= 0):
            raise DomainError("perturbed oracle scale must be positive")

    def eps_cond(self, x, c, t: float) -> np.ndarray:
        return self.scale * self.base.eps_cond(x, c, t) + self.mean_bias

    def eps_uncond(self, x, t: float) -> np.ndarray:
        return self.base.eps_uncond(x, t)

    def describe(self) -> str:
        return (f"perturbed({self.base.describe()}, bias={self.mean_bias.tolist()}, "
                f"scale={self.scale.tolist()})")


def _broadcast(value, dim: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(dim, float(arr))
    if arr.shape != (dim,):
        raise DimensionMismatchError(f"{name} has shape {arr.shape}, expected ({dim},)")
    return arr.copy()


def eps_pair(oracle: ScoreOracle, x, c, t: float) -> tuple[np.ndarray, np.ndarray]:
    return oracle.eps_pair(x, c, t)
