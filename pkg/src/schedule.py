"""Noise schedules, time grids, forward perturbation and DDIM step coefficients.

Everything here is a pure function of (kind, params, t); nothing is cached.
"""

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize

from src.errors import DimensionMismatchError, DomainError, OrderingError

VE = "VE"
VP = "VP"

# Default end of the evaluated trajectory; the last step maps to t=0 analytically.
T_MIN = 1e-3


@dataclass(frozen=True)
class NoiseSchedule:
    """alpha(t), sigma(t) of the forward process x_t = alpha_t x_0 + sigma_t eps.

    VE is fixed to alpha=1, sigma=sqrt(t). VP uses the linear-beta pair
    (beta_min, beta_max) unless alpha_fn/sigma_fn are supplied.
    """
    kind: str = VE
    params: dict = field(default_factory=dict)
    alpha_fn: Callable[[float], float] | None = None
    sigma_fn: Callable[[float], float] | None = None

    def __post_init__(self):
        if self.kind not in (VE, VP):
            raise DomainError(f"unknown schedule kind {self.kind!r}, expected VE or VP")
        if self.kind == VP and self.alpha_fn is None:
            bmin = self.params.get("beta_min", 0.1)
            bmax = self.params.get("beta_max", 20.0)
            if not 0 < bmin <= bmax:
                raise DomainError(f"VP needs 0 < beta_min <= beta_max, got {bmin}, {bmax}")

    @classmethod
    def ve(cls) -> "NoiseSchedule":
        return cls(VE)

    @classmethod
    def vp(cls, beta_min: float = 0.1, beta_max: float = 20.0) -> "NoiseSchedule":
        return cls(VP, {"beta_min": beta_min, "beta_max": beta_max})

    @classmethod
    def custom(cls, alpha_fn: Callable[[float], float],
               sigma_fn: Callable[[float], float]) -> "NoiseSchedule":
        return cls(VP, {}, alpha_fn, sigma_fn)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": dict(self.params),
                "custom": self.alpha_fn is not None}


def _vp_log_alpha(params: dict, t: float) -> float:
    bmin = params.get("beta_min", 0.1)
    bmax = params.get("beta_max", 20.0)
    return -0.25 * t * t * (bmax - bmin) - 0.5 * t * bmin


def eval_schedule(sched: NoiseSchedule, t: float) -> tuple[float, float]:
    """Return (alpha_t, sigma_t)."""
    if t < 0:
        raise DomainError(f"schedule evaluated at negative time t={t}")
    if sched.kind == VE:
        return 1.0, math.sqrt(t)
    if sched.alpha_fn is not None:
        return float(sched.alpha_fn(t)), float(sched.sigma_fn(t))
    alpha = math.exp(_vp_log_alpha(sched.params, t))
    return alpha, math.sqrt(-math.expm1(2.0 * _vp_log_alpha(sched.params, t)))


def snr(sched: NoiseSchedule, t: float) -> float:
    alpha, sigma = eval_schedule(sched, t)
    if sigma == 0:
        return math.inf
    return alpha * alpha / (sigma * sigma)


def check_snr_monotone(sched: NoiseSchedule, times) -> None:
    """Raise DomainError unless alpha^2/sigma^2 strictly decreases along increasing times."""
    ordered = sorted(float(t) for t in times)
    values = [snr(sched, t) for t in ordered]
    for (t0, s0), (t1, s1) in zip(zip(ordered, values), zip(ordered[1:], values[1:])):
        if not s1 < s0:
            raise DomainError(f"SNR not strictly decreasing between t={t0} ({s0}) and t={t1} ({s1})")


def ddim_step_coeffs(sched: NoiseSchedule, t: float, t_prev: float) -> tuple[float, float]:
    """(a, b) such that x_{t_prev} = a * x_t + b * eps_hat for a deterministic DDIM step."""
    if not t > t_prev:
        raise OrderingError(f"DDIM step needs t > t_prev, got t={t}, t_prev={t_prev}")
    alpha, sigma = eval_schedule(sched, t)
    alpha_prev, sigma_prev = eval_schedule(sched, t_prev)
    a = alpha_prev / alpha
    return a, sigma_prev - a * sigma


def forward_perturb(sched: NoiseSchedule, x0, t: float, noise) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if x0.shape != noise.shape:
        raise DimensionMismatchError(f"x0 shape {x0.shape} != noise shape {noise.shape}")
    alpha, sigma = eval_schedule(sched, t)
    return alpha * x0 + sigma * noise


def pf_ode_coeffs(sched: NoiseSchedule, t: float) -> tuple[float, float]:
    """(f_t, g_t^2) of dx = f_t x dt + g_t dW; the PF-ODE is dx/dt = f x - g^2 s / 2."""
    if sched.kind == VE:
        return 0.0, 1.0
    if sched.alpha_fn is None:
        bmin = sched.params.get("beta_min", 0.1)
        bmax = sched.params.get("beta_max", 20.0)
        beta = bmin + t * (bmax - bmin)
        return -0.5 * beta, beta
    # central differences for user-supplied pairs
    h = 1e-6 * max(1.0, t)
    lo = max(t - h, 0.0)
    hi = t + h
    a_lo, s_lo = eval_schedule(sched, lo)
    a_hi, s_hi = eval_schedule(sched, hi)
    alpha, sigma = eval_schedule(sched, t)
    f = (math.log(a_hi) - math.log(a_lo)) / (hi - lo)
    dsigma2 = (s_hi * s_hi - s_lo * s_lo) / (hi - lo)
    return f, dsigma2 - 2.0 * f * sigma * sigma


@dataclass(frozen=True)
class TimeGrid:
    """Decreasing times t_N = T > ... > t_1 = t_min > t_0 = 0.

    Every time except the trailing 0 is an evaluation point (sigma > 0), so
    `nfe` counts them and table rows are indexed by their position.
    """
    T: float
    steps: tuple[float, ...]

    def __post_init__(self):
        if len(self.steps) < 2:
            raise OrderingError("a time grid needs at least two times")
        if self.steps[0] != self.T:
            raise OrderingError(f"grid must start at T={self.T}, starts at {self.steps[0]}")
        for a, b in zip(self.steps, self.steps[1:]):
            if not a > b:
                raise OrderingError(f"grid not strictly decreasing at {a} -> {b}")
        if self.steps[-1] < 0:
            raise OrderingError("grid ends below t=0")

    @property
    def eval_times(self) -> tuple[float, ...]:
        return self.steps[:-1] if self.steps[-1] == 0 else self.steps

    @property
    def nfe(self) -> int:
        return len(self.eval_times)

    def pairs(self):
        """(t_index, t, t_prev) for every step of the reverse trajectory."""
        for i, (t, t_prev) in enumerate(zip(self.steps, self.steps[1:])):
            yield i, t, t_prev

    def nearest_index(self, t: float) -> int:
        times = np.asarray(self.eval_times)
        return int(np.argmin(np.abs(times - t)))

    def to_dict(self) -> dict:
        return {"T": self.T, "nfe": self.nfe, "times": list(self.steps)}

    @classmethod
    def from_dict(cls, data: dict) -> "TimeGrid":
        return cls(float(data["T"]), tuple(float(t) for t in data["times"]))


def _sigma_inverse(sched: NoiseSchedule, sigma: float, T: float) -> float:
    if sched.kind == VE:
        return sigma * sigma
    return optimize.brentq(lambda t: eval_schedule(sched, t)[1] - sigma, 0.0, T, xtol=1e-14)


def make_grid(T: float, nfe: int, t_min: float = T_MIN, spacing: str = "uniform",
              sched: NoiseSchedule | None = None, end_at_zero: bool = True) -> TimeGrid:
    """nfe evaluation times from T down to t_min, plus a final t=0.

    spacing="uniform" is uniform in t; spacing="sigma" is uniform in sigma_t.
    """
    if nfe < 1:
        raise DomainError(f"nfe must be >= 1, got {nfe}")
    if not 0 < t_min < T:
        raise DomainError(f"need 0 < t_min < T, got t_min={t_min}, T={T}")
    if nfe == 1:
        times = np.array([T])
    elif spacing == "uniform":
        times = np.linspace(T, t_min, nfe)
    elif spacing == "sigma":
        sched = sched or NoiseSchedule.ve()
        s_hi = eval_schedule(sched, T)[1]
        s_lo = eval_schedule(sched, t_min)[1]
        times = np.array([_sigma_inverse(sched, s, T) for s in np.linspace(s_hi, s_lo, nfe)])
        times[0], times[-1] = T, t_min
    else:
        raise DomainError(f"unknown grid spacing {spacing!r}")
    steps = [float(t) for t in times]
    if end_at_zero:
        steps.append(0.0)
    return TimeGrid(float(T), tuple(steps))
