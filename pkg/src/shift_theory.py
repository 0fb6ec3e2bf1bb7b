"""Expectation shift of guided sampling on the one-dimensional toy, in closed form.

Under VE with x_0|c ~ N(c, 1) and c ~ N(0, 1), the PF-ODE driven by
gamma1 * eps_cond + gamma0 * eps_uncond is linear in x, so the sampled
x_0 is Gaussian with mean coeff * c and a variance that depends only on
(gamma1, gamma0, T). CFG is the slice gamma0 = 1 - gamma1, where the mean
coefficient is phi(gamma, T).

Integrals over s in [0, T] are taken in v = (s + 1)^(-1/2), which maps the
infinite horizon onto [0, 1].
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import integrate, special

from src.errors import DomainError, NumericFailureError, QuadratureError
from src import rng
from src.guidance import GuidanceRule, combine_recfg, residual_eps
from src.schedule import TimeGrid, ddim_step_coeffs, eval_schedule
from src.worlds import ScoreOracle, forward_marginal, sample_conditional

logger = logging.getLogger(__name__)

QUADRATURE = "quadrature"
CLOSED_FORM = "closed_form"
RECURRENCE = "recurrence"

ODD = "odd"
EVEN = "even"

TRACKED = "tracked"
STATED = "stated"
DRIFT_FORMS = (TRACKED, STATED)

QUAD_TOL = 1e-10
QUAD_LIMIT = 10_000
BOUND_TOL = 1e-9
# Even closed form switches to log-space double factorials above this n.
LOG_SPACE_N = 20

REPORT_COLUMNS = ["gamma1", "gamma0", "T", "mean_coeff", "variance", "source"]


@dataclass
class ShiftReport:
    gamma1: float
    gamma0: float
    T: float
    mean_coeff: float
    variance: float
    source: str = QUADRATURE

    def __post_init__(self):
        if not self.variance > 0:
            raise DomainError(f"shift report variance must be positive, got {self.variance}")

    @property
    def std(self) -> float:
        return math.sqrt(self.variance)

    def to_dict(self) -> dict:
        return {
            "gamma1": self.gamma1,
            "gamma0": self.gamma0,
            "T": self.T,
            "mean_coeff": self.mean_coeff,
            "variance": self.variance,
            "source": self.source,
        }


@dataclass
class DriftState:
    t_index: int
    t: float
    delta: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"t_index": self.t_index, "t": self.t, "delta": np.asarray(self.delta).tolist()}


def _quad(integrand, lo: float, hi: float, what: str) -> float:
    if hi <= lo:
        return 0.0
    out = integrate.quad(integrand, lo, hi, epsabs=QUAD_TOL * 1e-2, epsrel=1e-13,
                         limit=QUAD_LIMIT, full_output=1)
    value, abserr = out[0], out[1]
    if abserr > QUAD_TOL or not math.isfinite(value):
        raise QuadratureError(f"{what}: integral over [{lo}, {hi}] did not reach {QUAD_TOL:g}", abserr)
    if len(out) > 3:
        logger.debug("%s: quad reported %r with error estimate %.3e", what, out[3], abserr)
    return value


def _flow_integral(gamma1: float, gamma0: float, v_lo: float, v_hi: float) -> float:
    """2^(gamma0 / 2) int 2 v^(gamma1 + gamma0 - 1) (1 + v^2)^(-gamma0 / 2) dv over [v_lo, v_hi].

    The quadrature runs on the scaled integrand, which stays O(1) for large -gamma0.
    """
    power = gamma1 + gamma0 - 1.0

    def integrand(v):
        return 2.0 * v ** power * (0.5 * (1.0 + v * v)) ** (-0.5 * gamma0)

    return _quad(integrand, v_lo, v_hi, f"flow integral (gamma1={gamma1}, gamma0={gamma0})")


def mean_coeff(gamma1: float, gamma0: float, T: float) -> float:
    """Factor multiplying c in E[x_0] when x_T ~ N(c, T + 1); T may be math.inf."""
    if T <= 0:
        raise DomainError(f"need T > 0, got {T}")
    if math.isinf(T):
        if gamma1 + gamma0 <= 0:
            raise DomainError(f"the T -> inf limit needs gamma1 + gamma0 > 0, got {gamma1 + gamma0}")
        return 0.5 * gamma1 * _flow_integral(gamma1, gamma0, 0.0, 1.0)
    head = (T + 1.0) ** (-0.5 * gamma1) * (0.5 * (T + 2.0)) ** (-0.5 * gamma0)
    tail = 0.5 * gamma1 * _flow_integral(gamma1, gamma0, (T + 1.0) ** -0.5, 1.0)
    return head + tail


def _check_gamma(gamma: float) -> None:
    if not gamma >= 1:
        raise DomainError(f"phi is defined for gamma >= 1, got {gamma}")


def phi_finite(gamma: float, T: float) -> float:
    _check_gamma(gamma)
    if not 0 < T < math.inf:
        raise DomainError(f"phi_finite needs finite T > 0, got {T}")
    return mean_coeff(gamma, 1.0 - gamma, T)


def phi_limit(gamma: float) -> float:
    _check_gamma(gamma)
    return mean_coeff(gamma, 1.0 - gamma, math.inf)


def _psi(gamma: float, T: float) -> float:
    return (T + 1.0) / ((T + 1.0) ** gamma * (T + 2.0) ** (1.0 - gamma))


def _phi_odd(n: int) -> float:
    total = sum(Fraction(math.comb(n, k) * (2 * n + 1), 2 * n - 2 * k + 1) for k in range(n + 1))
    return float(total / 2 ** n)


def _log_df_ratio(m) -> np.ndarray:
    """log((2m - 1)!! / (2m)!!)."""
    m = np.asarray(m, dtype=float)
    return special.gammaln(m + 0.5) - special.gammaln(m + 1.0) - 0.5 * math.log(math.pi)


def _phi_even(n: int) -> float:
    asinh1 = math.asinh(1.0)
    if n <= LOG_SPACE_N:
        ratio_n = Fraction(math.prod(range(1, 2 * n, 2)), math.prod(range(2, 2 * n + 1, 2)))
        inner = asinh1
        for k in range(1, n + 1):
            ratio_k = Fraction(math.prod(range(1, 2 * k, 2)), math.prod(range(2, 2 * k + 1, 2)))
            inner += 2.0 ** (k - 0.5) / (2 * k) / float(ratio_k)
        return 2.0 ** (0.5 - n) * 2 * n * float(ratio_n) * inner
    k = np.arange(1, n + 1, dtype=float)
    lead = (0.5 - n) * math.log(2.0) + math.log(2.0 * n) + float(_log_df_ratio(n))
    logs = lead - _log_df_ratio(k) + (k - 0.5) * math.log(2.0) - np.log(2.0 * k)
    return float(np.exp(logs).sum() + math.exp(lead) * asinh1)


def phi_closed(parity: str, n: int) -> float:
    """phi(2n + 1) (odd) or phi(2n) (even) from finite sums."""
    if not isinstance(n, (int, np.integer)):
        raise DomainError(f"closed form needs an integer n, got {n!r}")
    if parity == ODD:
        if n < 0:
            raise DomainError(f"odd closed form needs n >= 0, got {n}")
        return _phi_odd(int(n))
    if parity == EVEN:
        if n < 1:
            raise DomainError(f"even closed form needs n >= 1, got {n}")
        return _phi_even(int(n))
    raise DomainError(f"parity must be {ODD!r} or {EVEN!r}, got {parity!r}")


def phi_by_recurrence(gamma: float) -> float:
    """phi(gamma) from phi(gamma - 2k) in [1, 3) via phi(g + 2) = 1 + (g + 1) / (2g) phi(g)."""
    _check_gamma(gamma)
    base = gamma
    while base >= 3.0:
        base -= 2.0
    value = phi_limit(base)
    g = base
    while g + 2.0 <= gamma + 1e-12:
        value = 1.0 + (g + 1.0) / (2.0 * g) * value
        g += 2.0
    return value


def phi_recurrence_residual(gamma: float) -> float:
    _check_gamma(gamma)
    return phi_limit(gamma + 2.0) - 1.0 - (gamma + 1.0) / (2.0 * gamma) * phi_limit(gamma)


def h1(gamma: float) -> float:
    """Lower bound of phi on [1, 3]; h1(1) = 20/21, h1(3) = 2."""
    return gamma * 7.0 / 15.0 * (10.0 / 7.0) ** ((5.0 - gamma) / 2.0)


def h2(gamma: float) -> float:
    """Lower bound of phi on [3, 5]."""
    return gamma * (2.0 / 3.0) ** ((gamma - 1.0) / 2.0)


def phi_bounds_check(gamma: float) -> bool:
    if gamma < 1:
        return False
    value = phi_limit(gamma)
    ok = True
    if gamma <= 3:
        ok &= value >= h1(gamma) - BOUND_TOL
    if 3 <= gamma <= 5:
        ok &= value >= h2(gamma) - BOUND_TOL
    if gamma > 3:
        ok &= value >= 2.0 - BOUND_TOL
    return bool(ok)


def cfg_toy_distribution(gamma: float, T: float, method: str = QUADRATURE) -> ShiftReport:
    """Law of the CFG-guided toy sample, N(c * phi(gamma, T), 2^(1-gamma) psi(gamma, T)).

    method closed_form / recurrence only apply to T = inf; closed_form also
    needs an integer gamma.
    """
    _check_gamma(gamma)
    if T <= 0:
        raise DomainError(f"need T > 0, got {T}")
    if method != QUADRATURE and not math.isinf(T):
        raise DomainError(f"method {method!r} is only available for T = inf")
    if method == QUADRATURE:
        coeff = phi_limit(gamma) if math.isinf(T) else phi_finite(gamma, T)
    elif method == CLOSED_FORM:
        if gamma != int(gamma):
            raise DomainError(f"closed form needs an integer gamma, got {gamma}")
        g = int(gamma)
        coeff = phi_closed(ODD, (g - 1) // 2) if g % 2 else phi_closed(EVEN, g // 2)
    elif method == RECURRENCE:
        coeff = phi_by_recurrence(gamma)
    else:
        raise DomainError(f"unknown method {method!r}")
    variance = 2.0 ** (1.0 - gamma) * (1.0 if math.isinf(T) else _psi(gamma, T))
    return ShiftReport(gamma, 1.0 - gamma, T, coeff, variance, method)


def recfg_variance(gamma1: float, gamma0: float, T: float) -> float:
    """2^gamma0 (T + 1)^(1 - gamma1) (T + 2)^(-gamma0)."""
    if T <= 0:
        raise DomainError(f"need T > 0, got {T}")
    if math.isinf(T):
        total = gamma1 + gamma0
        if total == 1:
            return 2.0 ** gamma0
        return 0.0 if total > 1 else math.inf
    return 2.0 ** gamma0 * (T + 1.0) ** (1.0 - gamma1) * (T + 2.0) ** (-gamma0)


def recfg_toy_distribution(gamma1: float, gamma0: float, T: float) -> ShiftReport:
    """Law of the toy sample under fixed (gamma1, gamma0); gamma0 = 1 - gamma1 gives the CFG law."""
    variance = recfg_variance(gamma1, gamma0, T)
    if not 0 < variance < math.inf:
        raise DomainError(f"degenerate limit law for gamma1={gamma1}, gamma0={gamma0}, T={T}")
    return ShiftReport(gamma1, gamma0, T, mean_coeff(gamma1, gamma0, T), variance, QUADRATURE)


def recfg_toy_flow(gamma1: float, gamma0: float, T: float, t: float, x_T, c) -> np.ndarray:
    """Exact PF-ODE state at time t in [0, T] started from x_T at T."""
    if not 0 <= t <= T < math.inf:
        raise DomainError(f"need 0 <= t <= T < inf, got t={t}, T={T}")

    def p(s):
        return (1.0 + s) ** (0.5 * gamma1) * (0.5 * (2.0 + s)) ** (0.5 * gamma0)

    integral = _flow_integral(gamma1, gamma0, (T + 1.0) ** -0.5, (t + 1.0) ** -0.5)
    x_T = np.asarray(x_T, dtype=float)
    c = np.asarray(c, dtype=float)
    return p(t) * (x_T / p(T) + 0.5 * gamma1 * c * integral)


def cfg_toy_flow(gamma: float, T: float, t: float, x_T, c) -> np.ndarray:
    return recfg_toy_flow(gamma, 1.0 - gamma, T, t, x_T, c)


def _guided_mean_eps(oracle: ScoreOracle, rule: GuidanceRule, grid: TimeGrid, t_index: int,
                     t: float, cond: np.ndarray, cond_id, shift: np.ndarray, mc_samples: int,
                     seed: int, combine=combine_recfg) -> np.ndarray:
    """E[combine(eps_cond, eps_uncond)] for x ~ q_t(x|c) shifted by -shift."""
    coeffs = rule.coeffs_at(grid, t_index, t, cond_id)
    mean, _ = forward_marginal(oracle.world, oracle.sched, cond, t)
    if oracle.affine:
        x = (mean - shift)[None, :]
    else:
        alpha, sigma = eval_schedule(oracle.sched, t)
        x0 = sample_conditional(oracle.world, cond, mc_samples, seed, 11)
        noise = rng.standard_normal(seed, mc_samples, oracle.world.dim, 12, t_index)
        x = alpha * x0 + sigma * noise - shift
    e_c, e_u = oracle.eps_pair(x, cond, t)
    return combine(e_c, e_u, coeffs).mean(axis=0)


def drift_propagate(oracle: ScoreOracle, rule: GuidanceRule, grid: TimeGrid, cond,
                    mc_samples: int = 100_000, seed: int = 0, form: str = TRACKED,
                    cond_id: str | None = None) -> list[DriftState]:
    """Predicted gap Delta_t = E_q[x_t] - E[x~_t] between forward and guided means.

    tracked: Delta' = mu' - a (mu - Delta) - b E[eps_hat(x~_t)], with x~_t
    taken as the forward marginal moved by -Delta_t; exact for affine oracles.
    stated: Delta' = (sigma'/sigma) Delta - b E_q[(gamma1 - 1) eps_cond + gamma0 eps_uncond]
    under the unshifted forward marginal.
    """
    if form not in DRIFT_FORMS:
        raise DomainError(f"unknown drift form {form!r}, expected one of {DRIFT_FORMS}")
    if not oracle.affine and mc_samples < 2:
        raise DomainError(f"mc_samples must be >= 2, got {mc_samples}")
    dim = oracle.world.dim
    cond = np.broadcast_to(np.asarray(cond, dtype=float), (dim,)).copy()
    delta = np.zeros(dim)
    states = [DriftState(0, grid.steps[0], delta.copy())]
    for t_index, t, t_prev in grid.pairs():
        a, b = ddim_step_coeffs(oracle.sched, t, t_prev)
        if form == TRACKED:
            mu, _ = forward_marginal(oracle.world, oracle.sched, cond, t)
            mu_prev, _ = forward_marginal(oracle.world, oracle.sched, cond, t_prev)
            eps = _guided_mean_eps(oracle, rule, grid, t_index, t, cond, cond_id, delta, mc_samples, seed)
            delta = mu_prev - a * (mu - delta) - b * eps
        else:
            sigma = eval_schedule(oracle.sched, t)[1]
            sigma_prev = eval_schedule(oracle.sched, t_prev)[1]
            eps = _guided_mean_eps(oracle, rule, grid, t_index, t, cond, cond_id,
                                   np.zeros(dim), mc_samples, seed, combine=residual_eps)
            delta = sigma_prev / sigma * delta - b * eps
        if not np.all(np.isfinite(delta)):
            raise NumericFailureError("drift recursion produced a non-finite value", t_index, t)
        states.append(DriftState(t_index + 1, t_prev, delta.copy()))
    return states


def shift_sweep(gammas, T: float, method: str = QUADRATURE, recfg_gamma0s=None) -> list[ShiftReport]:
    """CFG reports for each gamma, plus ReCFG reports for every (gamma, gamma0) pair when given."""
    reports = [cfg_toy_distribution(float(g), T, method) for g in gammas]
    for g in gammas:
        for g0 in recfg_gamma0s or ():
            reports.append(recfg_toy_distribution(float(g), float(g0), T))
    return reports


def write_reports_csv(reports: list[ShiftReport], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in reports:
            writer.writerow([f"{r.gamma1:.17g}", f"{r.gamma0:.17g}", f"{r.T:.17g}",
                             f"{r.mean_coeff:.17g}", f"{r.variance:.17g}", r.source])
