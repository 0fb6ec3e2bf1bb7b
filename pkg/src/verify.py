"""The invariant suite run by `verify`.

Each check returns a CheckResult instead of raising, so one failure does not
hide the others. Sizes come from the `verify:` section of the config.
"""

import logging
import math
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from src import rng
from src.config import RunConfig
from src.errors import IncompleteTableError, LabError
from src.guidance import (
    LOOSE,
    STRICT,
    GuidanceCoefficients,
    GuidanceRule,
    clamp_coeffs,
    combine_cfg,
    combine_recfg,
)
from src.lookup_table import (
    PredictionCacheRecord,
    annihilation_residual,
    build_from_oracle,
    condition_spread,
    ingest_cache,
    load_table,
    ratio_convergence,
    save_table,
    table_summary,
    table_to_json,
)
from src.metrics import cond_eps_mean, eps_identity_residual, ks_critical, ks_distance, moments, theory_density
from src.samplers import ODE_RK4, SamplerConfig, ddim_affine_map, ddim_run, ode_run
from src.schedule import NoiseSchedule, TimeGrid, check_snr_monotone, make_grid
from src.shift_theory import (
    EVEN,
    ODD,
    cfg_toy_distribution,
    cfg_toy_flow,
    drift_propagate,
    phi_bounds_check,
    phi_closed,
    phi_finite,
    phi_limit,
    phi_recurrence_residual,
    recfg_toy_distribution,
)
from src.worlds import AnalyticWorld, ExactOracle, PerturbedOracle, bayes_uncond_score, uncond_score

logger = logging.getLogger(__name__)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    values: dict = field(default_factory=dict)
    seconds: float = 0.0

    def __post_init__(self):
        self.passed = bool(self.passed)

    def to_dict(self, timing: bool = False) -> dict:
        out = {"name": self.name, "passed": self.passed, "detail": self.detail, "values": self.values}
        if timing:
            out["seconds"] = round(self.seconds, 3)
        return out


def _toy() -> ExactOracle:
    return ExactOracle(AnalyticWorld.toy(), NoiseSchedule.ve())


def check_special_values(cfg: RunConfig) -> CheckResult:
    values = {"phi(1)": phi_limit(1.0), "phi(3)": phi_limit(3.0), "phi(5)": phi_limit(5.0)}
    errors = [abs(values["phi(1)"] - 1.0), abs(values["phi(3)"] - 2.0), abs(values["phi(5)"] - 7.0 / 3.0)]
    return CheckResult("special_values", max(errors) <= 1e-9,
                       f"max error {max(errors):.2e} (limit 1e-9)", values)


def check_recurrence(cfg: RunConfig) -> CheckResult:
    gammas = np.arange(1.0, 5.0 + 1e-9, 0.25)
    residuals = {f"{g:g}": phi_recurrence_residual(float(g)) for g in gammas}
    worst = max(abs(r) for r in residuals.values())
    return CheckResult("recurrence", worst <= 1e-8, f"max |residual| {worst:.2e} (limit 1e-8)", residuals)


def check_closed_forms(cfg: RunConfig) -> CheckResult:
    odd = {n: abs(phi_closed(ODD, n) - phi_limit(2.0 * n + 1.0)) for n in range(7)}
    even = abs(phi_closed(EVEN, 1) - phi_limit(2.0))
    far = abs(phi_closed(ODD, 50) - 2.0)
    passed = max(odd.values()) <= 1e-8 and even <= 1e-9 and far < 0.05
    return CheckResult("closed_forms", passed,
                       f"odd max error {max(odd.values()):.2e}, even(1) error {even:.2e}, |phi(101) - 2| = {far:.4f}",
                       {"phi(2)": phi_closed(EVEN, 1), "phi(101)": phi_closed(ODD, 50)})


def check_bounds(cfg: RunConfig) -> CheckResult:
    gammas = [round(1.0 + 0.1 * k, 10) for k in range(71)]
    failed = [g for g in gammas if not phi_bounds_check(g)]
    return CheckResult("bounds", not failed,
                       "all bounds hold on [1, 8]" if not failed else f"bounds fail at {failed}")


def check_guidance_equivalence(cfg: RunConfig) -> CheckResult:
    oracle = _toy()
    grid = make_grid(9.0, 64, spacing="sigma")
    sc = SamplerConfig(grid, 2000, seed=cfg.verify.seed)
    same = True
    for gamma in cfg.verify.gammas:
        a = ddim_run(oracle, GuidanceRule.cfg(gamma), sc, cond=1.0)
        b = ddim_run(oracle, GuidanceRule.recfg(gamma, gamma0=1.0 - gamma), sc, cond=1.0)
        same &= bool(np.array_equal(a.x0, b.x0))
    return CheckResult("guidance_equivalence", same, "cfg(g) and recfg(g, 1 - g) agree bit for bit"
                       if same else "cfg and forced recfg outputs differ")


def check_worker_determinism(cfg: RunConfig) -> CheckResult:
    oracle = _toy()
    grid = make_grid(9.0, 32, spacing="sigma")
    a = ddim_run(oracle, GuidanceRule.cfg(2.0), SamplerConfig(grid, 20_000, cfg.verify.seed, workers=1))
    b = ddim_run(oracle, GuidanceRule.cfg(2.0), SamplerConfig(grid, 20_000, cfg.verify.seed, workers=8))
    same = bool(np.array_equal(a.x0, b.x0) and np.array_equal(a.c, b.c))
    return CheckResult("sampler_worker_determinism", same, "1 vs 8 workers identical" if same else "outputs differ")


def check_affine_exactness(cfg: RunConfig) -> CheckResult:
    oracle = _toy()
    grid = make_grid(9.0, 64, spacing="sigma")
    rule = GuidanceRule.cfg(2.0)
    slope, intercept = ddim_affine_map(oracle, rule, grid, 1.0)
    x_init = np.linspace(-3.0, 5.0, 17)[:, None]
    batch = ddim_run(oracle, rule, SamplerConfig(grid, 17), cond=1.0, x_init=x_init)
    err = float(np.max(np.abs(batch.x0 - (slope * x_init + intercept))))
    return CheckResult("affine_exactness", err <= 1e-10, f"max deviation from composed map {err:.2e}",
                       {"slope": slope.tolist(), "intercept": intercept.tolist()})


def check_bayes_consistency(cfg: RunConfig) -> CheckResult:
    world = AnalyticWorld(3, [1.0, 0.5, 2.0], [0.2, -1.0, 0.0], [1.0, 3.0, 0.25])
    x = np.linspace(-4.0, 4.0, 30).reshape(10, 3)
    worst = 0.0
    for sched in (NoiseSchedule.ve(), NoiseSchedule.vp()):
        for t in (0.01, 0.5, 1.0):
            diff = bayes_uncond_score(world, sched, x, t) - uncond_score(world, sched, x, t)
            worst = max(worst, float(np.max(np.abs(diff))))
    return CheckResult("bayes_consistency", worst <= 1e-10, f"max score difference {worst:.2e}")


def check_ode(cfg: RunConfig) -> CheckResult:
    oracle = _toy()
    gamma, T, c = 2.0, 99.0, 1.0
    grid = make_grid(T, 8000, t_min=1e-8, spacing="sigma")
    sc = SamplerConfig(grid, 1, method=ODE_RK4)
    x = float(ode_run(oracle, GuidanceRule.cfg(gamma), sc, cond=c, x_init=c).x0[0, 0])
    exact = float(cfg_toy_flow(gamma, T, 0.0, c, c))
    closed_err = abs(x - exact)

    errs = []
    for n in (20, 40):
        g = make_grid(9.0, n, t_min=1e-8)
        y = float(ode_run(oracle, GuidanceRule.cfg(gamma), SamplerConfig(g, 1, method=ODE_RK4), cond=c,
                          x_init=c).x0[0, 0])
        errs.append(abs(y - float(cfg_toy_flow(gamma, 9.0, 0.0, c, c))))
    ratio = errs[0] / errs[1] if errs[1] > 0 else math.inf
    passed = bool(closed_err <= 1e-6 and 10.0 <= ratio <= 22.0)
    return CheckResult("ode_closed_form", passed,
                       f"terminal error {closed_err:.2e}; halving the step shrinks error {ratio:.1f}x",
                       {"terminal": x, "exact": exact, "order_ratio": ratio})


def check_ode_unguided(cfg: RunConfig) -> CheckResult:
    oracle = _toy()
    grid = make_grid(9.0, 256, spacing="sigma")
    x_init = np.linspace(-5.0, 7.0, 13)[:, None]
    rule = GuidanceRule.none()
    ddim = ddim_run(oracle, rule, SamplerConfig(grid, 13), cond=1.0, x_init=x_init).x0
    ode = ode_run(oracle, rule, SamplerConfig(grid, 13, method=ODE_RK4), cond=1.0, x_init=x_init).x0
    gap = float(np.max(np.abs(ddim - ode)))
    scale = float(np.max(np.abs(x_init - 1.0)))
    return CheckResult("ode_matches_unguided_ddim", gap <= 1e-2 * scale,
                       f"max |ode - ddim| {gap:.2e} against start spread {scale:g}", {"gap": gap})


def check_snr(cfg: RunConfig) -> CheckResult:
    grids = {"VE": (NoiseSchedule.ve(), make_grid(cfg.grid.T, 512, spacing="sigma")),
             "VP": (NoiseSchedule.vp(), make_grid(1.0, 512))}
    for sched, grid in grids.values():
        check_snr_monotone(sched, grid.steps)
    return CheckResult("snr_monotone", True, f"SNR strictly decreasing on {sorted(grids)} grids")


def check_clamp(cfg: RunConfig) -> CheckResult:
    gen = rng.stream(cfg.verify.seed, 40)
    gamma1 = gen.uniform(1.0, 5.0, 200)
    gamma0 = gen.uniform(-6.0, 2.0, 200)
    failures = []
    for mode, floor in ((STRICT, 1.0), (LOOSE, 0.0)):
        once = clamp_coeffs(GuidanceCoefficients(gamma1, gamma0, mode))
        twice = clamp_coeffs(once)
        if not np.array_equal(once.gamma0, twice.gamma0):
            failures.append(f"{mode} clamp is not idempotent")
        if np.any(once.gamma0 > 0) or np.any(once.gamma1 + once.gamma0 < floor - 1e-12):
            failures.append(f"{mode} clamp output leaves the feasible set")
    return CheckResult("clamp", not failures, "; ".join(failures) or "strict and loose clamps idempotent and feasible")


def check_combiner_linearity(cfg: RunConfig) -> CheckResult:
    gen = rng.stream(cfg.verify.seed, 41)
    e_c, e_u, f_c, f_u = gen.standard_normal((4, 50, 3))
    a, b = 1.7, -0.4
    coeffs = GuidanceCoefficients([2.0, 3.0, 1.5], [-0.5, -1.0, 0.0])
    worst = 0.0
    for combine in (lambda p, q: combine_recfg(p, q, coeffs), lambda p, q: combine_cfg(p, q, 2.5)):
        lhs = combine(a * e_c + b * f_c, a * e_u + b * f_u)
        rhs = a * combine(e_c, e_u) + b * combine(f_c, f_u)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return CheckResult("combiner_linearity", worst <= 1e-12, f"max deviation {worst:.2e}")


def check_cond_eps_mean(cfg: RunConfig) -> CheckResult:
    v = cfg.verify
    oracle = _toy()
    n = max(v.identity_n // 10, 2)
    failures, values = [], {}
    for t in v.identity_times:
        mean, se = cond_eps_mean(oracle, t, 1.0, n, v.seed)
        values[f"{t:g}"] = {"mean": float(mean[0]), "se": float(se[0])}
        if abs(mean[0]) > 3 * se[0]:
            failures.append(f"t={t}: mean {mean[0]:.2e} > 3 se {3 * se[0]:.2e}")
    return CheckResult("cond_eps_mean_zero", not failures, "; ".join(failures) or
                       "E[eps_cond] vanishes within 3 SE", values)


def check_condition_spread(cfg: RunConfig) -> CheckResult:
    perturbed = PerturbedOracle(_toy(), 0.1)
    conds = {"a": -1.0, "b": 0.5, "c": 2.0}
    table = build_from_oracle(perturbed, make_grid(9.0, 8), 5000, conds, cfg.verify.seed, antithetic=True)
    mean, std = condition_spread(table)
    summary = table_summary(table)
    failures = []
    if not np.allclose(mean, table.avg, rtol=0.0, atol=1e-12):
        failures.append("mean over conditions differs from the avg entry")
    if not np.all(std > 0):
        failures.append("perturbed ratios do not vary with the condition")
    return CheckResult("condition_spread", not failures, "; ".join(failures) or
                       f"std over conditions {summary['std_over_conditions']:.4f}",
                       {"std_over_conditions": summary["std_over_conditions"]})


def check_density_mass(cfg: RunConfig) -> CheckResult:
    masses = {}
    for gamma in cfg.verify.gammas:
        report = cfg_toy_distribution(gamma, cfg.verify.T)
        mean = report.mean_coeff
        xs = np.linspace(mean - 8.0 * report.std, mean + 8.0 * report.std, 801)
        masses[f"{gamma:g}"] = theory_density(report, 1.0, xs).mass()
    worst = max(abs(m - 1.0) for m in masses.values())
    return CheckResult("density_mass", worst <= 1e-3, f"max |mass - 1| {worst:.2e}", masses)


def _toy_setup(cfg: RunConfig):
    v = cfg.verify
    oracle = _toy()
    grid = make_grid(v.T, v.nfe, t_min=cfg.grid.t_min, spacing="sigma")
    return oracle, grid


def check_toy_sampling(cfg: RunConfig, cache: dict) -> CheckResult:
    v = cfg.verify
    c = cfg.simulate.condition
    oracle, grid = _toy_setup(cfg)
    table = build_from_oracle(oracle, grid, v.table_n, {"c": c}, v.seed, workers=cfg.workers, antithetic=True)
    failures, values = [], {}
    for gamma in v.gammas:
        sc = SamplerConfig(grid, v.batch, v.seed, workers=cfg.workers)
        cfg_batch = ddim_run(oracle, GuidanceRule.cfg(gamma), sc, cond=c)
        cache[gamma] = cfg_batch
        report = cfg_toy_distribution(gamma, v.T)
        mean, var, se = (float(m[0]) for m in moments(cfg_batch))
        mean_err = abs(mean - c * report.mean_coeff) / abs(c * report.mean_coeff)
        var_err = abs(var - report.variance) / report.variance
        ks = ks_distance(cfg_batch, (report, c))
        crit = ks_critical(v.batch)
        if mean_err > 0.01 or var_err > 0.02 or ks >= crit:
            failures.append(f"cfg gamma={gamma}: mean err {mean_err:.3%}, var err {var_err:.3%}, ks {ks:.4f}/{crit:.4f}")

        rule = GuidanceRule.recfg(gamma, table=table, clamp_mode=cfg.guidance.clamp_mode)
        re_batch = ddim_run(oracle, rule, sc, cond=c, cond_id="c")
        realized = float(np.mean([co.gamma0 for co in rule.schedule(grid, "c")]))
        re_report = recfg_toy_distribution(gamma, realized, v.T)
        r_mean, r_var, r_se = (float(m[0]) for m in moments(re_batch))
        r_var_err = abs(r_var - re_report.variance) / re_report.variance
        r_ks = ks_distance(re_batch, (re_report, c))
        if abs(r_mean - c) > 3 * r_se or r_var_err > 0.02 or r_ks >= crit:
            failures.append(f"recfg gamma={gamma}: mean {r_mean:.5f} (se {r_se:.1e}), "
                            f"var err {r_var_err:.3%}, ks {r_ks:.4f}/{crit:.4f}")
        values[f"{gamma:g}"] = {"cfg_mean": mean, "cfg_var": var, "phi": report.mean_coeff,
                                "cfg_theory_var": report.variance, "recfg_mean": r_mean,
                                "recfg_var": r_var, "recfg_gamma0": realized,
                                "recfg_theory_var": re_report.variance}
    return CheckResult("toy_sampling", not failures, "; ".join(failures) or
                       f"cfg and recfg match theory for gamma in {v.gammas}", values)


def check_drift(cfg: RunConfig, cache: dict) -> CheckResult:
    v = cfg.verify
    c = cfg.simulate.condition
    oracle, grid = _toy_setup(cfg)
    failures, values = [], {}
    for gamma in v.gammas:
        batch = cache.get(gamma) or ddim_run(oracle, GuidanceRule.cfg(gamma),
                                             SamplerConfig(grid, v.batch, v.seed, workers=cfg.workers), cond=c)
        states = drift_propagate(oracle, GuidanceRule.cfg(gamma), grid, c, form=cfg.simulate.drift_form)
        predicted = float(states[-1].delta[0])
        mean, _, se = (float(m[0]) for m in moments(batch))
        observed = c - mean
        if abs(predicted - observed) > 3 * se:
            failures.append(f"gamma={gamma}: predicted {predicted:.5f}, observed {observed:.5f} (se {se:.1e})")
        values[f"{gamma:g}"] = {"predicted": predicted, "observed": observed, "se": se}
    return CheckResult("drift_consistency", not failures, "; ".join(failures) or
                       "predicted drift matches sampler gap within 3 SE", values)


def check_eps_identity(cfg: RunConfig) -> CheckResult:
    v = cfg.verify
    exact = _toy()
    oracles = {"exact": exact, "perturbed": PerturbedOracle(exact, 0.1)}
    failures, values = [], {}
    for label, oracle in oracles.items():
        for t in v.identity_times:
            res, se = eps_identity_residual(oracle, t, v.identity_n, v.seed)
            values[f"{label}@{t:g}"] = {"residual": float(res[0]), "se": float(se[0])}
            if abs(res[0]) > 3 * se[0]:
                failures.append(f"{label} t={t}: residual {res[0]:.2e} > 3 se {3 * se[0]:.2e}")
    return CheckResult("eps_identity", not failures, "; ".join(failures) or "identity holds within 3 SE", values)


def check_table(cfg: RunConfig) -> CheckResult:
    v = cfg.verify
    exact = _toy()
    failures, values = [], {}

    grid = make_grid(v.T, 4)
    points, slope = ratio_convergence(exact, grid, 1.0, [int(n) for n in v.convergence_ns], v.seed, cfg.workers)
    values["convergence"] = {"points": points, "slope": slope}
    if not -0.65 <= slope <= -0.35:
        failures.append(f"exact-oracle ratio slope {slope:.3f} outside -0.5 +/- 0.15")

    perturbed = PerturbedOracle(exact, 0.1)
    one_step = TimeGrid(1.0, (1.0, 0.0))
    table = build_from_oracle(perturbed, one_step, v.table_n, {"c": 1.0}, v.seed)
    ratio, se = float(table.conditions["c"][0, 0]), float(table.stderr["c"][0, 0])
    values["perturbed_ratio"] = {"ratio": ratio, "se": se}
    if abs(ratio - 0.3) > 3 * se:
        failures.append(f"perturbed ratio {ratio:.5f} not within 3 SE ({se:.1e}) of 0.3")

    small = make_grid(9.0, 8)
    conds = {"a": -1.0, "b": 0.5, "c": 2.0}
    one = build_from_oracle(perturbed, small, 20_000, conds, v.seed, workers=1)
    eight = build_from_oracle(perturbed, small, 20_000, conds, v.seed, workers=8)
    if table_to_json(one) != table_to_json(eight):
        failures.append("table builds differ between 1 and 8 workers")

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "table.json"
        save_table(one, path)
        if load_table(path) != one:
            failures.append("table does not round-trip through save/load")

    means, ses = annihilation_residual(perturbed, one, 2.0, 0.5, "b", 20_000, v.seed + 1)
    if np.any(np.abs(means) > 5 * ses + 1e-12):
        failures.append("table gamma0 does not annihilate the residual expectation")

    try:
        ingest_cache([PredictionCacheRecord("c", 0, 0, 0.1, 0.3, 10)], TimeGrid(1.0, (1.0, 0.5, 0.0)), 1)
        failures.append("incomplete cache was accepted")
    except IncompleteTableError as e:
        values["incomplete_cache_gaps"] = e.gaps

    return CheckResult("lookup_table", not failures, "; ".join(failures) or
                       f"slope {slope:.3f}, perturbed ratio {ratio:.4f}, deterministic and round-trips", values)


def check_phi_finite_matches_limit(cfg: RunConfig) -> CheckResult:
    # phi(g, T) - phi(g) = 2^((1 - g) / 2) (1 - g) (T + 1)^(-1/2) + O(1 / T)
    T = 1e6
    errs = {}
    for g in (1.0, 2.0, 3.0):
        lead = 2.0 ** (0.5 * (1.0 - g)) * (1.0 - g) * (T + 1.0) ** -0.5
        errs[f"{g:g}"] = abs(phi_finite(g, T) - phi_limit(g) - lead)
    ok = all(e <= 1e-6 for e in errs.values())
    return CheckResult("phi_finite_large_T", ok, f"|phi(g, 1e6) - phi(g) - leading gap| = {errs}", errs)


PURE_CHECKS = [
    check_special_values,
    check_recurrence,
    check_closed_forms,
    check_bounds,
    check_phi_finite_matches_limit,
    check_snr,
    check_clamp,
    check_combiner_linearity,
    check_bayes_consistency,
    check_cond_eps_mean,
    check_guidance_equivalence,
    check_worker_determinism,
    check_affine_exactness,
    check_ode,
    check_ode_unguided,
    check_density_mass,
    check_eps_identity,
    check_table,
    check_condition_spread,
]
SAMPLING_CHECKS = [check_toy_sampling, check_drift]


def _timed(fn, *args) -> CheckResult:
    start = time.perf_counter()
    try:
        result = fn(*args)
    except LabError as e:
        result = CheckResult(fn.__name__.removeprefix("check_"), False, f"{type(e).__name__}: {e}")
    result.seconds = time.perf_counter() - start
    logger.info("%s: %s in %.1fs", result.name, "pass" if result.passed else "FAIL", result.seconds)
    return result


def run_suite(cfg: RunConfig, progress=None) -> list[CheckResult]:
    """Run every check in a fixed order; `progress` is called with each result."""
    results = []
    cache: dict = {}
    for fn in PURE_CHECKS:
        results.append(_timed(fn, cfg))
        if progress:
            progress(results[-1])
    for fn in SAMPLING_CHECKS:
        results.append(_timed(fn, cfg, cache))
        if progress:
            progress(results[-1])
    return results
