"""Sample statistics, theoretical densities and the CSV bundles behind the density plots."""

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from src import rng
from src.errors import DomainError
from src.schedule import eval_schedule
from src.shift_theory import ShiftReport
from src.worlds import ScoreOracle, sample_conditional, sample_data


MASS_TOL = 1e-3


@dataclass
class DensityCurve:
    """A pdf sampled on xs.

    `covered` is the probability inside [min(xs), max(xs)]; when given, the
    trapezoid mass must match it within MASS_TOL.
    """
    xs: np.ndarray
    pdf: np.ndarray
    label: str
    covered: float | None = None

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=float)
        self.pdf = np.asarray(self.pdf, dtype=float)
        if np.any(self.pdf < 0):
            raise DomainError(f"density {self.label!r} has negative values")
        if self.covered is not None and abs(self.mass() - self.covered) > MASS_TOL:
            raise DomainError(f"density {self.label!r} integrates to {self.mass():.6f} on its grid, "
                              f"expected {self.covered:.6f}; the grid is too coarse")

    def mass(self) -> float:
        return float(np.trapezoid(self.pdf, self.xs))

    def rows(self) -> list[tuple[float, float, str]]:
        return [(float(x), float(p), self.label) for x, p in zip(self.xs, self.pdf)]


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    label: str = ""

    def rows(self) -> list[tuple[float, float, int]]:
        return [(float(lo), float(hi), int(n)) for lo, hi, n in zip(self.edges[:-1], self.edges[1:], self.counts)]


def _samples(batch) -> np.ndarray:
    x = np.asarray(getattr(batch, "x0", batch), dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return x


def moments(batch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(mean, unbiased variance, standard error of the mean) per dimension."""
    x = _samples(batch)
    n = x.shape[0]
    if n < 2:
        raise DomainError(f"moments need at least 2 samples, got {n}")
    var = x.var(axis=0, ddof=1)
    return x.mean(axis=0), var, np.sqrt(var / n)


def _normal_curve(xs, mean: float, std: float, label: str) -> DensityCurve:
    xs = np.asarray(xs, dtype=float)
    dist = stats.norm(loc=mean, scale=std)
    covered = float(dist.cdf(xs.max()) - dist.cdf(xs.min()))
    return DensityCurve(xs, dist.pdf(xs), label, covered)


def theory_density(report: ShiftReport, c: float, xs, label: str | None = None) -> DensityCurve:
    """Gaussian pdf of N(c * mean_coeff, variance) over xs."""
    if label is None:
        label = f"theory(gamma1={report.gamma1:g}, gamma0={report.gamma0:g})"
    return _normal_curve(xs, c * report.mean_coeff, report.std, label)


def ground_truth_density(c: float, xs, var: float = 1.0) -> DensityCurve:
    return _normal_curve(xs, c, math.sqrt(var), "ground_truth")


def ks_distance(batch, reference) -> float:
    """Sup distance between the empirical CDF of a 1-D batch and a Gaussian reference.

    reference is a (mean, std) pair, a (ShiftReport, c) pair, or another batch.
    """
    x = _samples(batch)[:, 0]
    if x.size < 10:
        raise DomainError(f"KS distance needs at least 10 samples, got {x.size}")
    if isinstance(reference, tuple) and isinstance(reference[0], ShiftReport):
        report, c = reference
        mean, std = c * report.mean_coeff, report.std
    elif isinstance(reference, tuple):
        mean, std = reference
    else:
        return float(stats.ks_2samp(x, _samples(reference)[:, 0]).statistic)
    return float(stats.kstest(x, stats.norm(loc=mean, scale=std).cdf).statistic)


def ks_critical(n: int, level: float = 0.01) -> float:
    """Asymptotic one-sample KS critical value (1.63 / sqrt(n) at the 1% level)."""
    return float(stats.kstwobign.isf(level) / math.sqrt(n))


def eps_identity_residual(oracle: ScoreOracle, t: float, mc_samples: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """E[eps_uncond(x_t)] - (E[x_t] / sigma - alpha E[x_0] / sigma) with its standard error.

    Evaluated on joint draws (c, x_0, x_t) of the world; the per-sample
    difference is averaged so both sides share the same noise.
    """
    alpha, sigma = eval_schedule(oracle.sched, t)
    if sigma <= 0:
        raise DomainError(f"need sigma_t > 0, got sigma={sigma} at t={t}")
    x0, _ = sample_data(oracle.world, mc_samples, seed)
    noise = rng.standard_normal(seed, mc_samples, oracle.world.dim, 30)
    x_t = alpha * x0 + sigma * noise
    diff = oracle.eps_uncond(x_t, t) - (x_t - alpha * x0) / sigma
    return diff.mean(axis=0), diff.std(axis=0, ddof=1) / math.sqrt(mc_samples)


def cond_eps_mean(oracle: ScoreOracle, t: float, cond, mc_samples: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """E[eps_cond(x_t, c)] over x_t ~ q_t(x|c), with its standard error; zero for an exact oracle."""
    alpha, sigma = eval_schedule(oracle.sched, t)
    if sigma <= 0:
        raise DomainError(f"need sigma_t > 0, got sigma={sigma} at t={t}")
    x0 = sample_conditional(oracle.world, cond, mc_samples, seed, 31)
    noise = rng.standard_normal(seed, mc_samples, oracle.world.dim, 32)
    c = np.broadcast_to(np.asarray(cond, dtype=float), x0.shape)
    e_c = oracle.eps_cond(alpha * x0 + sigma * noise, c, t)
    return e_c.mean(axis=0), e_c.std(axis=0, ddof=1) / math.sqrt(mc_samples)


def histogram(batch, bins="fd", label: str = "", dim: int = 0) -> Histogram:
    """Histogram of one coordinate; Freedman-Diaconis bins unless overridden."""
    x = _samples(batch)[:, dim]
    counts, edges = np.histogram(x, bins=bins)
    return Histogram(edges, counts, label)


def write_density_csv(curves: list[DensityCurve], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["x", "pdf", "label"])
        for curve in curves:
            for x, p, label in curve.rows():
                writer.writerow([f"{x:.17g}", f"{p:.17g}", label])


def write_histogram_csv(hist: Histogram, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["bin_left", "bin_right", "count"])
        for lo, hi, n in hist.rows():
            writer.writerow([f"{lo:.17g}", f"{hi:.17g}", n])


def write_ks_csv(rows: list[dict], path: str | Path) -> None:
    columns = ["label", "n", "ks", "critical", "passed"]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row["label"], row["n"], f"{row['ks']:.17g}", f"{row['critical']:.17g}",
                             str(row["passed"]).lower()])


def density_bundle(gamma: float, c: float, cfg_report: ShiftReport, recfg_report: ShiftReport,
                   cfg_batch, recfg_batch, out_dir: str | Path, points: int = 801) -> dict:
    """Write density/histogram/KS CSVs comparing ground truth, CFG and ReCFG for one gamma.

    Returns the KS summary rows.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lo = min(c - 5.0, c * cfg_report.mean_coeff - 5.0 * cfg_report.std)
    hi = max(c + 5.0, c * cfg_report.mean_coeff + 5.0 * cfg_report.std)
    # step at most 1.5 std of the narrowest curve
    narrowest = min(1.0, cfg_report.std, recfg_report.std)
    points = max(points, math.ceil((hi - lo) / (1.5 * narrowest)) + 1)
    xs = np.linspace(lo, hi, points)
    curves = [
        ground_truth_density(c, xs),
        theory_density(cfg_report, c, xs, "cfg_theory"),
        theory_density(recfg_report, c, xs, "recfg_theory"),
    ]
    tag = f"gamma_{gamma:g}"
    write_density_csv(curves, out_dir / f"{tag}_density.csv")
    write_histogram_csv(histogram(cfg_batch, label="cfg"), out_dir / f"{tag}_cfg_hist.csv")
    write_histogram_csv(histogram(recfg_batch, label="recfg"), out_dir / f"{tag}_recfg_hist.csv")
    rows = []
    for label, batch, report in (("cfg", cfg_batch, cfg_report), ("recfg", recfg_batch, recfg_report)):
        n = _samples(batch).shape[0]
        ks = ks_distance(batch, (report, c))
        crit = ks_critical(n)
        rows.append({"label": label, "n": n, "ks": ks, "critical": crit, "passed": ks < crit})
    write_ks_csv(rows, out_dir / f"{tag}_ks.csv")
    return {"gamma": gamma, "ks": rows}
