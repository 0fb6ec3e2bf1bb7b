#!/usr/bin/env python3
"""Guidance Shift Lab command line.

Commands: shift-analyze, build-table, sample, simulate, verify, plot-data.
Outputs go to <output root>/<command>/.

Usage:
    python -m src.pipeline shift-analyze
    python -m src.pipeline build-table --set table.n_per_condition=200000
    python -m src.pipeline sample --set guidance.mode=cfg --set guidance.gamma1=2.5
    python -m src.pipeline simulate --workers 4
    python -m src.pipeline verify
    python -m src.pipeline plot-data
"""

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from src.config import DEFAULT_OUTPUT, OUTPUT_ENV, RunConfig, resolve_config
from src.errors import (
    ConfigError,
    IncompleteTableError,
    InvariantFailure,
    LabError,
    NumericFailureError,
    QuadratureError,
)

COMMANDS = ("shift-analyze", "simulate", "build-table", "sample", "verify", "plot-data")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERIC = 2
EXIT_INVARIANT = 3


def _write_json(path: Path, data) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def _banner(title: str) -> None:
    print(f"\n{'='*60}")
    print(f"  Guidance Shift Lab: {title}")
    print(f"{'='*60}\n")


def run_shift_analyze(cfg: RunConfig, out_dir: Path) -> int:
    from src.formatter import generate_shift_markdown
    from src.shift_theory import shift_sweep, write_reports_csv

    s = cfg.shift
    print(f"STEP 1: Evaluating shift functions for {len(s.gammas)} gamma value(s) at T={s.T:g}...")
    reports = shift_sweep(s.gammas, s.T, recfg_gamma0s=s.recfg_gamma0s)
    if s.limit:
        print("STEP 2: Evaluating the T -> inf limit...")
        reports += shift_sweep(s.gammas, math.inf, method=s.method)
    for r in reports:
        print(f"   gamma1={r.gamma1:<5g} gamma0={r.gamma0:<6g} T={r.T:<5g} "
              f"mean_coeff={r.mean_coeff:.6f} variance={r.variance:.6g}")

    csv_path = out_dir / "shift_reports.csv"
    write_reports_csv(reports, csv_path)
    (out_dir / "shift_reports.md").write_text(generate_shift_markdown([r.to_dict() for r in reports]),
                                              encoding="utf-8")
    print(f"\n💾 Saved {len(reports)} reports to {csv_path}")
    return EXIT_OK


def _build_table(cfg: RunConfig, oracle, grid):
    """Fresh table from the prediction cache when one is configured, otherwise from the oracle."""
    from src.lookup_table import build_from_oracle, ingest_cache, read_cache_csv

    t = cfg.table
    if t.cache:
        print(f"📂 Ingesting prediction cache {t.cache}")
        return ingest_cache(read_cache_csv(t.cache), grid, oracle.world.dim)
    print(f"🧮 Traversing {len(t.conditions)} condition(s) x {t.n_per_condition} draws "
          f"over {grid.nfe} steps...")
    return build_from_oracle(oracle, grid, t.n_per_condition, t.conditions, t.seed,
                             workers=cfg.workers, antithetic=t.antithetic)


def _load_or_build_table(cfg: RunConfig, oracle, grid):
    from src.lookup_table import load_table

    path = cfg.table.path
    if path and Path(path).exists():
        print(f"📂 Loading lookup table from {path}")
        return load_table(path)
    return _build_table(cfg, oracle, grid)


def run_build_table(cfg: RunConfig, out_dir: Path) -> int:
    from src.lookup_table import heatmap_rows, save_table, table_summary

    oracle = cfg.build_oracle()
    grid = cfg.build_grid()
    print("STEP 1: Building lookup table...")
    table = _build_table(cfg, oracle, grid)
    summary = table_summary(table)
    print(f"   {summary['conditions']} condition(s), mean ratio {summary['mean_ratio']:.4g}, "
          f"std over c {summary['std_over_conditions']:.3g}, std over t {summary['std_over_timesteps']:.3g}")
    if summary["degenerate_cells"]:
        print(f"   ⚠️  {summary['degenerate_cells']} degenerate cell(s) fell back to ratio 1")

    print("STEP 2: Writing table and heatmap...")
    table_path = out_dir / "lookup_table.json"
    save_table(table, table_path)
    heatmap_path = out_dir / "heatmap.csv"
    with open(heatmap_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["t_index", "dim", "ratio"])
        for t_index, dim, ratio in heatmap_rows(table, cfg.table.heatmap_condition):
            writer.writerow([t_index, dim, f"{ratio:.17g}"])
    _write_json(out_dir / "table_summary.json", summary)
    print(f"💾 Table:   {table_path}")
    print(f"💾 Heatmap: {heatmap_path}")
    return EXIT_OK


def run_sample(cfg: RunConfig, out_dir: Path) -> int:
    from src.guidance import RECFG
    from src.metrics import moments
    from src.samplers import DDIM, ddim_run, ode_run, write_samples_csv

    oracle = cfg.build_oracle()
    grid = cfg.build_grid()
    table = None
    if cfg.guidance.mode == RECFG and cfg.guidance.gamma0 is None:
        if not (cfg.table.path or cfg.table.cache):
            raise ConfigError("table.path", "recfg guidance needs a lookup table (run build-table) "
                                            "or a fixed guidance.gamma0")
        table = _load_or_build_table(cfg, oracle, grid)
    rule = cfg.build_rule(table)
    sc = cfg.sampler_config(grid)

    print(f"STEP 1: Sampling {sc.batch} chains with {sc.method}, {rule.describe()}...")
    run = ddim_run if sc.method == DDIM else ode_run
    cond = cfg.sampler.condition
    batch = run(oracle, rule, sc, cond=cond, cond_id=cfg.sampler.cond_id if cond is not None else None)

    print("STEP 2: Writing samples...")
    samples_path = out_dir / "samples.csv"
    write_samples_csv(batch, samples_path)
    mean, var, se = moments(batch)
    _write_json(out_dir / "moments.json", {"mean": mean.tolist(), "var": var.tolist(), "se_mean": se.tolist(),
                                           "n": batch.size, "rule": rule.describe()})
    print(f"   mean {np.array2string(mean, precision=5)} (se {np.array2string(se, precision=2)}), "
          f"var {np.array2string(var, precision=5)}")
    print(f"💾 Samples: {samples_path}")
    return EXIT_OK


def run_simulate(cfg: RunConfig, out_dir: Path) -> int:
    from src.guidance import GuidanceRule
    from src.lookup_table import build_from_oracle
    from src.metrics import density_bundle, moments
    from src.samplers import ddim_run
    from src.shift_theory import cfg_toy_distribution, drift_propagate, recfg_toy_distribution
    from src.worlds import AnalyticWorld, ExactOracle

    if cfg.world.dim != 1:
        raise ConfigError("world.dim", "simulate reproduces the one-dimensional toy; set world.dim=1")
    if cfg.schedule.kind != "VE":
        raise ConfigError("schedule.kind", "the closed-form toy laws assume the VE schedule")
    oracle = ExactOracle(AnalyticWorld.toy(), cfg.build_schedule())
    grid = cfg.build_grid()
    c = cfg.simulate.condition
    T = cfg.grid.T

    print("STEP 1: Building the exact-oracle lookup table...")
    table = build_from_oracle(oracle, grid, cfg.table.n_per_condition, {"c": c}, cfg.table.seed,
                              workers=cfg.workers, antithetic=cfg.table.antithetic)

    summary = {}
    for k, gamma in enumerate(cfg.simulate.gammas, start=2):
        print(f"STEP {k}: gamma = {gamma:g}")
        sc = cfg.sampler_config(grid)
        cfg_batch = ddim_run(oracle, GuidanceRule.cfg(gamma), sc, cond=c)
        rule = GuidanceRule.recfg(gamma, table=table, clamp_mode=cfg.guidance.clamp_mode)
        recfg_batch = ddim_run(oracle, rule, sc, cond=c, cond_id="c")
        gamma0 = float(np.mean([co.gamma0 for co in rule.schedule(grid, "c")]))

        cfg_report = cfg_toy_distribution(gamma, T)
        recfg_report = recfg_toy_distribution(gamma, gamma0, T)
        ks = density_bundle(gamma, c, cfg_report, recfg_report, cfg_batch, recfg_batch, out_dir)
        drift = drift_propagate(oracle, GuidanceRule.cfg(gamma), grid, c, form=cfg.simulate.drift_form)

        cfg_m, cfg_v, cfg_se = (float(x[0]) for x in moments(cfg_batch))
        re_m, re_v, re_se = (float(x[0]) for x in moments(recfg_batch))
        print(f"   📈 CFG:   mean {cfg_m:.5f} (theory {c * cfg_report.mean_coeff:.5f}), "
              f"var {cfg_v:.5f} (theory {cfg_report.variance:.5f})")
        print(f"   🎯 ReCFG: mean {re_m:.5f} (target {c:.5f}), var {re_v:.5f} (theory {recfg_report.variance:.5f})")
        print(f"   🔁 drift: predicted {float(drift[-1].delta[0]):.5f}, observed {c - cfg_m:.5f}")
        summary[f"{gamma:g}"] = {
            "cfg": {"mean": cfg_m, "var": cfg_v, "se": cfg_se, "theory": cfg_report.to_dict()},
            "recfg": {"mean": re_m, "var": re_v, "se": re_se, "gamma0": gamma0, "theory": recfg_report.to_dict()},
            "drift": {"predicted": float(drift[-1].delta[0]), "observed": c - cfg_m},
            "ks": ks["ks"],
        }

    _write_json(out_dir / "simulate_summary.json", summary)
    print(f"\n💾 Plot data written to {out_dir}")
    return EXIT_OK


def run_verify(cfg: RunConfig, out_dir: Path) -> int:
    from src.formatter import generate_verify_markdown
    from src.verify import run_suite

    print("STEP 1: Running the invariant suite...")

    def progress(result):
        mark = "✅" if result.passed else "❌"
        print(f"   {mark} {result.name} ({result.seconds:.1f}s)")

    results = run_suite(cfg, progress)
    _write_json(out_dir / "verify_report.json", [r.to_dict() for r in results])
    settings = {f"verify.{k}": v for k, v in cfg.to_dict()["verify"].items()}
    settings["workers"] = cfg.workers
    md = generate_verify_markdown([r.to_dict(timing=True) for r in results], settings)
    (out_dir / "verify_report.md").write_text(md, encoding="utf-8")

    failed = [r.name for r in results if not r.passed]
    print(f"\n📊 {len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        raise InvariantFailure(f"failed checks: {', '.join(failed)}")
    return EXIT_OK


def run_plot_data(cfg: RunConfig, out_dir: Path) -> int:
    root = out_dir.parent
    written = []

    print("STEP 1: Collecting density and histogram data...")
    sim_dir = root / "simulate"
    densities = sorted(sim_dir.glob("gamma_*_density.csv"))
    if densities:
        path = out_dir / "toy_density.csv"
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["gamma", "x", "pdf", "label"])
            for src_path in densities:
                gamma = src_path.name.split("_")[1]
                with open(src_path, newline="", encoding="utf-8") as g:
                    for row in list(csv.reader(g))[1:]:
                        writer.writerow([gamma] + row)
        written.append(path)
        path = out_dir / "toy_hist.csv"
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["gamma", "method", "bin_left", "bin_right", "count"])
            for src_path in sorted(sim_dir.glob("gamma_*_hist.csv")):
                _, gamma, method, _ = src_path.name.split("_")
                with open(src_path, newline="", encoding="utf-8") as g:
                    for row in list(csv.reader(g))[1:]:
                        writer.writerow([gamma, method] + row)
        written.append(path)
    else:
        print("   ⏭️  No simulate output found, skipping density plots")

    print("STEP 2: Collecting heatmap and shift curves...")
    for src_path, name in ((root / "build-table" / "heatmap.csv", "ratio_heatmap.csv"),
                           (root / "shift-analyze" / "shift_reports.csv", "shift_curves.csv")):
        if src_path.exists():
            (out_dir / name).write_bytes(src_path.read_bytes())
            written.append(out_dir / name)
        else:
            print(f"   ⏭️  {src_path} not found, skipping")

    if not written:
        raise ConfigError("output.root", f"no prior outputs under {root}; run simulate, build-table "
                                         "or shift-analyze first")
    for path in written:
        print(f"💾 {path}")
    return EXIT_OK


HANDLERS = {
    "shift-analyze": run_shift_analyze,
    "simulate": run_simulate,
    "build-table": run_build_table,
    "sample": run_sample,
    "verify": run_verify,
    "plot-data": run_plot_data,
}


def _exit_code(error: Exception) -> int:
    if isinstance(error, InvariantFailure):
        return EXIT_INVARIANT
    if isinstance(error, (NumericFailureError, QuadratureError)):
        return EXIT_NUMERIC
    return EXIT_VALIDATION


def _error_report(command: str, error: Exception, code: int) -> dict:
    report = {"command": command, "exit_code": code, "error_type": type(error).__name__, "message": str(error)}
    for attr in ("field", "step", "t", "offset", "abserr"):
        if getattr(error, attr, None) is not None:
            report[attr] = getattr(error, attr)
    if isinstance(error, IncompleteTableError):
        report["gaps"] = [list(g) for g in error.gaps]
    return report


def run(command: str, config_path: str | None = "config.yaml", overrides: list[str] | None = None,
        workers: int | None = None) -> int:
    """Run one command and return its exit code."""
    if command not in HANDLERS:
        print(f"❌ unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
        return EXIT_VALIDATION
    out_dir = None
    try:
        cfg = resolve_config(config_path, overrides, workers)
        out_dir = cfg.output_root() / command
        out_dir.mkdir(parents=True, exist_ok=True)
        _banner(command)
        code = HANDLERS[command](cfg, out_dir)
        print(f"\n{'='*60}")
        print(f"  ✅ {command} finished")
        print(f"{'='*60}\n")
        return code
    except (LabError, ValueError) as e:
        code = _exit_code(e)
        print(f"\n❌ {type(e).__name__}: {e}")
        if out_dir is None:
            out_dir = Path(_fallback_root(overrides)) / command
            out_dir.mkdir(parents=True, exist_ok=True)
        _write_json(out_dir / "error_report.json", _error_report(command, e, code))
        print(f"💾 Error report: {out_dir / 'error_report.json'}")
        return code


def _fallback_root(overrides: list[str] | None) -> str:
    """Output root when the configuration itself could not be resolved."""
    for item in overrides or []:
        key, _, value = item.partition("=")
        if key == "output.root" and value:
            return value
    return os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="Guidance Shift Lab")
    parser.add_argument("command", choices=COMMANDS, help="What to run")
    parser.add_argument("--config", default="config.yaml", help="Path to config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Override a config value, e.g. --set grid.nfe=1024 (repeatable)")
    parser.add_argument("--workers", type=int, default=None, help="Worker threads; results do not depend on it")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    return run(args.command, args.config, args.overrides, args.workers)


if __name__ == "__main__":
    sys.exit(main())
