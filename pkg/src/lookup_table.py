"""Expectation-ratio lookup table: build, ingest, persist, query.

A table stores, per condition, an [NFE x D] tensor of
E[eps(x_t, c, t)] / E[eps(x_t, t)] under the forward marginal q_t(x_t|c),
plus their across-condition average used for unseen conditions. gamma0 is
resolved from it as (1 - gamma1) * ratio and then clamped.
"""

import base64
import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

from src import rng
from src.errors import (
    CacheValidationError,
    DomainError,
    IncompleteTableError,
    SchemaVersionError,
    TableFormatError,
    TableLookupError,
)
from src.guidance import GuidanceCoefficients, GuidanceRule, clamp_coeffs, residual_eps
from src.schedule import TimeGrid, eval_schedule
from src.worlds import ScoreOracle, sample_conditional

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1"
AVG = "avg"
# |E[eps_uncond]| below this fraction of the cell RMS marks the ratio as degenerate.
DENOMINATOR_FLOOR = 1e-8
CACHE_HEADER = ["cond_id", "t_index", "dim", "sum_cond", "sum_uncond", "count"]


@dataclass(eq=False)
class LookupTable:
    model_id: str
    grid: TimeGrid
    dim: int
    conditions: dict[str, np.ndarray]
    counts: dict[str, int]
    build_seed: int | None = None
    avg: np.ndarray | None = None
    stderr: dict[str, np.ndarray] = field(default_factory=dict)
    degenerate: dict[str, list[tuple[int, int]]] = field(default_factory=dict)
    condition_values: dict[str, list[float]] = field(default_factory=dict)
    schema_version: str = SCHEMA_VERSION

    def __post_init__(self):
        if not self.conditions:
            raise DomainError("a lookup table needs at least one condition")
        shape = (self.grid.nfe, self.dim)
        self.conditions = {k: np.asarray(self.conditions[k], dtype=float) for k in sorted(self.conditions)}
        for cond_id, ratios in self.conditions.items():
            if ratios.shape != shape:
                raise DomainError(f"ratio tensor for {cond_id!r} has shape {ratios.shape}, expected {shape}")
            if not np.all(np.isfinite(ratios)):
                raise DomainError(f"ratio tensor for {cond_id!r} has non-finite entries")
        if self.avg is None:
            self.avg = compute_avg(self.conditions)

    @property
    def nfe(self) -> int:
        return self.grid.nfe

    def ratios_for(self, cond_id: str | None, fallback: bool = True) -> np.ndarray:
        if cond_id is not None and cond_id in self.conditions:
            return self.conditions[cond_id]
        if cond_id == AVG or fallback:
            return self.avg
        raise TableLookupError(f"condition {cond_id!r} not in lookup table and avg fallback is disabled")

    def __eq__(self, other) -> bool:
        if not isinstance(other, LookupTable):
            return NotImplemented
        return (
            self.schema_version == other.schema_version
            and self.model_id == other.model_id
            and self.grid == other.grid
            and self.dim == other.dim
            and self.build_seed == other.build_seed
            and self.counts == other.counts
            and self.condition_values == other.condition_values
            and _same_tensors(self.conditions, other.conditions)
            and _same_tensors(self.stderr, other.stderr)
            and np.array_equal(self.avg, other.avg)
            and {k: sorted(map(tuple, v)) for k, v in self.degenerate.items()}
            == {k: sorted(map(tuple, v)) for k, v in other.degenerate.items()}
        )


def _same_tensors(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def compute_avg(conditions: dict[str, np.ndarray]) -> np.ndarray:
    """Arithmetic mean over condition tensors, summed in sorted-id order."""
    keys = sorted(conditions)
    return np.stack([conditions[k] for k in keys]).sum(axis=0) / len(keys)


class _Neumaier:
    """Compensated running sum over arrays, added in a fixed order."""

    def __init__(self, shape):
        self.total = np.zeros(shape)
        self.comp = np.zeros(shape)

    def add(self, values: np.ndarray) -> None:
        t = self.total + values
        big = np.abs(self.total) >= np.abs(values)
        self.comp += np.where(big, (self.total - t) + values, (values - t) + self.total)
        self.total = t

    def value(self) -> np.ndarray:
        return self.total + self.comp


@dataclass
class _CellSums:
    """Per-cell sums of eps_cond, eps_uncond and their second moments over n units."""
    n: int
    s_c: np.ndarray
    s_u: np.ndarray
    s_cc: np.ndarray
    s_uu: np.ndarray
    s_cu: np.ndarray


def _accumulate(oracle: ScoreOracle, grid: TimeGrid, cond: np.ndarray, n: int, seed: int,
                cond_index: int, antithetic: bool,
                world_sampler: Callable | None) -> _CellSums:
    dim = oracle.world.dim
    # antithetic pairs round up so at least n draws are used
    units = max((n + 1) // 2, 2) if antithetic else n
    if units < 2:
        raise DomainError(f"need at least 2 independent draws per condition, got n={n}")
    sampler = world_sampler or (lambda c, m, s, *keys: sample_conditional(oracle.world, c, m, s, *keys))
    x0 = sampler(cond, units, seed, cond_index)
    shape = (grid.nfe, dim)
    acc = {name: _Neumaier(shape) for name in ("c", "u", "cc", "uu", "cu")}
    for t_index, t in enumerate(grid.eval_times):
        alpha, sigma = eval_schedule(oracle.sched, t)
        rows = {name: _Neumaier(dim) for name in acc}
        for block, start, stop in rng.blocks(units):
            noise = rng.stream(seed, 3, cond_index, t_index, block).standard_normal((stop - start, dim))
            x_t = alpha * x0[start:stop] + sigma * noise
            e_c, e_u = oracle.eps_pair(x_t, cond, t)
            if antithetic:
                # mirror (x0 - c, noise) through the condition
                x_m = alpha * (2.0 * cond - x0[start:stop]) - sigma * noise
                m_c, m_u = oracle.eps_pair(x_m, cond, t)
                e_c = 0.5 * (e_c + m_c)
                e_u = 0.5 * (e_u + m_u)
            rows["c"].add(e_c.sum(axis=0))
            rows["u"].add(e_u.sum(axis=0))
            rows["cc"].add((e_c * e_c).sum(axis=0))
            rows["uu"].add((e_u * e_u).sum(axis=0))
            rows["cu"].add((e_c * e_u).sum(axis=0))
        for name, row in rows.items():
            contribution = np.zeros(shape)
            contribution[t_index] = row.value()
            acc[name].add(contribution)
    return _CellSums(units, *(acc[name].value() for name in ("c", "u", "cc", "uu", "cu")))


def _ratios(sums: _CellSums, cond_id: str) -> tuple[np.ndarray, np.ndarray, list[tuple[int, int]]]:
    n = sums.n
    mean_c = sums.s_c / n
    mean_u = sums.s_u / n
    rms_u = np.sqrt(sums.s_uu / n)
    degenerate_mask = np.abs(mean_u) < DENOMINATOR_FLOOR * rms_u
    degenerate_mask |= mean_u == 0
    safe_u = np.where(degenerate_mask, 1.0, mean_u)
    ratio = np.where(degenerate_mask, 1.0, mean_c / safe_u)
    # residual r = eps_c - ratio * eps_u has mean zero by construction
    var_r = (sums.s_cc - 2.0 * ratio * sums.s_cu + ratio * ratio * sums.s_uu) / n
    var_r = np.maximum(var_r, 0.0) * n / (n - 1)
    stderr = np.where(degenerate_mask, 0.0, np.sqrt(var_r / n) / np.abs(safe_u))
    cells = [(int(t), int(d)) for t, d in zip(*np.nonzero(degenerate_mask))]
    if cells:
        logger.warning("condition %s: %d degenerate cell(s) with vanishing E[eps_uncond]; "
                       "ratio set to 1 (plain CFG) there", cond_id, len(cells))
    return ratio, stderr, cells


def build_from_oracle(oracle: ScoreOracle, grid: TimeGrid, n_per_condition: int,
                      condition_set: dict[str, object], seed: int, workers: int = 1,
                      antithetic: bool = False, world_sampler: Callable | None = None,
                      model_id: str | None = None) -> LookupTable:
    """Traverse q_0(x_0|c) for every condition and tabulate expectation ratios.

    Conditions are processed independently, each from its own random streams,
    so the table does not depend on `workers`.
    """
    if n_per_condition < 2:
        raise DomainError(f"n_per_condition must be >= 2, got {n_per_condition}")
    for t in grid.eval_times:
        if eval_schedule(oracle.sched, t)[1] <= 0:
            raise DomainError(f"grid time t={t} has sigma_t = 0; tables need sigma_t > 0")
    ids = sorted(condition_set)
    conds = {k: np.broadcast_to(np.asarray(condition_set[k], dtype=float), (oracle.world.dim,)).copy()
             for k in ids}

    def one(item):
        index, cond_id = item
        sums = _accumulate(oracle, grid, conds[cond_id], n_per_condition, seed, index,
                           antithetic, world_sampler)
        return cond_id, sums

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(one, enumerate(ids)))

    ratios, stderr, degenerate, counts = {}, {}, {}, {}
    for cond_id, sums in results:
        ratios[cond_id], stderr[cond_id], cells = _ratios(sums, cond_id)
        counts[cond_id] = 2 * sums.n if antithetic else sums.n
        if cells:
            degenerate[cond_id] = cells
    return LookupTable(
        model_id=model_id or oracle.describe(),
        grid=grid,
        dim=oracle.world.dim,
        conditions=ratios,
        counts=counts,
        build_seed=seed,
        stderr=stderr,
        degenerate=degenerate,
        condition_values={k: conds[k].tolist() for k in ids},
    )


@dataclass(frozen=True)
class PredictionCacheRecord:
    cond_id: str
    t_index: int
    dim: int
    sum_cond: float
    sum_uncond: float
    count: int

    def __post_init__(self):
        if self.count < 1:
            raise CacheValidationError(
                f"record ({self.cond_id}, t={self.t_index}, d={self.dim}) has count {self.count}; must be >= 1")
        if not (math.isfinite(self.sum_cond) and math.isfinite(self.sum_uncond)):
            raise CacheValidationError(
                f"record ({self.cond_id}, t={self.t_index}, d={self.dim}) has non-finite sums")

    def to_row(self) -> list[str]:
        return [self.cond_id, str(self.t_index), str(self.dim),
                f"{self.sum_cond:.17g}", f"{self.sum_uncond:.17g}", str(self.count)]


def read_cache_csv(path: str | Path) -> Iterator[PredictionCacheRecord]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != CACHE_HEADER:
            raise CacheValidationError(f"{path}: expected header {','.join(CACHE_HEADER)}, got {header}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CACHE_HEADER):
                raise CacheValidationError(f"{path}:{line_no}: expected 6 fields, got {len(row)}")
            try:
                yield PredictionCacheRecord(row[0], int(row[1]), int(row[2]),
                                            float(row[3]), float(row[4]), int(row[5]))
            except ValueError as e:
                if isinstance(e, CacheValidationError):
                    raise CacheValidationError(f"{path}:{line_no}: {e}") from e
                raise CacheValidationError(f"{path}:{line_no}: unparsable field ({e})") from e


def write_cache_csv(records: Iterable[PredictionCacheRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CACHE_HEADER)
        for record in records:
            writer.writerow(record.to_row())


def ingest_cache(records: Iterable[PredictionCacheRecord], grid: TimeGrid, dim: int,
                 model_id: str = "prediction-cache") -> LookupTable:
    """Assemble a table from externally computed per-cell sums.

    Duplicate cells are merged by summation; each cell's parts are added with
    math.fsum so the result does not depend on record order.
    """
    parts: dict[tuple[str, int, int], tuple[list, list, list]] = {}
    for record in records:
        if not 0 <= record.t_index < grid.nfe:
            raise CacheValidationError(f"record t_index {record.t_index} outside grid of {grid.nfe} steps")
        if not 0 <= record.dim < dim:
            raise CacheValidationError(f"record dim {record.dim} outside dimension {dim}")
        key = (record.cond_id, record.t_index, record.dim)
        sc, su, n = parts.setdefault(key, ([], [], []))
        sc.append(record.sum_cond)
        su.append(record.sum_uncond)
        n.append(record.count)
    if not parts:
        raise IncompleteTableError([])
    cond_ids = sorted({key[0] for key in parts})
    gaps = [(c, t, d) for c in cond_ids for t in range(grid.nfe) for d in range(dim)
            if (c, t, d) not in parts]
    if gaps:
        raise IncompleteTableError(gaps)

    ratios, counts, degenerate = {}, {}, {}
    for cond_id in cond_ids:
        tensor = np.empty((grid.nfe, dim))
        total = 0
        for t in range(grid.nfe):
            for d in range(dim):
                sc, su, n = parts[(cond_id, t, d)]
                count = sum(n)
                total += count
                mean_c = math.fsum(sc) / count
                mean_u = math.fsum(su) / count
                if mean_u == 0:
                    degenerate.setdefault(cond_id, []).append((t, d))
                    tensor[t, d] = 1.0
                else:
                    tensor[t, d] = mean_c / mean_u
        ratios[cond_id] = tensor
        counts[cond_id] = total // (grid.nfe * dim)
    for cond_id, cells in degenerate.items():
        logger.warning("condition %s: %d cache cell(s) with zero E[eps_uncond]; ratio set to 1",
                       cond_id, len(cells))
    return LookupTable(model_id=model_id, grid=grid, dim=dim, conditions=ratios,
                       counts=counts, degenerate=degenerate)


def gamma0_for(table: LookupTable, gamma1, cond_id: str | None, t_index: int,
               clamp_mode: str, fallback: bool = True) -> np.ndarray:
    """gamma0 = (1 - gamma1) * ratio, then clamped; unseen conditions use the avg row."""
    if not 0 <= t_index < table.nfe:
        raise TableLookupError(f"t_index {t_index} outside table grid of {table.nfe} steps")
    ratio = table.ratios_for(cond_id, fallback)[t_index]
    gamma1 = np.asarray(gamma1, dtype=float)
    raw = (1.0 - gamma1) * ratio
    return clamp_coeffs(GuidanceCoefficients(gamma1, raw, clamp_mode)).gamma0


def objective_L(oracle: ScoreOracle, rule: GuidanceRule, grid: TimeGrid, cond, mc_samples: int,
                seed: int, cond_id: str | None = None) -> tuple[float, float]:
    """Monte Carlo E_{t, x_t}[||(gamma1 - 1) eps_cond + gamma0 eps_uncond||^2] with its standard error.

    t runs over the grid's evaluation times (stratified), x_t ~ q_t(x_t|c).
    """
    if mc_samples < 2:
        raise DomainError(f"mc_samples must be >= 2, got {mc_samples}")
    world = oracle.world
    cond = np.broadcast_to(np.asarray(cond, dtype=float), (world.dim,))
    x0 = sample_conditional(world, cond, mc_samples, seed, 7)
    means, variances = [], []
    for t_index, t in enumerate(grid.eval_times):
        alpha, sigma = eval_schedule(oracle.sched, t)
        noise = rng.standard_normal(seed, mc_samples, world.dim, 8, t_index)
        e_c, e_u = oracle.eps_pair(alpha * x0 + sigma * noise, cond, t)
        coeffs = rule.coeffs_at(grid, t_index, t, cond_id)
        sq = np.sum(residual_eps(e_c, e_u, coeffs) ** 2, axis=-1)
        means.append(sq.mean())
        variances.append(sq.var(ddof=1) / mc_samples)
    k = len(means)
    return float(math.fsum(means) / k), float(math.sqrt(math.fsum(variances)) / k)


def annihilation_residual(oracle: ScoreOracle, table: LookupTable, gamma1, cond, cond_id: str,
                          mc_samples: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell MC mean and standard error of the residual eps with unclamped table gamma0."""
    world = oracle.world
    cond = np.broadcast_to(np.asarray(cond, dtype=float), (world.dim,))
    x0 = sample_conditional(world, cond, mc_samples, seed, 9)
    means = np.empty((table.nfe, world.dim))
    ses = np.empty_like(means)
    gamma1 = np.asarray(gamma1, dtype=float)
    for t_index, t in enumerate(table.grid.eval_times):
        alpha, sigma = eval_schedule(oracle.sched, t)
        noise = rng.standard_normal(seed, mc_samples, world.dim, 10, t_index)
        e_c, e_u = oracle.eps_pair(alpha * x0 + sigma * noise, cond, t)
        gamma0 = (1.0 - gamma1) * table.ratios_for(cond_id)[t_index]
        res = residual_eps(e_c, e_u, GuidanceCoefficients(gamma1, gamma0, "off"))
        means[t_index] = res.mean(axis=0)
        ses[t_index] = res.std(axis=0, ddof=1) / math.sqrt(mc_samples)
    return means, ses


def condition_spread(table: LookupTable) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell mean and standard deviation of ratios across stored conditions."""
    stack = np.stack([table.conditions[k] for k in sorted(table.conditions)])
    std = stack.std(axis=0, ddof=1) if len(stack) > 1 else np.zeros_like(stack[0])
    return stack.mean(axis=0), std


def table_summary(table: LookupTable) -> dict:
    """Mean and spread of ratios over conditions and over timesteps, averaged over the rest."""
    stack = np.stack([table.conditions[k] for k in sorted(table.conditions)])
    over_c = stack.std(axis=0, ddof=1) if len(stack) > 1 else np.zeros(stack.shape[1:])
    over_t = stack.std(axis=1, ddof=1) if stack.shape[1] > 1 else np.zeros((stack.shape[0], stack.shape[2]))
    return {
        "conditions": len(stack),
        "nfe": table.nfe,
        "dim": table.dim,
        "mean_ratio": float(stack.mean()),
        "std_over_conditions": float(over_c.mean()),
        "std_over_timesteps": float(over_t.mean()),
        "degenerate_cells": sum(len(v) for v in table.degenerate.values()),
    }


def heatmap_rows(table: LookupTable, cond_id: str | None = None) -> list[tuple[int, int, float]]:
    """(t_index, dim, ratio) rows for one condition, or the avg entry."""
    ratios = table.ratios_for(cond_id if cond_id is not None else AVG)
    return [(t, d, float(ratios[t, d])) for t in range(table.nfe) for d in range(table.dim)]


def ratio_convergence(oracle: ScoreOracle, grid: TimeGrid, cond, ns: list[int], seed: int,
                      workers: int = 1) -> tuple[list[tuple[int, float]], float]:
    """Max-abs ratio for each traversal count n and the fitted log-log slope.

    Meant for exact oracles, where every ratio should shrink to 0 like n^(-1/2).
    """
    points = []
    for i, n in enumerate(ns):
        table = build_from_oracle(oracle, grid, n, {"c": cond}, seed + i, workers=workers)
        points.append((n, float(np.max(np.abs(table.conditions["c"])))))
    slope = float(np.polyfit(np.log([p[0] for p in points]), np.log([p[1] for p in points]), 1)[0])
    return points, slope


def _encode(tensor: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(tensor, dtype="<f8").tobytes()).decode("ascii")


def _decode(text: str, shape: tuple[int, int], what: str) -> np.ndarray:
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except (ValueError, UnicodeEncodeError) as e:
        raise TableFormatError(f"tensor {what} is not valid base64: {e}") from e
    if len(raw) != 8 * shape[0] * shape[1]:
        raise TableFormatError(f"tensor {what} has {len(raw)} bytes, expected {8 * shape[0] * shape[1]}")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(float)


def table_to_json(table: LookupTable) -> str:
    payload = {
        "schema_version": table.schema_version,
        "model_id": table.model_id,
        "build_seed": table.build_seed,
        "dim": table.dim,
        "grid": table.grid.to_dict(),
        "counts": table.counts,
        "conditions": {k: _encode(v) for k, v in table.conditions.items()},
        "stderr": {k: _encode(v) for k, v in table.stderr.items()},
        "avg": _encode(table.avg),
        "degenerate": {k: [list(cell) for cell in sorted(v)] for k, v in table.degenerate.items()},
        "condition_values": table.condition_values,
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def save_table(table: LookupTable, path: str | Path) -> None:
    Path(path).write_text(table_to_json(table), encoding="utf-8")


def load_table(path: str | Path) -> LookupTable:
    raw = Path(path).read_bytes()
    try:
        payload = json.loads(raw.decode("utf-8"))
    except json.JSONDecodeError as e:
        raise TableFormatError(f"{path}: malformed table file: {e.msg}", e.pos) from e
    except UnicodeDecodeError as e:
        raise TableFormatError(f"{path}: table file is not UTF-8", e.start) from e
    if not isinstance(payload, dict):
        raise TableFormatError(f"{path}: table file must hold a JSON object", 0)
    version = str(payload.get("schema_version"))
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{path}: table schema version {version!r} needs an upgrade to {SCHEMA_VERSION!r}; rebuild the table")
    try:
        grid = TimeGrid.from_dict(payload["grid"])
        dim = int(payload["dim"])
        shape = (grid.nfe, dim)
        return LookupTable(
            model_id=payload["model_id"],
            grid=grid,
            dim=dim,
            conditions={k: _decode(v, shape, k) for k, v in payload["conditions"].items()},
            counts={k: int(v) for k, v in payload["counts"].items()},
            build_seed=payload.get("build_seed"),
            avg=_decode(payload["avg"], shape, AVG),
            stderr={k: _decode(v, shape, k) for k, v in payload.get("stderr", {}).items()},
            degenerate={k: [tuple(cell) for cell in v] for k, v in payload.get("degenerate", {}).items()},
            condition_values=payload.get("condition_values", {}),
        )
    except (KeyError, TypeError) as e:
        raise TableFormatError(f"{path}: table file is missing or mistypes field {e}") from e
