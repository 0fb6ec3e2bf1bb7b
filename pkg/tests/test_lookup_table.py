import json

import numpy as np
import pytest

from src.errors import (
    CacheValidationError,
    DomainError,
    IncompleteTableError,
    SchemaVersionError,
    TableFormatError,
    TableLookupError,
)
from src.guidance import STRICT, GuidanceRule
from src.lookup_table import (
    AVG,
    LookupTable,
    PredictionCacheRecord,
    annihilation_residual,
    build_from_oracle,
    condition_spread,
    gamma0_for,
    heatmap_rows,
    ingest_cache,
    load_table,
    objective_L,
    ratio_convergence,
    read_cache_csv,
    save_table,
    table_summary,
    table_to_json,
    write_cache_csv,
)
from src.schedule import TimeGrid, make_grid

ONE_STEP = TimeGrid(1.0, (1.0, 0.0))


def _records(grid_nfe: int, cond_id: str = "c", skip=()):
    return [PredictionCacheRecord(cond_id, t, 0, 1.0 + t, 2.0 + t, 4)
            for t in range(grid_nfe) if t not in skip]


def test_ingest_single_record():
    table = ingest_cache([PredictionCacheRecord("c", 0, 0, 2.0, 4.0, 10)], ONE_STEP, 1)
    assert float(table.conditions["c"][0, 0]) == 0.5
    assert table.counts == {"c": 10}


def test_ingest_merges_duplicates():
    records = [PredictionCacheRecord("c", 0, 0, 1.0, 2.0, 5), PredictionCacheRecord("c", 0, 0, 1.0, 2.0, 5)]
    table = ingest_cache(records, ONE_STEP, 1)
    assert float(table.conditions["c"][0, 0]) == 0.5
    assert table.counts["c"] == 10


def test_ingest_is_order_independent():
    grid = make_grid(9.0, 3)
    records = _records(3) + [PredictionCacheRecord("c", 1, 0, 1e-17, 3.0, 2)]
    forward = ingest_cache(records, grid, 1)
    backward = ingest_cache(list(reversed(records)), grid, 1)
    assert table_to_json(forward) == table_to_json(backward)


def test_cache_record_rejects_zero_count():
    with pytest.raises(CacheValidationError):
        PredictionCacheRecord("c", 0, 0, 1.0, 1.0, 0)


def test_ingest_reports_missing_cells():
    grid = make_grid(9.0, 3)
    with pytest.raises(IncompleteTableError) as info:
        ingest_cache(_records(3, skip=(1,)), grid, 1)
    assert info.value.gaps == [("c", 1, 0)]


def test_ingest_rejects_out_of_grid_record():
    with pytest.raises(CacheValidationError):
        ingest_cache([PredictionCacheRecord("c", 5, 0, 1.0, 1.0, 1)], ONE_STEP, 1)


def test_ingest_marks_zero_denominator_degenerate(caplog):
    with caplog.at_level("WARNING"):
        table = ingest_cache([PredictionCacheRecord("c", 0, 0, 2.0, 0.0, 3)], ONE_STEP, 1)
    assert table.degenerate == {"c": [(0, 0)]}
    assert float(table.conditions["c"][0, 0]) == 1.0
    assert "zero E[eps_uncond]" in caplog.text


def test_cache_csv_roundtrip(tmp_path):
    path = tmp_path / "cache.csv"
    records = _records(4, "a") + _records(4, "b")
    write_cache_csv(records, path)
    assert list(read_cache_csv(path)) == records


def test_cache_csv_bad_header(tmp_path):
    path = tmp_path / "cache.csv"
    path.write_text("cond,t,d,a,b,n\n")
    with pytest.raises(CacheValidationError):
        list(read_cache_csv(path))


def test_cache_csv_bad_field(tmp_path):
    path = tmp_path / "cache.csv"
    path.write_text("cond_id,t_index,dim,sum_cond,sum_uncond,count\nc,0,0,1.0,oops,3\n")
    with pytest.raises(CacheValidationError, match=":2:"):
        list(read_cache_csv(path))


def _two_row_table() -> LookupTable:
    grid = make_grid(9.0, 2)
    return LookupTable("test", grid, 1, {"c": np.array([[0.3], [-0.3]]), "d": np.array([[0.1], [0.1]])},
                       {"c": 10, "d": 10})


def test_gamma0_for_strict_clamp():
    table = _two_row_table()
    assert gamma0_for(table, 2.0, "c", 0, STRICT) == pytest.approx([-0.3])
    assert gamma0_for(table, 2.0, "c", 1, STRICT) == pytest.approx([0.0])


def test_gamma0_for_unseen_condition_uses_avg():
    table = _two_row_table()
    assert table.avg == pytest.approx(np.array([[0.2], [-0.1]]))
    assert gamma0_for(table, 2.0, "unseen", 0, STRICT) == pytest.approx([-0.2])
    assert gamma0_for(table, 2.0, AVG, 0, STRICT) == pytest.approx([-0.2])
    with pytest.raises(TableLookupError):
        gamma0_for(table, 2.0, "unseen", 0, STRICT, fallback=False)


def test_gamma0_for_index_out_of_range():
    with pytest.raises(TableLookupError):
        gamma0_for(_two_row_table(), 2.0, "c", 2, STRICT)


def test_table_rejects_wrong_shape():
    with pytest.raises(DomainError):
        LookupTable("test", make_grid(9.0, 3), 1, {"c": np.zeros((2, 1))}, {"c": 1})


def test_exact_oracle_ratios_are_small(exact, small_grid):
    table = build_from_oracle(exact, small_grid, 20_000, {"c": 1.0}, seed=4)
    ratios, stderr = table.conditions["c"], table.stderr["c"]
    assert np.all(np.abs(ratios) < 5 * stderr)
    assert table.counts == {"c": 20_000}


def test_antithetic_exact_ratios_vanish(exact, small_grid):
    table = build_from_oracle(exact, small_grid, 2000, {"c": 1.0}, seed=4, antithetic=True)
    assert np.max(np.abs(table.conditions["c"])) < 1e-12
    assert table.counts == {"c": 2000}


def test_perturbed_oracle_ratio(perturbed):
    table = build_from_oracle(perturbed, ONE_STEP, 200_000, {"c": 1.0}, seed=5)
    ratio = float(table.conditions["c"][0, 0])
    assert abs(ratio - 0.3) < 3 * float(table.stderr["c"][0, 0])
    mirrored = build_from_oracle(perturbed, ONE_STEP, 2000, {"c": 1.0}, seed=5, antithetic=True)
    assert float(mirrored.conditions["c"][0, 0]) == pytest.approx(0.3, abs=1e-9)


def test_build_is_worker_independent(world3, ve, small_grid):
    from src.worlds import ExactOracle, PerturbedOracle

    oracle = PerturbedOracle(ExactOracle(world3, ve), [0.1, -0.2, 0.05])
    conditions = {"a": [0.0, 0.0, 0.0], "b": [1.0, -1.0, 2.0], "c": [0.5, 0.5, 0.5]}
    serial = build_from_oracle(oracle, small_grid, 3000, conditions, seed=9, workers=1)
    parallel = build_from_oracle(oracle, small_grid, 3000, conditions, seed=9, workers=8)
    assert table_to_json(serial) == table_to_json(parallel)


def test_avg_is_mean_over_conditions(perturbed, small_grid):
    table = build_from_oracle(perturbed, small_grid, 1000, {"lo": -1.0, "hi": 2.0}, seed=1)
    assert np.array_equal(table.avg, (table.conditions["hi"] + table.conditions["lo"]) / 2)
    mean, std = condition_spread(table)
    assert mean == pytest.approx(table.avg)
    assert std.shape == (small_grid.nfe, 1)


def test_build_rejects_tiny_n(exact, small_grid):
    with pytest.raises(DomainError):
        build_from_oracle(exact, small_grid, 1, {"c": 1.0}, seed=0)


@pytest.mark.parametrize("n, draws", [(2, 4), (3, 4), (5, 6), (6, 6)])
def test_antithetic_pairs_round_up(perturbed, small_grid, n, draws):
    table = build_from_oracle(perturbed, small_grid, n, {"c": 1.0}, seed=0, antithetic=True)
    assert table.counts["c"] == draws


def test_table_roundtrip(tmp_path, perturbed, small_grid):
    table = build_from_oracle(perturbed, small_grid, 1000, {"a": 0.0, "b": 1.0}, seed=2)
    path = tmp_path / "table.json"
    save_table(table, path)
    loaded = load_table(path)
    assert loaded == table
    assert table_to_json(loaded) == path.read_text()


def test_truncated_table_file(tmp_path, perturbed, small_grid):
    table = build_from_oracle(perturbed, small_grid, 100, {"c": 1.0}, seed=2)
    text = table_to_json(table)
    path = tmp_path / "table.json"
    path.write_text(text[: len(text) // 2])
    with pytest.raises(TableFormatError) as info:
        load_table(path)
    assert info.value.offset is not None


def test_old_schema_version(tmp_path, perturbed, small_grid):
    payload = json.loads(table_to_json(build_from_oracle(perturbed, small_grid, 100, {"c": 1.0}, seed=2)))
    payload["schema_version"] = "0"
    path = tmp_path / "table.json"
    path.write_text(json.dumps(payload))
    with pytest.raises(SchemaVersionError):
        load_table(path)


def test_objective_zero_without_guidance(exact, small_grid):
    value, se = objective_L(exact, GuidanceRule.none(), small_grid, 1.0, 1000, seed=0)
    assert value == 0.0 and se == 0.0


def test_objective_recfg_below_cfg(exact):
    grid = make_grid(1.0, 8)
    table = build_from_oracle(exact, grid, 4000, {"c": 3.0}, seed=6, antithetic=True)
    cfg, cfg_se = objective_L(exact, GuidanceRule.cfg(2.0), grid, 3.0, 20_000, seed=1)
    recfg, recfg_se = objective_L(exact, GuidanceRule.recfg(2.0, table=table), grid, 3.0, 20_000, seed=1,
                                  cond_id="c")
    assert cfg > 0 and recfg > 0
    assert recfg + 3 * recfg_se < cfg - 3 * cfg_se


def test_annihilation_residual_is_within_noise(perturbed, small_grid):
    table = build_from_oracle(perturbed, small_grid, 4000, {"c": 1.0}, seed=3, antithetic=True)
    means, ses = annihilation_residual(perturbed, table, 2.0, 1.0, "c", 20_000, seed=4)
    assert means.shape == (small_grid.nfe, 1)
    assert np.all(np.abs(means) <= 5 * ses)


def test_summary_and_heatmap(perturbed, small_grid):
    table = build_from_oracle(perturbed, small_grid, 500, {"a": 0.5, "b": 1.5}, seed=1)
    summary = table_summary(table)
    assert summary["conditions"] == 2
    assert summary["nfe"] == small_grid.nfe
    assert summary["degenerate_cells"] == 0
    rows = heatmap_rows(table)
    assert len(rows) == small_grid.nfe
    assert rows[0] == (0, 0, float(table.avg[0, 0]))
    assert heatmap_rows(table, "a")[-1][2] == float(table.conditions["a"][-1, 0])


@pytest.mark.slow
def test_exact_ratio_convergence_rate(exact):
    grid = make_grid(9.0, 4)
    points, slope = ratio_convergence(exact, grid, 1.0, [1000, 10_000, 100_000, 1_000_000], seed=11)
    assert [n for n, _ in points] == [1000, 10_000, 100_000, 1_000_000]
    assert -0.65 <= slope <= -0.35
