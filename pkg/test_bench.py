import math

import numpy as np
import pandas as pd
import pytest

from baselines import MethodResult, MethodSpec, default_registry
from bench import (
    CSV_COLUMNS,
    HIGHDIM_P,
    PRESET_ALIASES,
    PRESETS,
    ExperimentSpec,
    MetricsReport,
    Scenario,
    generate,
    method_seed,
    metrics,
    preset,
    read_results_json,
    run_experiment,
    summarize,
    tpr_fpr,
    write_results,
)
from errors import ConvergenceFailure, DimensionMismatch, InvalidConfig


def test_metrics_examples():
    assert metrics(np.ones(4), np.ones(4)) == (0.0, 0.0)
    assert metrics(np.array([1.0, 0, 0, 0]), np.zeros(4)) == pytest.approx((0.25, 0.5))
    assert metrics(np.full(3, -0.7), np.zeros(3)) == pytest.approx((0.7, 0.7))
    with pytest.raises(DimensionMismatch):
        metrics(np.zeros(3), np.zeros(4))


def test_tpr_fpr_examples():
    truth = np.array([1.0, 1.0, 0.0, 0.0, 0.0])
    assert tpr_fpr(truth, truth) == (1.0, 0.0)
    assert tpr_fpr(np.zeros(5), truth) == (0.0, 0.0)
    assert tpr_fpr(np.array([1.0, 0, 1.0, 0, 0]), truth) == pytest.approx((0.5, 1 / 3))
    assert tpr_fpr(np.ones(3), np.zeros(3)) == (None, 1.0)
    assert tpr_fpr(np.array([1e-12, 0.0]), np.array([1.0, 0.0])) == (0.0, 0.0)
    with pytest.raises(DimensionMismatch):
        tpr_fpr(np.zeros(2), np.zeros(3))


def test_method_seed_is_stable_per_label():
    assert method_seed(5, "ols") == method_seed(5, "ols")
    assert method_seed(5, "ols") != method_seed(5, "lasso")
    assert method_seed(6, "ols") != method_seed(5, "ols")


def test_generate_dispatches_on_scenario():
    d, truth = generate(Scenario.GWAS_PSD, {"n": 40, "p": 50}, seed=1)
    assert d.X.shape == (40, 50) and truth.beta.shape == (50,)
    d, _ = generate(Scenario.LOWDIM, {"n": 30}, seed=1)
    assert d.X.shape == (30, 13)


def test_spec_checks():
    with pytest.raises(InvalidConfig):
        ExperimentSpec(replications=0).check()
    with pytest.raises(InvalidConfig):
        ExperimentSpec(methods=["elastic-net"]).check()
    with pytest.raises(InvalidConfig):
        ExperimentSpec(generator={"s": 20}).check()


def test_method_labels_fan_out_q_override():
    spec = ExperimentSpec(methods=["spar", "ols"], q_override=[None, 2])
    assert spec.method_labels() == [("spar", "spar", None), ("spar[q=2]", "spar", 2), ("ols", "ols", None)]


def test_run_experiment_smoke():
    spec = ExperimentSpec(generator={"n": 100}, methods=["ols"], replications=2)
    results = run_experiment(spec)
    assert [(row.method, row.rep) for row in results.rows] == [("ols", 0), ("ols", 1)]
    for row in results.rows:
        assert math.isfinite(row.mae) and math.isfinite(row.rmse)
        assert 0 <= row.tpr <= 1 and 0 <= row.fpr <= 1
        assert row.wall_ms_total >= 0
    assert results.failures == 0


def test_run_experiment_orders_rows_and_records_failures():
    registry = default_registry()

    def boom(d, seed=0):
        raise ConvergenceFailure("did not converge")

    registry.register_method(MethodSpec("boom", "always fails", boom))
    spec = ExperimentSpec(generator={"n": 60}, methods=["boom", "ols"], replications=3)
    results = run_experiment(spec, jobs=3, registry=registry)
    assert [(row.method, row.rep) for row in results.rows] == [
        ("boom", 0), ("boom", 1), ("boom", 2), ("ols", 0), ("ols", 1), ("ols", 2)
    ]
    assert results.failures == 3
    assert results.rows[0].status.startswith("ConvergenceFailure")
    assert not results.rows[3].failed
    summary = results.summary()
    assert summary["failures"].tolist() == [3, 0]


def test_rerun_writes_identical_csv(tmp_path):
    spec = ExperimentSpec(generator={"n": 80}, methods=["ols", "lasso"], replications=3, record_timings=False)
    first = write_results(run_experiment(spec, jobs=2).rows, tmp_path / "a.csv")
    second = write_results(run_experiment(spec, jobs=1).rows, tmp_path / "b.csv")
    assert first.read_bytes() == second.read_bytes()
    assert (tmp_path / "a_summary.csv").read_bytes() == (tmp_path / "b_summary.csv").read_bytes()


def test_csv_layout_and_summary(tmp_path):
    rows = [
        MetricsReport("ols", 0, 0.1, 0.2, 1.0, 0.0, wall_ms_total=3.0),
        MetricsReport("ols", 1, 0.3, 0.4, 0.5, 0.25, wall_ms_total=5.0),
    ]
    path = write_results(rows, tmp_path / "out" / "res.csv")
    df = pd.read_csv(path)
    assert list(df.columns) == CSV_COLUMNS
    assert path.read_text().splitlines()[1].startswith("ols,0,0.10000000000000001,")
    summary = pd.read_csv(tmp_path / "out" / "res_summary.csv")
    assert summary.loc[0, "runs"] == 2
    assert summary.loc[0, "mae_mean"] == pytest.approx(df["mae"].mean())
    assert summary.loc[0, "tpr_sd"] == pytest.approx(np.std([1.0, 0.5], ddof=1))


def test_empty_rows_give_header_only(tmp_path):
    path = write_results([], tmp_path / "empty.csv")
    assert path.read_text().strip() == ",".join(CSV_COLUMNS)
    assert summarize([]).empty


def test_json_round_trip(tmp_path):
    rows = [
        MetricsReport("spar", 0, 0.1, 0.2, None, 0.0, wall_ms={"mip": 1.5}, wall_ms_total=2.0),
        MetricsReport("null", 0, 0.3, 0.4, 1.0, 1.0),
    ]
    path = write_results(rows, tmp_path / "res.json", fmt="json")
    assert read_results_json(path) == rows
    with pytest.raises(InvalidConfig):
        write_results(rows, tmp_path / "res.txt", fmt="txt")


def test_presets_are_valid():
    for name in PRESETS:
        specs = preset(name, scale=0.1)
        assert specs
        for spec in specs:
            spec.check()
            assert spec.replications >= 1
    assert len(preset("lowdim-sparsity")) == 13
    assert preset("lowdim-sparsity", scale=0.1)[0].replications == 10
    assert preset("lowdim-q")[0].q_override == [None, 1, 2, 3, 4, 5]
    assert len(preset("highdim-methods")) == len(HIGHDIM_P) == 8
    assert len(preset("highdim-measured")) == 3 * len(HIGHDIM_P)
    assert preset("highdim-q")[0].methods == ["spar"]
    with pytest.raises(InvalidConfig):
        preset("no-such-preset")


def test_preset_aliases_resolve_to_canonical_grids():
    assert set(PRESET_ALIASES.values()) <= set(PRESETS)
    for alias, name in PRESET_ALIASES.items():
        assert preset(alias, scale=0.1) == preset(name, scale=0.1)
    assert len(preset("fig2")) == 13
    assert [s.generator["p"] for s in preset("table1")] == list(HIGHDIM_P)


def test_preset_p_values_narrow_highdim_grids():
    specs = preset("highdim-methods", p_values=[300, 400])
    assert [s.name for s in specs] == ["highdim-methods_p300", "highdim-methods_p400"]
    assert {s.generator["r"] for s in preset("highdim-measured", p_values=[300])} == {3, 10, 50}
    with pytest.raises(InvalidConfig):
        preset("highdim-lasso", p_values=[0])


def test_solver_limit_rows_count_as_failures():
    registry = default_registry()

    def capped(d, seed=0):
        return MethodResult("capped", np.zeros(d.p), details={"solver_status": "FeasibleTimeLimit"})

    def optimal(d, seed=0):
        return MethodResult("optimal", np.zeros(d.p), details={"solver_status": "Optimal"})

    registry.register_method(MethodSpec("capped", "stops at a solver limit", capped))
    registry.register_method(MethodSpec("optimal", "solves to optimality", optimal))
    spec = ExperimentSpec(generator={"n": 60}, methods=["capped", "optimal"], replications=2)
    results = run_experiment(spec, registry=registry)
    assert [row.status for row in results.rows] == ["FeasibleTimeLimit"] * 2 + ["ok"] * 2
    assert results.failures == 2
    assert math.isfinite(results.rows[0].mae)


def test_node_limit_is_reported_for_spar(monkeypatch):
    monkeypatch.setenv("SPAR_MIP_MAX_NODES", "0")
    spec = ExperimentSpec(generator={"n": 200, "s": 3}, methods=["spar"], replications=2, q_override=[3])
    results = run_experiment(spec)
    assert all(row.status == "FeasibleTimeLimit" for row in results.rows)
    assert results.failures == 2


def _means(results, column):
    summary = results.summary().set_index("method")
    return summary[f"{column}_mean"].to_dict()


@pytest.mark.slow
def test_lowdim_sparsity_boundary():
    mae = {}
    for s in range(1, 7):
        spec = ExperimentSpec(generator={"n": 1000, "s": s}, methods=["spar", "null", "ols"], replications=100)
        results = run_experiment(spec, jobs=4)
        assert results.failures == 0
        mae[s] = _means(results, "mae")
    for s in range(1, 6):
        assert mae[s]["spar"] < mae[s]["ols"]
        assert mae[s]["spar"] < mae[s]["null"] + 0.02
    assert mae[6]["spar"] < mae[6]["ols"]
    assert mae[6]["null"] >= 1.5 * mae[4]["null"]


@pytest.mark.slow
def test_highdim_support_recovery_and_mae_ordering():
    spec = ExperimentSpec(
        scenario=Scenario.HIGHDIM,
        generator={"n": 300, "p": 300, "s": 5},
        methods=["spar", "null", "lasso", "deconf-lasso"],
        replications=20,
    )
    results = run_experiment(spec, jobs=4)
    spar_rows = [row for row in results.rows if row.method == "spar"]
    assert sum(row.tpr == 1.0 for row in spar_rows) >= 18
    fpr = _means(results, "fpr")
    assert fpr["spar"] < 1e-3
    assert fpr["lasso"] > 0.05
    mae = _means(results, "mae")
    assert mae["spar"] < mae["deconf-lasso"] <= mae["lasso"]
    assert mae["spar"] < mae["null"]


@pytest.mark.slow
def test_gwas_high_snr_ordering():
    spec = ExperimentSpec(
        scenario=Scenario.GWAS_BN,
        generator={"n": 400, "p": 400, "snr": 5.0},
        methods=["spar", "null", "ridge", "deconf-ridge"],
        replications=10,
    )
    rmse = _means(run_experiment(spec, jobs=4), "rmse")
    assert rmse["spar"] < rmse["ridge"]
    assert rmse["spar"] < rmse["null"]
    assert rmse["deconf-ridge"] == pytest.approx(rmse["ridge"], rel=0.15)
