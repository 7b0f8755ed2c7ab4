import numpy as np
import pytest

from cfrl_lab.errors import ArgumentError
from cfrl_lab.evaluation import EvalConfig
from cfrl_lab.experiment import ExperimentConfig, ResultTable, plot_trends, run_experiment, stage_seed

QUICK_EVAL = EvalConfig(n_subjects=300, horizon=10)


def quick(**kw):
    base = dict(delta_grid=[1.0], n_grid=[100], grid="product", seeds=1, eval=QUICK_EVAL)
    return ExperimentConfig(**{**base, **kw})


def test_random_only_single_cell(tmp_path):
    table = run_experiment(quick(methods=["random"]), tmp_path)
    assert len(table) == 1
    row = table.rows[0]
    assert row["method"] == "random" and float(row["cf_metric"]) == 0.0
    assert (tmp_path / "timings.csv").exists()


def test_rerun_is_byte_identical(tmp_path):
    cfg = quick(seeds=2, n_grid=[100, 200])
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    a, b = (tmp_path / "a" / "results.csv").read_bytes(), (tmp_path / "b" / "results.csv").read_bytes()
    assert a == b
    assert len(a.splitlines()) == 1 + 2 * 2 * 6


def test_resume_after_interruption(tmp_path):
    cfg = quick(seeds=2, delta_grid=[0.0, 1.0])
    full = run_experiment(cfg, tmp_path / "full")
    lines = (tmp_path / "full" / "results.csv").read_text().splitlines(keepends=True)
    part = tmp_path / "part"
    part.mkdir()
    # keep a scattered subset, plus a torn final line as a crash would leave
    (part / "results.csv").write_text("".join(lines[:1] + lines[3:9] + lines[15:16]) + "ours,linear,1")
    resumed = run_experiment(cfg, part)
    assert (part / "results.csv").read_bytes() == (tmp_path / "full" / "results.csv").read_bytes()
    assert len(resumed) == len(full)


def test_grid_cells_are_independent(tmp_path):
    one = run_experiment(quick(n_grid=[100]), tmp_path / "one")
    two = run_experiment(quick(n_grid=[100, 150]), tmp_path / "two")
    assert one.rows == two.filter(N=100).rows
    assert stage_seed(0, "linear", 1.0, 100, 0, "eval") != stage_seed(0, "linear", 1.0, 100, 0, "train")
    assert stage_seed(0, "linear", 1.0, 100, 0, "eval") == stage_seed(0, "linear", 1, 100, 0, "eval")


def test_failing_cells_are_recorded_and_skipped(tmp_path):
    # a single subject never covers both attribute values
    table = run_experiment(quick(n_grid=[1, 100]), tmp_path)
    errors = (tmp_path / "errors.csv").read_text()
    assert "CoverageError" in errors
    assert {r["N"] for r in table.rows} >= {"100"}
    assert all(r["method"] != "ours" for r in table.filter(N=1).rows)


def test_paper_grid_cells():
    cells = ExperimentConfig().cells()
    assert (1.0, 100) in cells and (2.0, 1000) in cells and (0.0, 100) not in cells
    assert len(cells) == 9


@pytest.mark.parametrize("bad", [dict(seeds=0), dict(n_grid=[]), dict(methods=["psychic"]), dict(regressor="tree")])
def test_config_validation(bad):
    with pytest.raises(ArgumentError):
        quick(**bad)


def test_config_round_trip():
    cfg = quick(seeds=3)
    back = ExperimentConfig.from_dict(cfg.to_dict())
    assert back == cfg


def test_plot_errors(tmp_path):
    with pytest.raises(ArgumentError):
        plot_trends(ResultTable([]), "cf_vs_n", tmp_path / "x.svg")
    with pytest.raises(ArgumentError):
        plot_trends(ResultTable([{"method": "ours", "N": "100"}]), "cf_vs_n", tmp_path / "x.svg")
    table = ResultTable([dict(method="random", env="linear", delta="1", N="100", seed="0", cf_metric="0",
                              mean_return="1", stderr_return="0.1")])
    with pytest.raises(ArgumentError):
        plot_trends(table, "histogram", tmp_path / "x.svg")


def test_single_point_plot_has_marker_but_no_band(tmp_path):
    table = run_experiment(quick(methods=["random"]), tmp_path)
    svg = plot_trends(table, "cf_vs_n", tmp_path / "one.svg").read_text()
    assert svg.lstrip().startswith("<?xml") and "<svg" in svg
    assert "PolyCollection" not in svg
    assert "line2d" in svg


def test_all_panels_with_bands(tmp_path):
    cfg = quick(seeds=2, n_grid=[100, 200], delta_grid=[0.0, 1.0], methods=["ours", "full", "random"])
    table = run_experiment(cfg, tmp_path)
    for panel in ("cf_vs_n", "return_vs_cf", "cf_vs_delta"):
        svg = plot_trends(table, panel, tmp_path / f"{panel}.svg").read_text()
        assert "<svg" in svg
        if panel != "return_vs_cf":
            assert "PolyCollection" in svg
    again = plot_trends(table, "cf_vs_n", tmp_path / "again.svg").read_bytes()
    assert again == (tmp_path / "cf_vs_n.svg").read_bytes()


def test_result_table_summary(tmp_path):
    table = run_experiment(quick(seeds=3, methods=["random", "full"]), tmp_path)
    mean, sd, count = table.summary("full", "mean_return", delta=1.0, N=100)
    vals = table.filter(method="full").numeric("mean_return")
    assert count == 3 and mean == pytest.approx(vals.mean()) and sd == pytest.approx(np.std(vals, ddof=1))
    with pytest.raises(ArgumentError):
        table.summary("oracle", "cf_metric")


def test_worker_pool_matches_serial(tmp_path, monkeypatch):
    cfg = quick(seeds=2, n_grid=[100, 120], methods=["full", "random"])
    run_experiment(cfg, tmp_path / "serial")
    monkeypatch.setenv("CFRL_THREADS", "2")
    run_experiment(cfg, tmp_path / "pool")
    assert (tmp_path / "pool" / "results.csv").read_bytes() == (tmp_path / "serial" / "results.csv").read_bytes()
