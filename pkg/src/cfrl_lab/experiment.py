"""Seeded sweeps over (delta, N) grid cells, CSV result tables and trend plots.

Each (cell, seed index, stage) gets its own seed derived from the master seed
and the cell's *values*, so adding or removing grid points never changes
another cell's numbers. ``results.csv`` is rewritten in canonical order at the
end of a run, which makes interrupted-then-resumed runs byte-identical to
uninterrupted ones. Wall-clock times go to a separate ``timings.csv``.
"""
from __future__ import annotations

import csv
import logging
import os
import time
import traceback
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cmdp import make_env, sample_dataset
from .errors import ArgumentError
from .evaluation import EvalConfig, cf_metric
from .policy import METHODS, FqiConfig, train_baseline
from .preprocess import MeanModelConfig, estimate_marginals, fit_transition_mean, preprocess
from .regression import TrainConfig

log = logging.getLogger(__name__)

RESULT_COLUMNS = ["method", "env", "delta", "N", "seed", "cf_metric", "mean_return", "stderr_return"]
TIMING_COLUMNS = ["method", "env", "delta", "N", "seed", "wall_time"]
ERROR_COLUMNS = ["env", "delta", "N", "seed", "method", "error"]
STAGES = {"sample": 0, "fit": 1, "train": 2, "eval": 3}
PANELS = ("cf_vs_n", "return_vs_cf", "cf_vs_delta")


@dataclass
class ExperimentConfig:
    env: str = "linear"
    delta_grid: list = field(default_factory=lambda: [0.0, 0.5, 1.0, 1.5, 2.0])
    n_grid: list = field(default_factory=lambda: [100, 200, 500, 1000, 2000])
    grid: str = "paper"  # "paper": N sweep at n_sweep_delta plus delta sweep at delta_sweep_n; or "product"
    n_sweep_delta: float = 1.0
    delta_sweep_n: int = 1000
    train_horizon: int = 10
    methods: list = field(default_factory=lambda: list(METHODS))
    seeds: int = 100
    master_seed: int = 0
    regressor: str = "linear"  # applied to both the mean model and FQI
    eval: EvalConfig = field(default_factory=EvalConfig)
    mean_model: MeanModelConfig = field(default_factory=MeanModelConfig)
    fqi: FqiConfig = field(default_factory=FqiConfig)

    def __post_init__(self):
        if not self.delta_grid or not self.n_grid:
            raise ArgumentError("delta_grid and n_grid must be nonempty")
        if self.seeds < 1:
            raise ArgumentError("seeds must be >= 1")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ArgumentError(f"unknown methods {sorted(unknown)}")
        if self.grid not in ("paper", "product"):
            raise ArgumentError("grid must be 'paper' or 'product'")
        if self.regressor not in ("linear", "mlp"):
            raise ArgumentError("regressor must be 'linear' or 'mlp'")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "eval" in d:
            d["eval"] = EvalConfig(**d["eval"])
        if "mean_model" in d:
            mm = dict(d["mean_model"])
            if "train" in mm:
                mm["train"] = TrainConfig(**mm["train"])
            if "hidden" in mm:
                mm["hidden"] = tuple(mm["hidden"])
            d["mean_model"] = MeanModelConfig(**mm)
        if "fqi" in d:
            d["fqi"] = FqiConfig(**d["fqi"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def cells(self) -> list[tuple[float, int]]:
        if self.grid == "product":
            cells = [(float(dl), int(n)) for dl in self.delta_grid for n in self.n_grid]
        else:
            cells = [(float(self.n_sweep_delta), int(n)) for n in self.n_grid]
            cells += [(float(dl), int(self.delta_sweep_n)) for dl in self.delta_grid]
        return sorted(set(cells))


def stage_seed(master_seed: int, env: str, delta: float, n: int, seed_index: int, stage: str) -> int:
    """Pure function of (master seed, cell values, seed index, stage)."""
    cell = zlib.crc32(f"{env}|{float(delta)!r}|{int(n)}".encode())
    ss = np.random.SeedSequence([master_seed, cell, seed_index, STAGES[stage]])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _fmt(x) -> str:
    return format(float(x), ".17g")


def run_cell(config: ExperimentConfig, delta: float, n: int, seed_index: int, methods=None):
    """Train and evaluate the requested methods on one (cell, seed). Returns (rows, timings, errors)."""
    methods = list(methods or config.methods)
    env = make_env({"name": config.env, "delta": delta})

    def seed_for(stage):
        return stage_seed(config.master_seed, config.env, delta, n, seed_index, stage)

    key = {"env": config.env, "delta": _fmt(delta), "N": str(n), "seed": str(seed_index)}
    rows, timings, errors = [], [], []
    try:
        data = sample_dataset(env, n, config.train_horizon, seed_for("sample"))
        mm_cfg = config.mean_model
        mm_cfg = MeanModelConfig(**{
            **mm_cfg.__dict__, "kind": config.regressor,
            "train": TrainConfig(**{**mm_cfg.train.__dict__, "seed": seed_for("fit")}),
        })
        pp = None
        if "ours" in methods:
            mu = fit_transition_mean(data, mm_cfg)
            pp = preprocess(data, mu, estimate_marginals(data))
    except Exception as exc:  # noqa: BLE001 - recorded, sweep continues
        return [], [], [{**key, "method": "*", "error": f"{type(exc).__name__}: {exc}"}]

    fqi_cfg = FqiConfig(**{**config.fqi.__dict__, "regressor": config.regressor, "seed": seed_for("train")})
    eval_cfg = EvalConfig(**{**config.eval.__dict__, "seed": seed_for("eval")})
    for method in methods:
        start = time.perf_counter()
        try:
            policy = train_baseline(method, pp if method == "ours" else data, env, fqi_cfg)
            report = cf_metric(policy, env, cfg=eval_cfg)
        except Exception as exc:  # noqa: BLE001
            log.debug(traceback.format_exc())
            errors.append({**key, "method": method, "error": f"{type(exc).__name__}: {exc}"})
            continue
        rows.append({
            "method": method, **key, "cf_metric": _fmt(report.cf_metric),
            "mean_return": _fmt(report.mean_return), "stderr_return": _fmt(report.stderr_return),
        })
        timings.append({"method": method, **key, "wall_time": f"{time.perf_counter() - start:.6f}"})
    return rows, timings, errors


def _run_task(args):
    return run_cell(*args)


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    @classmethod
    def from_csv(cls, path) -> "ResultTable":
        with open(path, newline="") as fh:
            return cls(list(csv.DictReader(fh)))

    def numeric(self, column: str) -> np.ndarray:
        return np.array([float(r[column]) for r in self.rows])

    def filter(self, **kw) -> "ResultTable":
        def ok(r):
            return all(float(r[k]) == float(v) if k in ("delta", "N") else r[k] == v for k, v in kw.items())

        return ResultTable([r for r in self.rows if ok(r)])

    def summary(self, method: str, column: str, **kw) -> tuple[float, float, int]:
        """Across-seed mean, standard deviation and seed count."""
        vals = self.filter(method=method, **kw).numeric(column)
        if len(vals) == 0:
            raise ArgumentError(f"no rows for method={method} {kw}")
        sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else float("nan")
        return float(np.mean(vals)), sd, len(vals)


def _row_key(r) -> tuple:
    return (float(r["delta"]), int(r["N"]), int(r["seed"]), METHODS.index(r["method"]), r["env"])


def _write_rows(path: Path, columns, rows, mode="w"):
    new = mode == "w" or not path.exists()
    with open(path, mode, newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        if new:
            w.writeheader()
        w.writerows(rows)


def _read_rows(path: Path) -> list:
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        return [r for r in csv.DictReader(fh) if r and None not in r.values()]


def run_experiment(config: ExperimentConfig, out_dir) -> ResultTable:
    """Run every (cell, seed) not already present in ``out_dir/results.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results_path, timings_path, errors_path = out / "results.csv", out / "timings.csv", out / "errors.csv"
    done = {}
    for r in _read_rows(results_path):
        if r["env"] == config.env:
            done.setdefault((float(r["delta"]), int(r["N"]), int(r["seed"])), set()).add(r["method"])
    existing = _read_rows(results_path)
    _write_rows(results_path, RESULT_COLUMNS, existing)

    tasks = []
    for delta, n in config.cells():
        for k in range(config.seeds):
            missing = [m for m in config.methods if m not in done.get((delta, n, k), set())]
            if missing:
                tasks.append((config, delta, n, k, missing))
    log.info("%d (cell, seed) tasks to run", len(tasks))

    workers = max(int(os.environ.get("CFRL_THREADS", "1")), 1)
    errors = []
    if workers == 1 or len(tasks) <= 1:
        outputs = map(_run_task, tasks)
        pool = None
    else:
        pool = ProcessPoolExecutor(max_workers=workers)
        outputs = pool.map(_run_task, tasks)
    try:
        for rows, timings, errs in outputs:
            _write_rows(results_path, RESULT_COLUMNS, rows, mode="a")
            _write_rows(timings_path, TIMING_COLUMNS, timings, mode="a")
            errors.extend(errs)
    finally:
        if pool is not None:
            pool.shutdown()

    final = sorted(_read_rows(results_path), key=_row_key)
    _write_rows(results_path, RESULT_COLUMNS, final)
    if errors:
        _write_rows(errors_path, ERROR_COLUMNS, errors, mode="a")
        log.warning("%d failures recorded in %s", len(errors), errors_path)
    return ResultTable(final)


def _pick(table: ResultTable, fixed: str, varying: str):
    """Value of ``fixed`` column under which ``varying`` takes the most distinct values."""
    counts = {}
    for r in table.rows:
        counts.setdefault(float(r[fixed]), set()).add(float(r[varying]))
    return max(sorted(counts), key=lambda v: len(counts[v]))


def _ci(vals: np.ndarray) -> float:
    return 1.96 * np.std(vals, ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else float("nan")


def plot_trends(table: ResultTable, panel: str, out_svg, delta: float | None = None, n: int | None = None) -> Path:
    """Per-method mean curves with 95% normal-approximation bands (omitted for a single seed)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if panel not in PANELS:
        raise ArgumentError(f"panel must be one of {PANELS}")
    if not table.rows:
        raise ArgumentError("result table is empty")
    missing = set(RESULT_COLUMNS) - set(table.rows[0])
    if missing:
        raise ArgumentError(f"result table lacks columns {sorted(missing)}")

    if panel == "cf_vs_delta":
        n = n if n is not None else _pick(table, "N", "delta")
        sub, xcol, xlabel = table.filter(N=n), "delta", "delta"
        title = f"CF metric vs delta (N={int(n)})"
    else:
        delta = delta if delta is not None else _pick(table, "delta", "N")
        sub, xcol, xlabel = table.filter(delta=delta), "N", "N"
        title = ("CF metric vs N" if panel == "cf_vs_n" else "Discounted return vs CF metric") + f" (delta={delta:g})"

    plt.rcParams["svg.hashsalt"] = "cfrl"
    fig, ax = plt.subplots(figsize=(5.5, 4))
    methods = [m for m in METHODS if any(r["method"] == m for r in sub.rows)]
    for method in methods:
        rows = sub.filter(method=method)
        xs = sorted({float(r[xcol]) for r in rows.rows})
        stats = []
        for x in xs:
            cell = rows.filter(**{xcol: x})
            cf, ret = cell.numeric("cf_metric"), cell.numeric("mean_return")
            stats.append((cf.mean(), _ci(cf), ret.mean(), _ci(ret)))
        cf_m, cf_ci, ret_m, ret_ci = map(np.array, zip(*stats))
        if panel == "return_vs_cf":
            ax.plot(cf_m, ret_m, marker="o", label=method)
            if np.all(np.isfinite(cf_ci)):
                ax.errorbar(cf_m, ret_m, xerr=cf_ci, yerr=ret_ci, fmt="none", alpha=0.4)
        else:
            ax.plot(xs, cf_m, marker="o", label=method)
            if np.all(np.isfinite(cf_ci)) and len(xs) > 1:
                ax.fill_between(xs, cf_m - cf_ci, cf_m + cf_ci, alpha=0.2)
    if panel == "return_vs_cf":
        ax.set_xlabel("CF metric")
        ax.set_ylabel("discounted return")
    else:
        ax.set_xlabel(xlabel)
        ax.set_ylabel("CF metric")
        if xcol == "N":
            ax.set_xscale("log")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    out_svg = Path(out_svg)
    out_svg.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_svg, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out_svg
