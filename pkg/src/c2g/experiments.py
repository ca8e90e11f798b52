"""Experiment orchestration: seed sweeps, metrics, and incremental output.

The benchmark runner generates data per seed, fits the requested methods,
evaluates FDR/power at each nominal level, reports interval estimands with a
Jaccard comparison against the oracle where truth is analytic, and streams
per-seed rows to disk in seed order as they complete (regardless of worker
count). Aggregates are recomputable bit-for-bit from the per-seed rows.
"""

import json
import time
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .additive import AdditiveC2G
from .dataset import Dataset, save_dataset
from .density import NearestNeighborCDE
from .nonparametric import DEFAULT_ALPHA_GRID, NonparametricC2G, OracleC2G
from .selection import (
    PosteriorScores,
    bh_procedure,
    fdr_metric,
    frequentist_pvalues,
    jaccard_intervals,
    normal_ci_halfwidth,
    power_metric,
    select_by_average,
    valid_power,
)
from .simulate import SCENARIOS, generate, true_posteriors

METHODS = ("add-c2g", "np-c2g", "np-oracle", "frequentist-bh")

METRIC_COLUMNS = (
    "method", "scenario", "n", "d", "tau", "alpha", "seed",
    "fdp", "power", "n_selected", "erpf", "are_lo", "are_hi", "jaccard_oracle", "error",
)
CURVE_COLUMNS = ("method", "scenario", "seed", "alpha", "n_selected", "fdp", "power")
AGGREGATE_COLUMNS = (
    "method", "alpha", "n_seeds", "mean_fdr", "ci95_fdr",
    "mean_power", "ci95_power", "valid_power", "mean_jaccard",
)


class EstimatorError(RuntimeError):
    """An estimator failed on otherwise valid inputs."""


@dataclass
class ExperimentConfig:
    """Fully resolved settings of one benchmark sweep."""

    scenario: str = "additive"
    n: int = 1000
    d: int = 10
    tau: float = 5.0
    seeds: tuple = (0,)
    alpha_grid: tuple = (0.05, 0.1, 0.25)
    methods: tuple = ("add-c2g", "np-c2g")
    out_dir: str = "results"
    workers: int = 1
    add_params: dict = field(default_factory=dict)
    np_params: dict = field(default_factory=dict)

    def validate(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; expected one of {SCENARIOS}")
        if self.n < 2 or self.d < 1:
            raise ValueError("need n >= 2 and d >= 1")
        if len(self.seeds) == 0:
            raise ValueError("seeds must be non-empty")
        alphas = tuple(float(a) for a in self.alpha_grid)
        if not alphas or any(not 0.0 < a < 1.0 for a in alphas):
            raise ValueError("alpha_grid values must lie in (0, 1)")
        if list(alphas) != sorted(alphas):
            raise ValueError("alpha_grid must be sorted ascending")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}; expected a subset of {METHODS}")
        if not self.methods:
            raise ValueError("methods must be non-empty")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        cfg = cls(**raw)
        for key in ("seeds", "alpha_grid", "methods"):
            setattr(cfg, key, tuple(getattr(cfg, key)))
        return cfg


def _fit_method(method, ds: Dataset, truth, config: ExperimentConfig, seed):
    """Fit one method; returns (per-alpha selector, estimand report or None)."""
    treated = np.flatnonzero(ds.t == 1)
    if method == "add-c2g":
        model = AdditiveC2G(seed=seed, **config.add_params).fit(ds.x, ds.y, ds.t)
        return model.select, model.estimands()
    if method == "np-c2g":
        model = NonparametricC2G(seed=seed, **config.np_params).fit(ds.x, ds.y, ds.t)
        return model.select, model.estimands()
    if method == "np-oracle":
        model = OracleC2G(ds, truth)
        return model.select, model.estimands()
    if method == "frequentist-bh":
        untreated = np.flatnonzero(ds.t == 0)
        f0 = NearestNeighborCDE(
            h1_grid=config.np_params.get("h1_grid"),
            h2_grid=config.np_params.get("h2_grid"),
            k_grid=config.np_params.get("k_grid"),
        ).fit(ds.x[untreated], ds.y[untreated])
        pad = 6.0 * f0.h2_
        y_grid = np.linspace(ds.y.min() - pad, ds.y.max() + pad, 401)
        pvalues = frequentist_pvalues(f0, ds.x[treated], ds.y[treated], y_grid)

        def select(alpha):
            local = bh_procedure(pvalues, alpha)
            return _BhSelection(treated[local], alpha)

        return select, None
    raise ValueError(f"unknown method {method!r}")


@dataclass
class _BhSelection:
    selected: np.ndarray
    level: float

    @property
    def n_selected(self):
        return int(self.selected.size)


def run_seed(config: ExperimentConfig, seed: int) -> list[dict]:
    """All metric rows for one seed; method failures become error rows."""
    ds, truth = generate(config.scenario, config.n, d=config.d, tau=config.tau, seed=seed)
    h = ds.h
    rows = []
    oracle_interval = None
    need_jaccard = "np-c2g" in config.methods and truth.analytic
    if need_jaccard or "np-oracle" in config.methods:
        try:
            oracle_report = OracleC2G(ds, truth).estimands()
            oracle_interval = oracle_report.are_interval
        except ValueError:
            oracle_interval = None

    for method in config.methods:
        base = {
            "method": method, "scenario": config.scenario, "n": config.n,
            "d": config.d, "tau": config.tau, "seed": seed,
        }
        try:
            start = time.monotonic()
            select, report = _fit_method(method, ds, truth, config, seed)
            elapsed = time.monotonic() - start
            jaccard = ""
            if method == "np-c2g" and report is not None and oracle_interval is not None:
                jaccard = jaccard_intervals([report.are_interval], [oracle_interval])
            for alpha in config.alpha_grid:
                sel = select(alpha)
                rows.append({
                    **base,
                    "alpha": alpha,
                    "fdp": fdr_metric(sel.selected, h),
                    "power": power_metric(sel.selected, h),
                    "n_selected": sel.n_selected,
                    "erpf": report.erpf if report is not None else "",
                    "are_lo": report.are_lo if report is not None else "",
                    "are_hi": report.are_hi if report is not None else "",
                    "jaccard_oracle": jaccard,
                    "error": "",
                    "seconds": elapsed,
                })
        except Exception as exc:  # recorded, run continues
            for alpha in config.alpha_grid:
                rows.append({
                    **base, "alpha": alpha, "fdp": "", "power": "", "n_selected": "",
                    "erpf": "", "are_lo": "", "are_hi": "", "jaccard_oracle": "",
                    "error": f"{type(exc).__name__}: {exc}", "seconds": "",
                })
    return rows


def _format(value):
    if isinstance(value, float):
        return "%.17g" % value
    return str(value)


class _StreamingCsv:
    """Appends rows as they arrive, flushing after every write."""

    def __init__(self, path, columns, header_comment):
        self.path = Path(path)
        self.columns = columns
        with open(self.path, "w", encoding="utf-8") as fh:
            fh.write(f"# {header_comment}\n")
            fh.write(",".join(columns) + "\n")

    def write_rows(self, rows):
        with open(self.path, "a", encoding="utf-8") as fh:
            for row in rows:
                fh.write(",".join(_format(row.get(c, "")) for c in self.columns) + "\n")
            fh.flush()


def aggregate_rows(rows, alpha_grid):
    """Aggregate per-seed metric rows into the summary table."""
    out = []
    methods = sorted({r["method"] for r in rows if not r.get("error")})
    for method in methods:
        sub = [r for r in rows if r["method"] == method and not r.get("error")]
        alphas = np.asarray(sorted({float(r["alpha"]) for r in sub}))
        fdr_mean, power_mean, halfwidths = [], [], []
        for alpha in alphas:
            fd = np.asarray([float(r["fdp"]) for r in sub if float(r["alpha"]) == alpha])
            pw = np.asarray([float(r["power"]) for r in sub if float(r["alpha"]) == alpha])
            pw = pw[np.isfinite(pw)]
            fdr_mean.append(float(np.mean(fd)))
            power_mean.append(float(np.mean(pw)) if pw.size else float("nan"))
            halfwidths.append(normal_ci_halfwidth(fd))
        jac = [float(r["jaccard_oracle"]) for r in sub if r.get("jaccard_oracle") != ""]
        for i, alpha in enumerate(alphas):
            pw = np.asarray([float(r["power"]) for r in sub if float(r["alpha"]) == alpha])
            fd = np.asarray([float(r["fdp"]) for r in sub if float(r["alpha"]) == alpha])
            out.append({
                "method": method,
                "alpha": float(alpha),
                "n_seeds": int(fd.size),
                "mean_fdr": fdr_mean[i],
                "ci95_fdr": halfwidths[i],
                "mean_power": power_mean[i],
                "ci95_power": normal_ci_halfwidth(pw),
                "valid_power": valid_power(alphas, fdr_mean, power_mean, halfwidths, alpha),
                "mean_jaccard": float(np.mean(jac)) if jac else "",
            })
    return out


def run_benchmark(config: ExperimentConfig, on_rows=None):
    """Run the sweep, streaming per-seed rows; returns output paths.

    ``on_rows(seed, metrics_path)`` is called after each seed's rows hit disk
    (in seed order); results are deterministic for any worker count.
    """
    config.validate()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = f"config: {config.to_json()}"
    metrics = _StreamingCsv(out / "metrics.csv", METRIC_COLUMNS + ("seconds",), header)
    curves = _StreamingCsv(out / "curves.csv", CURVE_COLUMNS, header)

    all_rows = []

    def emit(seed, rows):
        metrics.write_rows(rows)
        curves.write_rows([r for r in rows if not r.get("error")])
        all_rows.extend(rows)
        if on_rows is not None:
            on_rows(seed, metrics.path)

    seeds = list(config.seeds)
    if config.workers == 1 or len(seeds) == 1:
        for seed in seeds:
            emit(seed, run_seed(config, seed))
    else:
        pending = {}
        next_up = 0
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            futures = {pool.submit(run_seed, config, seed): i for i, seed in enumerate(seeds)}
            remaining = set(futures)
            while remaining:
                done, remaining = wait(remaining, return_when=FIRST_COMPLETED)
                for fut in done:
                    pending[futures[fut]] = fut.result()
                while next_up in pending:  # flush in seed order
                    emit(seeds[next_up], pending.pop(next_up))
                    next_up += 1

    agg = aggregate_rows(all_rows, config.alpha_grid)
    agg_csv = _StreamingCsv(out / "aggregate.csv", AGGREGATE_COLUMNS, header)
    agg_csv.write_rows(agg)
    return {"metrics": str(metrics.path), "curves": str(curves.path), "aggregate": str(agg_csv.path)}


def simulate_to_files(config: ExperimentConfig):
    """Write one dataset CSV plus truth JSON sidecar per seed."""
    config.validate()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for seed in config.seeds:
        ds, truth = generate(config.scenario, config.n, d=config.d, tau=config.tau, seed=seed)
        stem = f"{config.scenario}_n{config.n}_tau{config.tau:g}_seed{seed}"
        csv_path = out / f"{stem}.csv"
        save_dataset(ds, csv_path, header_comment=f"config: {config.to_json()} seed: {seed}")
        truth_path = out / f"{stem}.truth.json"
        payload = json.loads(truth.to_json())
        payload["config"] = json.loads(config.to_json())
        truth_path.write_text(json.dumps(payload, indent=1, sort_keys=True), encoding="utf-8")
        paths.append((str(csv_path), str(truth_path)))
    return paths


def fit_select_result(ds: Dataset, method: str, alpha: float, config: ExperimentConfig,
                      truth=None, seed: int = 0) -> dict:
    """Fit one method on one dataset and package the selection as JSON-ready."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if method == "np-oracle" and (truth is None or ds.h is None):
        raise ValueError("np-oracle requires simulation truth (dataset has none)")
    treated = np.flatnonzero(ds.t == 1)
    payload = {
        "method": method,
        "alpha": alpha,
        "seed": seed,
        "config": json.loads(config.to_json()),
        "treated_indices": treated.tolist(),
    }
    if alpha == 0.0:
        payload.update({"selected": [], "estimated_fdr": 0.0, "level": 0.0})
        return payload
    try:
        select, report = _fit_method(method, ds, truth, config, seed)
    except ValueError:
        raise
    except Exception as exc:
        raise EstimatorError(f"{method} failed: {type(exc).__name__}: {exc}") from exc
    sel = select(alpha)
    payload["selected"] = np.asarray(sel.selected).tolist()
    payload["level"] = float(getattr(sel, "level", alpha))
    payload["estimated_fdr"] = float(getattr(sel, "estimated_fdr", float("nan")))
    if report is not None:
        payload["estimands"] = {
            "erpf": report.erpf,
            "are_lo": report.are_lo,
            "are_hi": report.are_hi,
            "care_lo": np.asarray(report.care_lo).tolist(),
            "care_hi": np.asarray(report.care_hi).tolist(),
            "n_unbounded": report.n_unbounded,
        }
        if report.pi_star is not None:
            payload["pi"] = np.asarray(report.pi_star).tolist()
    return payload
