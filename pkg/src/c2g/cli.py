"""Command-line interface.

Subcommands: ``simulate`` (write synthetic datasets plus truth sidecars),
``fit-select`` (fit one method on a dataset and select at a level),
``benchmark`` (seed sweep with streamed metrics, curves, and aggregates), and
``metrics`` (score a fit-select result against truth labels). Flags override
keys of the JSON config given via ``--config``. Exit codes: 0 success, 2
validation error, 3 estimator failure.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .dataset import load_dataset
from .experiments import (
    METHODS,
    EstimatorError,
    ExperimentConfig,
    fit_select_result,
    run_benchmark,
    simulate_to_files,
)
from .selection import fdr_metric, power_metric
from .simulate import GeneratorTruth

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_ESTIMATOR = 3


def _parse_floats(text):
    return tuple(float(v) for v in text.split(","))


def _parse_ints(text):
    return tuple(int(v) for v in text.split(","))


def build_parser():
    parser = argparse.ArgumentParser(prog="c2g", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override its keys")
        p.add_argument("--scenario", help="additive | nonadditive | response | effect | canonical | total")
        p.add_argument("--n", type=int, help="number of samples")
        p.add_argument("--d", type=int, help="covariate dimension")
        p.add_argument("--tau", type=float, help="effect size parameter")
        p.add_argument("--seeds", type=_parse_ints, help="comma-separated seeds")
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int, help="parallel seed workers")

    p_sim = sub.add_parser("simulate", help="generate synthetic datasets")
    common(p_sim)

    p_fit = sub.add_parser("fit-select", help="fit one method and select responders")
    common(p_fit)
    p_fit.add_argument("--dataset", required=True, help="dataset CSV path")
    p_fit.add_argument("--truth", help="truth JSON sidecar (required for np-oracle)")
    p_fit.add_argument("--method", required=True, choices=METHODS)
    p_fit.add_argument("--alpha", type=float, required=True, help="nominal FDR level")
    p_fit.add_argument("--seed", type=int, default=0, help="estimator seed")

    p_bench = sub.add_parser("benchmark", help="run a seed sweep and write metric tables")
    common(p_bench)
    p_bench.add_argument("--alpha", type=_parse_floats, dest="alpha_grid",
                         help="comma-separated nominal FDR levels")
    p_bench.add_argument("--method", type=lambda s: tuple(s.split(",")), dest="methods",
                         help="comma-separated methods")

    p_metrics = sub.add_parser("metrics", help="score a fit-select result against truth")
    p_metrics.add_argument("--results", required=True, help="fit-select output JSON")
    p_metrics.add_argument("--dataset", required=True, help="dataset CSV with an h column")
    p_metrics.add_argument("--out", help="optional output JSON path")
    return parser


def _load_config(args) -> ExperimentConfig:
    raw = {}
    if getattr(args, "config", None):
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    overrides = {
        "scenario": getattr(args, "scenario", None),
        "n": getattr(args, "n", None),
        "d": getattr(args, "d", None),
        "tau": getattr(args, "tau", None),
        "seeds": getattr(args, "seeds", None),
        "out_dir": getattr(args, "out", None),
        "workers": getattr(args, "workers", None),
        "alpha_grid": getattr(args, "alpha_grid", None),
        "methods": getattr(args, "methods", None),
    }
    for key, value in overrides.items():
        if value is not None:
            raw[key] = value
    return ExperimentConfig.from_dict(raw).validate()


def cmd_simulate(args):
    config = _load_config(args)
    for csv_path, truth_path in simulate_to_files(config):
        print(f"wrote {csv_path} and {truth_path}")
    return EXIT_OK


def cmd_fit_select(args):
    config = _load_config(args)
    ds = load_dataset(args.dataset)
    truth = None
    if args.truth:
        truth = GeneratorTruth.from_json(Path(args.truth).read_text(encoding="utf-8"))
    if not 0.0 <= args.alpha < 1.0:
        raise ValueError(f"alpha must lie in [0, 1), got {args.alpha}")
    payload = fit_select_result(ds, args.method, args.alpha, config, truth=truth, seed=args.seed)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"fit_select_{args.method}_alpha{args.alpha:g}.json"
    path.write_text(json.dumps(payload, indent=1, sort_keys=True), encoding="utf-8")
    print(f"wrote {path} ({len(payload['selected'])} selected)")
    return EXIT_OK


def cmd_benchmark(args):
    config = _load_config(args)
    paths = run_benchmark(config)
    for kind, path in paths.items():
        print(f"wrote {kind}: {path}")
    return EXIT_OK


def cmd_metrics(args):
    payload = json.loads(Path(args.results).read_text(encoding="utf-8"))
    ds = load_dataset(args.dataset, has_truth=True)
    selected = np.asarray(payload["selected"], dtype=np.intp)
    scores = {
        "method": payload.get("method"),
        "alpha": payload.get("alpha"),
        "n_selected": int(selected.size),
        "fdp": fdr_metric(selected, ds.h),
        "power": power_metric(selected, ds.h),
    }
    text = json.dumps(scores, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text)
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "simulate": cmd_simulate,
        "fit-select": cmd_fit_select,
        "benchmark": cmd_benchmark,
        "metrics": cmd_metrics,
    }
    try:
        return handlers[args.command](args)
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except EstimatorError as exc:
        print(f"estimator failure: {exc}", file=sys.stderr)
        return EXIT_ESTIMATOR


if __name__ == "__main__":
    sys.exit(main())
