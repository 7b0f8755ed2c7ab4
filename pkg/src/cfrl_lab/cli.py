"""Command-line entry point: ``cfrl <subcommand> ...``.

Failures exit nonzero with a one-line JSON object on stderr:
``{"error": <exception class>, "message": <text>}``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .cmdp import make_env, sample_dataset
from .errors import ArgumentError, CfrlError
from .evaluation import EvalConfig, cf_metric
from .experiment import PANELS, ExperimentConfig, ResultTable, plot_trends, run_experiment
from .io import load_dataset, load_policy, load_preprocessed, save_dataset, save_policy, save_preprocessed, write_json
from .policy import METHODS, FqiConfig, train_baseline
from .preprocess import MeanModelConfig, estimate_marginals, fit_transition_mean, preprocess

EXIT_USAGE = 2
EXIT_FAILURE = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ArgumentError(message)


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ArgumentError(f"config {path} is not valid JSON: {exc}") from exc


def _env_params(args, cfg: dict) -> dict:
    params = dict(cfg.get("env", {})) if isinstance(cfg.get("env"), dict) else {}
    if isinstance(cfg.get("env"), str):
        params["name"] = cfg["env"]
    if args.env is not None:
        params["name"] = args.env
    if args.delta is not None:
        params["delta"] = args.delta
    params.setdefault("name", "linear")
    params.setdefault("delta", cfg.get("delta", 1.0))
    return params


def cmd_simulate(args) -> dict:
    cfg = _load_config(args.config)
    env = make_env(_env_params(args, cfg))
    n = args.n if args.n is not None else cfg.get("n", 1000)
    horizon = args.horizon if args.horizon is not None else cfg.get("horizon", 10)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    data = sample_dataset(env, n, horizon, seed)
    csv_path, json_path = save_dataset(data, args.out, include_noises=not args.no_noises)
    return {"dataset": str(csv_path), "sidecar": str(json_path), "n": data.n, "horizon": data.horizon}


def _mean_model_config(cfg: dict) -> MeanModelConfig:
    from .regression import TrainConfig

    mm = dict(cfg.get("mean_model", {}))
    if "train" in mm:
        mm["train"] = TrainConfig(**mm["train"])
    if "hidden" in mm:
        mm["hidden"] = tuple(mm["hidden"])
    return MeanModelConfig(**mm)


def _preprocessed(data, cfg):
    mu = fit_transition_mean(data, _mean_model_config(cfg))
    return preprocess(data, mu, estimate_marginals(data))


def cmd_preprocess(args) -> dict:
    cfg = _load_config(args.config)
    data = load_dataset(args.data)
    pp = _preprocessed(data, cfg)
    csv_path, json_path = save_preprocessed(pp, args.out)
    return {"preprocessed": str(csv_path), "header": str(json_path)}


def cmd_train(args) -> dict:
    cfg = _load_config(args.config)
    fqi_cfg = FqiConfig(**cfg.get("fqi", {}))
    env = None
    data = None
    if args.data is not None:
        data = load_dataset(args.data)
        if data.env_params is not None:
            env = make_env(data.env_params)
    if args.method == "ours":
        if args.preprocessed is not None:
            source = load_preprocessed(args.preprocessed)
        elif data is not None:
            source = _preprocessed(data, cfg)
        else:
            raise ArgumentError("method 'ours' needs --data or --preprocessed")
    else:
        if data is None:
            raise ArgumentError(f"method {args.method!r} needs --data")
        source = data
    policy = train_baseline(args.method, source, env, fqi_cfg)
    path = save_policy(policy, args.out)
    return {"policy": str(path), "method": args.method, "contract": policy.contract}


def cmd_evaluate(args) -> dict:
    cfg = _load_config(args.config)
    env = make_env(_env_params(args, cfg))
    ev = dict(cfg.get("eval", {}))
    for key in ("n_subjects", "horizon", "gamma", "seed"):
        if getattr(args, key) is not None:
            ev[key] = getattr(args, key)
    report = cf_metric(load_policy(args.policy), env, cfg=EvalConfig(**ev)).to_dict()
    if args.out is not None:
        write_json(report, args.out)
    return report


def cmd_experiment(args) -> dict:
    config = ExperimentConfig.from_dict(_load_config(args.config))
    if args.seeds is not None:
        config.seeds = args.seeds
    out = Path(args.out)
    table = run_experiment(config, out)
    outputs = {"results": str(out / "results.csv"), "rows": len(table)}
    if not args.no_plots and len(table):
        outputs["plots"] = [str(plot_trends(table, p, out / f"{p}.svg")) for p in PANELS]
    return outputs


def cmd_plot(args) -> dict:
    table = ResultTable.from_csv(args.results)
    path = plot_trends(table, args.panel, args.out, delta=args.delta, n=args.n)
    return {"plot": str(path)}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cfrl", description="Counterfactually fair offline RL experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def env_args(sp):
        sp.add_argument("--env", choices=["linear", "nonlinear"])
        sp.add_argument("--delta", type=float)
        sp.add_argument("--config", help="JSON config file")

    s = sub.add_parser("simulate", help="sample a behaviour-policy dataset")
    env_args(s)
    s.add_argument("--n", type=int)
    s.add_argument("--horizon", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--no-noises", action="store_true", help="omit noise records from the sidecar")
    s.add_argument("--out", required=True, help="output stem; writes <stem>.csv and <stem>.json")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("preprocess", help="fit the mean model and write augmented tuples")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train one method and write its policy JSON")
    s.add_argument("--method", required=True, choices=list(METHODS))
    s.add_argument("--data")
    s.add_argument("--preprocessed")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="CF metric and discounted return of a policy")
    env_args(s)
    s.add_argument("--policy", required=True)
    s.add_argument("--n-subjects", dest="n_subjects", type=int)
    s.add_argument("--horizon", type=int)
    s.add_argument("--gamma", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("experiment", help="run a seeded sweep and plot it")
    s.add_argument("--config")
    s.add_argument("--seeds", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("plot", help="render one trend panel from results.csv")
    s.add_argument("--results", required=True)
    s.add_argument("--panel", required=True, choices=list(PANELS))
    s.add_argument("--delta", type=float)
    s.add_argument("--n", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        result = args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (CfrlError, ValueError, TypeError, KeyError, OSError) as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return EXIT_USAGE if isinstance(exc, ArgumentError) else EXIT_FAILURE
    json.dump(result, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
