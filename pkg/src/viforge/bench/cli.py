"""Command-line entry point.

    viforge <experiment> --model {mlp,gbdt} --seed S --config FILE --out DIR [--replicates R]
    viforge vi --data FILE --target COL --drop j,k --method {earlystop,dropout,retrain}
    viforge shapley --data FILE --target COL --samples M
    viforge diag --data FILE --target COL --sigma S

Exit codes: 0 success, 2 configuration error, 3 budget error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .. import importance as imp
from .. import models
from ..data import DropSpec, SplitPlan, drop_features, load_csv, split, standardize
from ..errors import BudgetError, ConfigError, InvalidArgumentError, NumericOverflowError, ParseError
from ..numerics import RngStream
from .config import EXPERIMENTS, default_config, load_config
from .experiments import (fit_full, make_policy, run_experiment, summarize, vi_estimates,
                          warm_start_kernel, write_outputs)
from ..stopping import diagnose, fit_from_scratch

log = logging.getLogger("viforge")

METHOD_ALIASES = {"earlystop": "early_stop", "early_stop": "early_stop", "dropout": "dropout",
                  "retrain": "retrain"}


def _common(p):
    p.add_argument("--model", choices=("mlp", "gbdt"))
    p.add_argument("--seed", type=int)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a single config key (repeatable)")


def build_parser():
    ap = argparse.ArgumentParser(prog="viforge", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for exp in EXPERIMENTS:
        p = sub.add_parser(exp, help=f"run the {exp} experiment")
        _common(p)
        p.add_argument("--out", help="output directory")
        p.add_argument("--replicates", type=int)
        p.add_argument("--workers", type=int)
        if exp == "real-csv":
            p.add_argument("--data")
            p.add_argument("--target")

    p = sub.add_parser("vi", help="variable importance of a feature subset on a CSV file")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--drop", required=True, help="comma-separated 0-based column indices or names")
    p.add_argument("--method", default="earlystop", choices=sorted(METHOD_ALIASES))
    p.add_argument("--alpha", type=float, default=0.05)

    p = sub.add_parser("shapley", help="sampled Shapley values on a CSV file")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--method", default="earlystop", choices=sorted(METHOD_ALIASES))
    p.add_argument("--exact", action="store_true")

    p = sub.add_parser("diag", help="stopping-rule diagnostics at the warm start")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--drop", default="0")
    p.add_argument("--sigma", type=float, default=1.0, help="noise level assumed by the stopping rule")
    return ap


def _parse_sets(items):
    from .config import parse_config_text

    return parse_config_text("\n".join(items))


def _resolve(args, experiment):
    overrides = _parse_sets(args.set)
    for key in ("model", "seed", "replicates", "workers", "data", "target"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if getattr(args, "out", None):
        overrides["out_dir"] = args.out
    if args.config:
        return load_config(args.config, experiment, **overrides)
    return default_config(experiment, **overrides)


def _columns(spec, d):
    out = []
    for tok in (t.strip() for t in spec.split(",") if t.strip()):
        if tok.lstrip("-").isdigit():
            out.append(int(tok))
        elif d.feature_names and tok in d.feature_names:
            out.append(d.feature_names.index(tok))
        else:
            raise ConfigError(f"unknown column {tok!r}")
    return out


def _prepare(args, experiment="real-csv"):
    cfg = _resolve(args, experiment)
    d = load_csv(args.data, args.target)
    if cfg.standardize:
        d = standardize(d)
    rng = RngStream(cfg.seed)
    train, hold = split(d, SplitPlan(cfg.q, rng.child("split")))
    return cfg, d, rng, train, hold


def cmd_vi(args):
    cfg, d, rng, train, hold = _prepare(args)
    features = _columns(args.drop, d)
    learner, full, _ = fit_full(cfg, train, rng)
    method = METHOD_ALIASES[args.method]
    est = vi_estimates(cfg, learner, full, train, hold, features, rng, methods=(method,))[method]
    est = imp.wald_ci(est, args.alpha)
    return est.to_record(cfg.seed)


def cmd_shapley(args):
    cfg, d, rng, train, hold = _prepare(args)
    learner, full, _ = fit_full(cfg, train, rng)
    method = METHOD_ALIASES[args.method]
    est = imp.shapley(learner, full, train, hold, args.samples, "exact" if args.exact else "sampled",
                      method, make_policy(cfg), rng.child(method))
    return est.to_records(cfg.seed, d.feature_names)


def cmd_diag(args):
    """The reduced target is unknown on real data; a reduced model retrained
    from scratch stands in for it when measuring the start-to-target gap."""
    cfg, d, rng, _, _ = _prepare(args)
    features = _columns(args.drop, d)
    learner, full, _ = fit_full(cfg, d, rng)
    dd = drop_features(d, DropSpec.from_means(d, features))
    k, step, full = warm_start_kernel(learner, full, dd.x)
    proxy, _ = fit_from_scratch(learner, dd, make_policy(cfg), rng.child("retrain"))
    c = models.predict(full, dd.x) - models.predict(proxy, dd.x)
    out = diagnose(k, c, args.sigma, step).to_dict()
    out["dropped"] = features
    return out


def _emit(obj):
    json.dump(obj, sys.stdout, indent=2, default=lambda o: o.tolist() if isinstance(o, np.ndarray) else str(o))
    sys.stdout.write("\n")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "vi":
            _emit(cmd_vi(args))
        elif args.command == "shapley":
            _emit(cmd_shapley(args))
        elif args.command == "diag":
            _emit(cmd_diag(args))
        else:
            cfg = _resolve(args, args.command)
            log.info("running %s with %s", cfg.experiment, cfg)
            records = run_experiment(cfg)
            out = write_outputs(cfg, records)
            _emit({"out_dir": str(out), "records": len(records), "summary": summarize(cfg, records)})
    except (ConfigError, ParseError, InvalidArgumentError, OSError) as exc:
        print(f"viforge: error: {exc}", file=sys.stderr)
        return 2
    except NumericOverflowError as exc:
        print(f"viforge: training diverged: {exc}", file=sys.stderr)
        return 2
    except BudgetError as exc:
        print(f"viforge: budget exceeded: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
