"""Desk-scale experiment runners. Each returns a list of ``RunRecord`` sorted by
(grid point, replicate); ``summarize`` aggregates them."""
from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path

import numpy as np

from .. import gbdt, mlp, models
from .. import importance as imp
from ..data import (Dataset, DropSpec, SplitPlan, drop_features, gen_correlated_linear,
                    gen_discrete_uniform, gen_highdim, gen_logistic, load_csv, split,
                    standardize)
from ..errors import ConfigError
from ..numerics import RngStream
from ..stopping import FixedT, KernelMatrix, Patience, diagnose, early_stop_train, fit_from_scratch
from .config import SCHEMA_VERSION, ExperimentConfig, RunRecord

TEACHER_WIDTH = 64
RATE_BETA1 = 3.0


def make_learner(cfg: ExperimentConfig):
    if cfg.model == "mlp":
        return mlp.MlpLearner(hidden=(cfg.width,), auto_step=cfg.auto_step, eta0=cfg.eta0, activation=cfg.activation,
                              parameterization=cfg.parameterization)
    return gbdt.GbdtLearner(depth=cfg.depth, borders=cfg.borders, beta=cfg.tree_beta,
                            epsilon=cfg.epsilon, max_iters=cfg.max_epochs)


def make_policy(cfg: ExperimentConfig) -> Patience:
    return Patience(cfg.patience, cfg.q, cfg.max_epochs)


def _replicate_rng(cfg, replicate, *path):
    rng = RngStream(cfg.seed).child(replicate)
    for key in path:
        rng = rng.child(key)
    return rng


def _map(fn, cfg, items):
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            out = list(pool.map(partial(fn, cfg), items))
    else:
        out = [fn(cfg, it) for it in items]
    return [rec for group in out for rec in group]


def fit_full(cfg, train: Dataset, rng: RngStream):
    learner = make_learner(cfg)
    t0 = time.perf_counter()
    full, hist = fit_from_scratch(learner, train, make_policy(cfg), rng.child("full"))
    return learner, full, 1e3 * (time.perf_counter() - t0)


def vi_estimates(cfg, learner, full, train, holdout, features, rng, methods=None):
    out = {}
    policy = make_policy(cfg)
    for method in methods or cfg.methods:
        if method == "early_stop":
            out[method] = imp.estimate_vi_earlystop(learner, full, train, holdout, features, policy,
                                                    rng.child("early_stop"))
        elif method == "dropout":
            out[method] = imp.estimate_vi_dropout(full, train, holdout, features)
        else:
            out[method] = imp.estimate_vi_retrain(learner, full, train, holdout, features, policy,
                                                  rng.child("retrain"))
    return out


# rate ----------------------------------------------------------------------------

def _rate_problem(cfg, n, rng):
    """Features, responses and the reduced target f_{0,-1} evaluated on rows."""
    if cfg.model == "gbdt":
        levels = 4
        table = rng.child("teacher").generator().standard_normal((levels,) * (cfg.p - 1))

        def draw(m, stream):
            return gen_discrete_uniform(cfg.p, m, stream)

        def reduced(x):
            # column j holds integers j .. j+3 (0-based j); X1 has mean 1.5
            cells = tuple((x[:, j] - j).astype(int) for j in range(1, cfg.p))
            return table[cells] + RATE_BETA1 * 1.5
    else:
        g = rng.child("teacher").generator()
        w = g.standard_normal((TEACHER_WIDTH, cfg.p - 1))
        v = g.standard_normal(TEACHER_WIDTH)

        def draw(m, stream):
            return stream.generator().standard_normal((m, cfg.p))

        def reduced(x):
            return np.maximum(x[:, 1:] @ w.T, 0.0) @ v / math.sqrt(TEACHER_WIDTH)

    def full_target(x):
        return reduced(x) + RATE_BETA1 * (x[:, 0] - (1.5 if cfg.model == "gbdt" else 0.0))

    x = draw(n, rng.child("data"))
    y = full_target(x) + cfg.noise_sd * rng.child("noise").generator().standard_normal(n)
    return Dataset(x, y), reduced, draw


def warm_start_kernel(learner, full, x_dropped):
    """Kernel matrix and step size of the reduced-model training started at ``full``.

    For networks the learning rate is lowered when needed so that the step
    never exceeds 1 / lambda_1; the (possibly adjusted) model is returned.
    """
    if isinstance(full, gbdt.GbdtEnsemble):
        xb = full.quantizer.transform(x_dropped)
        return gbdt.stationary_kernel(xb, full.quantizer, learner.config.depth), learner.config.epsilon, full
    k = mlp.empirical_ntk(full, x_dropped)
    step = full.config.effective_step
    lam1 = k.eigenvalues[0]
    if lam1 > 0 and step > 1.0 / lam1:
        step = 1.0 / lam1
        scale = 1.0 if full.config.parameterization == "ntk" else full.config.width
        full = mlp.with_eta(full, step * scale)
    return k, step, full


def _rate_item(cfg, item):
    n, r = item
    rng = _replicate_rng(cfg, r, n)
    d, reduced, draw = _rate_problem(cfg, n, rng)
    t0 = time.perf_counter()
    learner, full, _ = fit_full(cfg, d, rng)
    spec = DropSpec.from_means(d, [0])
    dd = drop_features(d, spec)
    k, step, full = warm_start_kernel(learner, full, dd.x)
    truth = reduced(d.x)
    diag = diagnose(k, models.predict(full, dd.x) - truth, cfg.stop_sigma, step)
    traj = []
    model, _ = early_stop_train(learner, full, dd, FixedT(diag.t_max), rng, trajectory=traj)
    wall = 1e3 * (time.perf_counter() - t0)
    x_eval = draw(cfg.n_eval, rng.child("eval"))
    pop = models.mse(reduced(x_eval), models.predict(model, drop_features(Dataset(x_eval, np.zeros(cfg.n_eval)), spec).x))
    metrics = {
        "empirical_error": models.mse(traj[-1], truth),
        "population_error": pop,
        "warm_error": models.mse(traj[0], truth),
        "first_step_error": models.mse(traj[min(1, len(traj) - 1)], truth),
        "t_max": float(diag.t_max),
        "c_h": diag.c_h,
        "rho_hat": diag.rho_hat,
        "lambda_1": float(diag.eigenvalues[0]),
        "step": step,
        "wall_ms": wall,
    }
    return [RunRecord(cfg.experiment, cfg.seed, r, {"n": n, "model": cfg.model}, metrics, wall)]


def run_rate_experiment(cfg: ExperimentConfig):
    return _map(_rate_item, cfg, [(n, r) for n in cfg.n_grid for r in range(cfg.replicates)])


# VI comparisons --------------------------------------------------------------------

def _vi_records(cfg, r, params, ests, truth=None, full_ms=0.0, feature=0):
    out = []
    for method, est in ests.items():
        metrics = {"vi_hat": est.vi_hat, "tau_hat": est.tau_hat, "wall_ms": est.wall_ms, "full_ms": full_ms}
        if truth is not None:
            metrics["truth"] = truth
            metrics["error"] = est.vi_hat - truth
        if est.ci is not None:
            lo, hi, _ = est.ci
            metrics.update(lower=lo, upper=hi, half_width=0.5 * (hi - lo),
                           covered=float(lo <= truth <= hi) if truth is not None else math.nan)
        out.append(RunRecord(cfg.experiment, cfg.seed, r, {**params, "method": method, "feature": feature},
                             metrics, est.wall_ms))
    return out


def _corr_item(cfg, item):
    rho, r = item
    rng = _replicate_rng(cfg, r, f"rho={rho!r}")
    d, truth = gen_correlated_linear(rho, cfg.beta, 1.0, cfg.noise_sd, cfg.n, rng.child("data"))
    train, hold = split(d, SplitPlan(cfg.q, rng.child("split")))
    learner, full, full_ms = fit_full(cfg, train, rng)
    ests = vi_estimates(cfg, learner, full, train, hold, [0], rng)
    if cfg.experiment == "wald-coverage":
        ests = {m: imp.wald_ci(e, cfg.alpha) for m, e in ests.items()}
    return _vi_records(cfg, r, {"rho": rho, "n": cfg.n, "model": cfg.model}, ests, truth, full_ms)


def run_corr_linear(cfg: ExperimentConfig):
    return _map(_corr_item, cfg, [(rho, r) for rho in cfg.rho_grid for r in range(cfg.replicates)])


def run_wald_coverage(cfg: ExperimentConfig):
    return run_corr_linear(cfg)


def _highdim_item(cfg, r):
    rng = _replicate_rng(cfg, r)
    d = gen_highdim(cfg.kind, cfg.p, cfg.n, rng.child("data"), noise_sd=cfg.noise_sd)
    train, hold = split(d, SplitPlan(cfg.q, rng.child("split")))
    learner, full, full_ms = fit_full(cfg, train, rng)
    out = []
    for j in (0, cfg.p - 1):
        ests = vi_estimates(cfg, learner, full, train, hold, [j], rng.child(j))
        out += _vi_records(cfg, r, {"p": cfg.p, "n": cfg.n, "kind": cfg.kind, "model": cfg.model},
                           ests, None, full_ms, feature=j)
    return out


def run_highdim(cfg: ExperimentConfig):
    return _map(_highdim_item, cfg, list(range(cfg.replicates)))


# Shapley ------------------------------------------------------------------------

def _shapley_records(cfg, r, params, learner, full, train, hold, rng, names=None):
    out = []
    for method in cfg.methods:
        t0 = time.perf_counter()
        est = imp.shapley(learner, full, train, hold, cfg.samples, "sampled", method, make_policy(cfg),
                          rng.child(method))
        wall = 1e3 * (time.perf_counter() - t0)
        for j in range(train.p):
            metrics = {"phi_hat": float(est.phi_hat[j]), "std_err": float(est.std_err[j]),
                       "v_full": est.v_full, "v_empty": est.v_empty, "wall_ms": wall}
            feat = names[j] if names else j
            out.append(RunRecord(cfg.experiment, cfg.seed, r, {**params, "method": method, "feature": feat},
                                 metrics, wall))
    return out


def _shapley_item(cfg, r):
    rng = _replicate_rng(cfg, r)
    d = gen_logistic(cfg.p, cfg.n, rng.child("data"))
    train, hold = split(d, SplitPlan(cfg.q, rng.child("split")))
    learner, full, _ = fit_full(cfg, train, rng)
    return _shapley_records(cfg, r, {"p": cfg.p, "n": cfg.n, "model": cfg.model},
                            learner, full, train, hold, rng)


def run_shapley_logistic(cfg: ExperimentConfig):
    return _map(_shapley_item, cfg, list(range(cfg.replicates)))


def run_real_csv(cfg: ExperimentConfig, path=None):
    path = path or cfg.data
    if path is None or cfg.target is None:
        raise ConfigError("real-csv needs a data path and a target column")
    d = load_csv(path, cfg.target)
    if cfg.standardize:
        d = standardize(d)
    rng = _replicate_rng(cfg, 0)
    train, hold = split(d, SplitPlan(cfg.q, rng.child("split")))
    learner, full, full_ms = fit_full(cfg, train, rng)
    names = d.feature_names
    params = {"data": Path(path).name, "model": cfg.model}
    vi = {}
    for j in range(d.p):
        vi[j] = vi_estimates(cfg, learner, full, train, hold, [j], rng.child(j))
    shap = _shapley_records(cfg, 0, params, learner, full, train, hold, rng, names)
    out = []
    for rec in shap:
        j = names.index(rec.params["feature"])
        est = vi[j][rec.params["method"]]
        rec.metrics.update(vi_hat=est.vi_hat, tau_hat=est.tau_hat, vi_ms=est.wall_ms)
        out.append(rec)
    return out


RUNNERS = {
    "rate": run_rate_experiment,
    "corr-linear": run_corr_linear,
    "highdim": run_highdim,
    "wald-coverage": run_wald_coverage,
    "shapley-logistic": run_shapley_logistic,
    "real-csv": run_real_csv,
}


def run_experiment(cfg: ExperimentConfig):
    return RUNNERS[cfg.experiment](cfg)


# aggregation ----------------------------------------------------------------------

def _group(records, *keys):
    groups = {}
    for rec in records:
        groups.setdefault(tuple(rec.params.get(k) for k in keys), []).append(rec)
    return groups


def loglog_slope(ns, errors):
    """OLS slope of log(error) against log(n)."""
    return float(np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(errors, float)), 1)[0])


def summarize(cfg: ExperimentConfig, records):
    exp = cfg.experiment
    if exp == "rate":
        g = _group(records, "n")
        ns = sorted(k[0] for k in g)
        med = [float(np.median([r.metrics["empirical_error"] for r in g[(n,)]])) for n in ns]
        pop = [float(np.median([r.metrics["population_error"] for r in g[(n,)]])) for n in ns]
        return {"n": ns, "median_empirical_error": med, "median_population_error": pop,
                "slope_empirical": loglog_slope(ns, med), "slope_population": loglog_slope(ns, pop)}
    if exp in ("corr-linear", "wald-coverage"):
        out = []
        for (rho, method), recs in sorted(_group(records, "rho", "method").items()):
            row = {"rho": rho, "method": method,
                   "median_vi": float(np.median([r.metrics["vi_hat"] for r in recs])),
                   "truth": recs[0].metrics["truth"],
                   "median_abs_error": float(np.median([abs(r.metrics["error"]) for r in recs]))}
            if "covered" in recs[0].metrics:
                row["coverage"] = float(np.mean([r.metrics["covered"] for r in recs]))
                row["median_half_width"] = float(np.median([r.metrics["half_width"] for r in recs]))
            out.append(row)
        return {"rows": out}
    if exp == "highdim":
        out = []
        for (feature, method), recs in sorted(_group(records, "feature", "method").items()):
            out.append({"feature": feature, "method": method,
                        "median_vi": float(np.median([r.metrics["vi_hat"] for r in recs])),
                        "median_wall_ms": float(np.median([r.wall_ms for r in recs]))})
        return {"rows": out}
    out = []
    for (feature, method), recs in _group(records, "feature", "method").items():
        out.append({"feature": feature, "method": method,
                    "mean_phi": float(np.mean([r.metrics["phi_hat"] for r in recs]))})
    return {"rows": out}


def write_outputs(cfg: ExperimentConfig, records, out_dir=None):
    """records.json (wall-clock fields omitted so reruns are byte-identical),
    records.csv and timings, summary.json and the resolved config."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    blob = {"schema": SCHEMA_VERSION, "experiment": cfg.experiment,
            "records": [r.to_dict(timing=False) for r in records]}
    (out / "records.json").write_text(json.dumps(blob, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    param_keys = sorted({k for r in records for k in r.params})
    metric_keys = sorted({k for r in records for k in r.metrics})
    with (out / "records.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["experiment", "seed", "replicate", *param_keys, *metric_keys, "wall_ms"])
        for r in records:
            w.writerow([r.experiment, r.seed, r.replicate, *(r.params.get(k, "") for k in param_keys),
                        *(repr(r.metrics[k]) if k in r.metrics else "" for k in metric_keys),
                        f"{r.wall_ms:.3f}"])
    (out / "summary.json").write_text(json.dumps(summarize(cfg, records), indent=2) + "\n", encoding="utf-8")
    cfg_blob = {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.to_dict().items()}
    (out / "config.json").write_text(json.dumps(cfg_blob, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out
