"""Variable-importance estimators, Wald intervals and Shapley values.

Every estimator reports per-sample score differences on a holdout set,

    t_i = (y_i - f_reduced(x_i with I mean-replaced))^2 - (y_i - f_full(x_i))^2,

so ``vi_hat`` is their mean and ``tau_hat`` the plug-in standard error.
"""
from __future__ import annotations

import csv
import json
import math
import threading
import time
from dataclasses import dataclass, field, replace
from itertools import combinations

import numpy as np
from scipy.stats import norm

from . import models
from .data import Dataset, DropSpec, drop_features
from .errors import BudgetError, InvalidArgumentError, UndefinedVarianceError
from .numerics import RngStream
from .stopping import early_stop_train, fit_from_scratch

VI_METHODS = ("early_stop", "dropout", "retrain")
EXACT_MAX_FEATURES = 12


@dataclass
class ViEstimate:
    vi_hat: float
    per_sample_t: np.ndarray
    tau_hat: float
    method: str
    features: tuple = ()
    wall_ms: float = 0.0
    ci: tuple | None = None  # (lower, upper, alpha)
    extra: dict = field(default_factory=dict)

    def to_record(self, seed=None):
        return {
            "method": self.method,
            "features": list(self.features),
            "vi_hat": self.vi_hat,
            "tau_hat": self.tau_hat,
            "ci": None if self.ci is None else list(self.ci),
            "seed": seed,
            "wall_ms": self.wall_ms,
        }


def _from_scores(t, method, features, wall_ms, **extra) -> ViEstimate:
    t = np.asarray(t, dtype=float)
    n2 = t.shape[0]
    tau = math.sqrt(float(np.var(t, ddof=1)) / n2) if n2 >= 2 else math.nan
    return ViEstimate(float(np.mean(t)), t, tau, method, tuple(features), wall_ms, extra=extra)


def _normalise_features(features, p):
    out = tuple(sorted({int(j) for j in features}))
    for j in out:
        if not 0 <= j < p:
            raise InvalidArgumentError(f"feature index {j} out of range for p={p}")
    return out


def _zero_estimate(holdout, method):
    return ViEstimate(0.0, np.zeros(holdout.n), 0.0, method, ())


def _scores(full_model, reduced_model, holdout: Dataset, spec: DropSpec):
    full_err = (holdout.y - models.predict(full_model, holdout.x)) ** 2
    reduced = drop_features(holdout, spec)
    red_err = (holdout.y - models.predict(reduced_model, reduced.x)) ** 2
    return red_err - full_err


def estimate_vi_earlystop(learner, full_model, train: Dataset, holdout: Dataset, features, policy,
                          rng: RngStream) -> ViEstimate:
    """Warm-start the full model on mean-replaced training data and stop early."""
    features = _normalise_features(features, train.p)
    if not features:
        return _zero_estimate(holdout, "early_stop")
    spec = DropSpec.from_means(train, features)
    reduced_train = drop_features(train, spec)
    t0 = time.perf_counter()
    model, hist = early_stop_train(learner, full_model, reduced_train, policy, rng)
    wall = 1e3 * (time.perf_counter() - t0)
    t = _scores(full_model, model, holdout, spec)
    return _from_scores(t, "early_stop", features, wall, epochs=hist.best_epoch, truncated=hist.truncated)


def estimate_vi_dropout(full_model, train: Dataset, holdout: Dataset, features) -> ViEstimate:
    """Evaluate the unchanged full model on mean-replaced holdout features."""
    features = _normalise_features(features, holdout.p)
    if not features:
        return _zero_estimate(holdout, "dropout")
    t0 = time.perf_counter()
    t = _scores(full_model, full_model, holdout, DropSpec.from_means(train, features))
    return _from_scores(t, "dropout", features, 1e3 * (time.perf_counter() - t0))


def estimate_vi_retrain(learner, full_model, train: Dataset, holdout: Dataset, features, policy,
                        rng: RngStream) -> ViEstimate:
    """Train a reduced model from a fresh initialisation under the same policy."""
    features = _normalise_features(features, train.p)
    spec = DropSpec.from_means(train, features) if features else DropSpec(())
    reduced_train = drop_features(train, spec)
    t0 = time.perf_counter()
    model, hist = fit_from_scratch(learner, reduced_train, policy, rng)
    wall = 1e3 * (time.perf_counter() - t0)
    t = _scores(full_model, model, holdout, spec)
    return _from_scores(t, "retrain", features, wall, epochs=hist.best_epoch, truncated=hist.truncated)


def wald_ci(est: ViEstimate, alpha=0.05) -> ViEstimate:
    if not 0 < alpha < 1:
        raise InvalidArgumentError("alpha must lie in (0, 1)")
    n2 = np.asarray(est.per_sample_t).shape[0]
    if n2 < 2:
        raise UndefinedVarianceError(f"need at least two holdout scores, got {n2}")
    half = float(norm.ppf(1.0 - alpha / 2.0)) * est.tau_hat
    return replace(est, ci=(est.vi_hat - half, est.vi_hat + half, alpha))


# Shapley ---------------------------------------------------------------------

def shapley_weight(p, size):
    """|S|! (p - |S| - 1)! / p! for a coalition of ``size`` other players."""
    return math.factorial(size) * math.factorial(p - size - 1) / math.factorial(p)


class CoalitionGame:
    """Caches ``value(kept)`` by the bitmask of dropped features.

    ``evaluate(dropped)`` receives a sorted tuple of dropped feature indices.
    The cache is safe to share between threads; a value is computed at most
    once per coalition as long as ``evaluate`` is deterministic.
    """

    def __init__(self, p, evaluate):
        self.p = p
        self.evaluate = evaluate
        self.cache = {}
        self._lock = threading.Lock()
        self._pending = {}

    def value(self, kept) -> float:
        kept = frozenset(kept)
        dropped = tuple(j for j in range(self.p) if j not in kept)
        mask = sum(1 << j for j in dropped)
        with self._lock:
            if mask in self.cache:
                return self.cache[mask]
            event = self._pending.get(mask)
            owner = event is None
            if owner:
                event = self._pending[mask] = threading.Event()
        if not owner:
            event.wait()
            return self.cache[mask]
        v = float(self.evaluate(dropped))
        with self._lock:
            self.cache[mask] = v
            del self._pending[mask]
        event.set()
        return v

    @property
    def n_evaluations(self):
        return len(self.cache)


@dataclass
class ShapleyEstimate:
    phi_hat: np.ndarray
    std_err: np.ndarray
    n_samples: np.ndarray
    method: str
    mode: str
    v_full: float = math.nan
    v_empty: float = math.nan
    wall_ms: float = 0.0

    def to_records(self, seed=None, names=None):
        out = []
        for j, (phi, se, m) in enumerate(zip(self.phi_hat, self.std_err, self.n_samples)):
            out.append({
                "method": self.method,
                "feature": names[j] if names else j,
                "phi_hat": float(phi),
                "std_err": float(se),
                "n_samples": int(m),
                "mode": self.mode,
                "seed": seed,
                "wall_ms": self.wall_ms,
            })
        return out


def exact_shapley(game: CoalitionGame, method="custom") -> ShapleyEstimate:
    p = game.p
    if p > EXACT_MAX_FEATURES:
        raise BudgetError(f"exact Shapley enumeration limited to p <= {EXACT_MAX_FEATURES}, got {p}")
    t0 = time.perf_counter()
    phi = np.zeros(p)
    for j in range(p):
        others = [k for k in range(p) if k != j]
        for size in range(p):
            w = shapley_weight(p, size)
            for s in combinations(others, size):
                phi[j] += w * (game.value(set(s) | {j}) - game.value(s))
    v_full, v_empty = game.value(range(p)), game.value(())
    wall = 1e3 * (time.perf_counter() - t0)
    return ShapleyEstimate(phi, np.zeros(p), np.ones(p, dtype=int), method, "exact", v_full, v_empty, wall)


def sampled_shapley(game: CoalitionGame, m, rng: RngStream, method="custom") -> ShapleyEstimate:
    """Average marginal contribution of each feature over ``m`` random orderings."""
    if m < 1:
        raise InvalidArgumentError("need at least one sample per feature")
    p = game.p
    t0 = time.perf_counter()
    phi, se = np.zeros(p), np.zeros(p)
    for j in range(p):
        g = rng.child("subset-sampling").child(j).generator()
        deltas = np.empty(m)
        for k in range(m):
            perm = g.permutation(p)
            before = set(perm[: int(np.flatnonzero(perm == j)[0])].tolist())
            deltas[k] = game.value(before | {j}) - game.value(before)
        phi[j] = deltas.mean()
        se[j] = deltas.std(ddof=1) / math.sqrt(m) if m > 1 else 0.0
    v_full, v_empty = game.value(range(p)), game.value(())
    wall = 1e3 * (time.perf_counter() - t0)
    return ShapleyEstimate(phi, se, np.full(p, m), method, "sampled", v_full, v_empty, wall)


def vi_game(method, learner, full_model, train: Dataset, holdout: Dataset, policy,
            rng: RngStream) -> CoalitionGame:
    """Coalition values are minus the holdout MSE of the reduced model.

    Keeping every feature gives the full model; keeping none gives the
    constant predictor at the training mean.
    """
    if method not in VI_METHODS:
        raise InvalidArgumentError(f"unknown VI method {method!r}")
    p = train.p
    v_full = -models.mse(holdout.y, models.predict(full_model, holdout.x))
    v_empty = -models.mse(holdout.y, np.full(holdout.n, train.y.mean()))

    def evaluate(dropped):
        if not dropped:
            return v_full
        if len(dropped) == p:
            return v_empty
        sub = rng.child(sum(1 << j for j in dropped))
        if method == "early_stop":
            est = estimate_vi_earlystop(learner, full_model, train, holdout, dropped, policy, sub)
        elif method == "dropout":
            est = estimate_vi_dropout(full_model, train, holdout, dropped)
        else:
            est = estimate_vi_retrain(learner, full_model, train, holdout, dropped, policy, sub)
        return v_full - est.vi_hat

    return CoalitionGame(p, evaluate)


def shapley(learner, full_model, train: Dataset, holdout: Dataset, m_samples=50, mode="sampled",
            vi_method="early_stop", policy=None, rng: RngStream = None) -> ShapleyEstimate:
    if mode not in ("sampled", "exact"):
        raise InvalidArgumentError(f"unknown Shapley mode {mode!r}")
    if mode == "exact" and train.p > EXACT_MAX_FEATURES:
        raise BudgetError(f"exact Shapley enumeration limited to p <= {EXACT_MAX_FEATURES}")
    rng = rng or RngStream(0)
    game = vi_game(vi_method, learner, full_model, train, holdout, policy, rng)
    if mode == "exact":
        return exact_shapley(game, vi_method)
    return sampled_shapley(game, m_samples, rng, vi_method)


# export ----------------------------------------------------------------------

def export_json(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(records, fh, indent=2, sort_keys=True)
        fh.write("\n")


def export_csv(records, path):
    keys = sorted({k for r in records for k in r})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in records:
            w.writerow({k: json.dumps(v) if isinstance(v, (list, dict)) else v for k, v in r.items()})
