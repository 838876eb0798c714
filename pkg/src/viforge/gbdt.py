"""Gradient boosting with oblivious (symmetric) trees and randomised split choice.

Features are quantised into at most ``n + 1`` equal-frequency bins. Every level of
a tree shares one split ``(feature, border)``; a sample goes right when its bin
index exceeds ``border``. Splits are chosen greedily by the score

    D(nu, z) = (1/N) * sum_leaves (sum_{i in leaf} z_i)^2 / |leaf|

perturbed by Gumbel noise ``-beta * log(-log u)``. Ties are broken by the
lexicographically smallest ``(feature, border)``.
"""
from __future__ import annotations

import itertools
import json
import math
import threading
from dataclasses import dataclass

import numpy as np

from . import models
from .errors import BudgetError, InvalidArgumentError
from .numerics import RngStream

ENUMERATION_BUDGET = 200_000
FORMAT = "viforge-gbdt"
FORMAT_VERSION = 1
_EPS = np.finfo(float).eps


@dataclass(frozen=True)
class GbdtConfig:
    depth: int = 2
    borders: int = 32
    beta: float = 10_000.0
    epsilon: float = 0.1
    lam: float = 0.0
    max_iters: int = 1000

    def __post_init__(self):
        if self.depth < 1 or self.borders < 1:
            raise InvalidArgumentError("need depth >= 1 and borders >= 1")
        if self.beta < 0 or self.epsilon <= 0 or self.lam < 0:
            raise InvalidArgumentError("need beta >= 0, epsilon > 0, lam >= 0")


@dataclass(frozen=True, eq=False)
class Quantizer:
    thresholds: tuple  # one strictly increasing float array per feature

    @property
    def n_features(self):
        return len(self.thresholds)

    def transform(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.n_features:
            raise InvalidArgumentError(f"expected {self.n_features} columns, got shape {x.shape}")
        out = np.empty(x.shape, dtype=np.int64)
        for j, thr in enumerate(self.thresholds):
            # side="left": a value equal to a threshold stays in the lower bin
            out[:, j] = np.searchsorted(thr, x[:, j], side="left")
        return out

    def candidates(self):
        """All splits (feature, border) in lexicographic order, as two int arrays."""
        feats = [np.full(len(t), j) for j, t in enumerate(self.thresholds)]
        borders = [np.arange(len(t)) for t in self.thresholds]
        if not feats:
            return np.zeros(0, int), np.zeros(0, int)
        return np.concatenate(feats).astype(int), np.concatenate(borders).astype(int)


def quantize(x, n) -> Quantizer:
    """Thresholds at the empirical k/(n+1) quantiles, deduplicated per feature."""
    if n < 1:
        raise InvalidArgumentError("need at least one border per feature")
    x = np.asarray(x, dtype=float)
    probs = np.arange(1, n + 1) / (n + 1)
    thr = []
    for col in x.T:
        t = np.unique(np.quantile(col, probs))
        thr.append(t[t < col.max()])
    return Quantizer(tuple(thr))


@dataclass(frozen=True, eq=False)
class ObliviousTree:
    splits: tuple        # ((feature, border), ...) from root to the last level
    leaf_values: np.ndarray

    def leaves(self, xb):
        return leaf_index(self.splits, xb)


def leaf_index(splits, xb) -> np.ndarray:
    leaf = np.zeros(xb.shape[0], dtype=np.int64)
    for f, k in splits:
        leaf = 2 * leaf + (xb[:, f] > k)
    return leaf


def _leaf_sums(splits, z, xb, weights=None):
    n_leaves = 2 ** len(splits)
    leaf = leaf_index(splits, xb)
    sums = np.bincount(leaf, weights=z, minlength=n_leaves)
    counts = np.bincount(leaf, weights=weights, minlength=n_leaves).astype(float)
    return leaf, sums, counts


def score(splits, z, xb) -> float:
    z = np.asarray(z, dtype=float)
    _, sums, counts = _leaf_sums(splits, z, xb)
    nz = counts > 0
    return float(np.sum(sums[nz] ** 2 / counts[nz]) / z.shape[0])


def _level_scores(leaf, n_leaves, z, xb, quantizer, weights=None):
    """Score of appending every candidate split to the tree whose leaf ids are ``leaf``.

    With ``weights`` each row stands for ``weights[i]`` identical binned rows
    and ``z[i]`` holds the sum of their residuals.
    """
    n = z.shape[0] if weights is None else weights.sum()
    out = []
    for j, thr in enumerate(quantizer.thresholds):
        nb = len(thr)
        if nb == 0:
            continue
        idx = leaf * (nb + 1) + xb[:, j]
        size = n_leaves * (nb + 1)
        s = np.bincount(idx, weights=z, minlength=size).reshape(n_leaves, nb + 1)
        c = np.bincount(idx, weights=weights, minlength=size).reshape(n_leaves, nb + 1).astype(float)
        ls, lc = np.cumsum(s, axis=1)[:, :nb], np.cumsum(c, axis=1)[:, :nb]
        rs, rc = s.sum(axis=1, keepdims=True) - ls, c.sum(axis=1, keepdims=True) - lc
        with np.errstate(invalid="ignore", divide="ignore"):
            left = np.where(lc > 0, ls * ls / lc, 0.0)
            right = np.where(rc > 0, rs * rs / rc, 0.0)
        out.append((left + right).sum(axis=0) / n)
    return np.concatenate(out) if out else np.zeros(0)


def _as_generator(rng):
    if isinstance(rng, RngStream):
        return rng.generator()
    return rng


def sample_tree(z, cfg: GbdtConfig, xb, quantizer: Quantizer, rng, weights=None) -> tuple:
    """Greedy oblivious-tree structure with Gumbel-perturbed scores.

    ``rng`` is an ``RngStream`` or a ``numpy.random.Generator``. One uniform is
    drawn per candidate per level, including already-used candidates, so the
    stream advances identically for any ``beta``.
    """
    g = _as_generator(rng)
    z = np.asarray(z, dtype=float)
    feats, borders = quantizer.candidates()
    n_cand = feats.shape[0]
    used = np.zeros(n_cand, dtype=bool)
    leaf = np.zeros(z.shape[0], dtype=np.int64)
    splits = []
    for level in range(min(cfg.depth, n_cand)):
        d = _level_scores(leaf, 2**level, z, xb, quantizer, weights)
        u = np.clip(g.random(n_cand), _EPS, 1.0 - _EPS)
        if cfg.beta > 0:
            d = d - cfg.beta * np.log(-np.log(u))
        d[used] = -np.inf
        best = int(np.argmax(d))
        used[best] = True
        f, k = int(feats[best]), int(borders[best])
        splits.append((f, k))
        leaf = 2 * leaf + (xb[:, f] > k)
    return tuple(splits)


def fit_leaf_values(splits, z, xb, weights=None) -> np.ndarray:
    """Mean residual per leaf; empty leaves get 0."""
    _, sums, counts = _leaf_sums(splits, np.asarray(z, dtype=float), xb, weights)
    return np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)


class _TreeStore:
    """Append-only tree list shared by every ensemble that is a prefix of it."""

    def __init__(self, trees, coefs):
        self.trees, self.coefs = list(trees), list(coefs)
        self.lock = threading.Lock()


class GbdtEnsemble:
    """Weighted sum of oblivious trees over a fixed quantizer.

    Ensembles are immutable views (length and a global weight scale) onto a
    shared append-only store, so ``extend`` is O(1) instead of copying every
    tree.
    """

    def __init__(self, quantizer: Quantizer, trees=(), weights=None, epsilon=0.1, lam=0.0):
        trees = tuple(trees)
        w = np.zeros(0) if weights is None else np.asarray(weights, dtype=float)
        if w.shape[0] != len(trees):
            raise InvalidArgumentError("one weight per tree required")
        self.quantizer, self.epsilon, self.lam = quantizer, float(epsilon), float(lam)
        self._store, self._len, self._scale = _TreeStore(trees, w.tolist()), len(trees), 1.0

    @classmethod
    def _view(cls, quantizer, store, length, scale, epsilon, lam):
        out = cls.__new__(cls)
        out.quantizer, out.epsilon, out.lam = quantizer, epsilon, lam
        out._store, out._len, out._scale = store, length, scale
        return out

    @property
    def trees(self):
        return tuple(self._store.trees[: self._len])

    @property
    def weights(self):
        return np.array(self._store.coefs[: self._len]) * self._scale

    @property
    def n_trees(self):
        return self._len

    def predict_binned(self, xb):
        out = np.zeros(xb.shape[0])
        for w, tree in zip(self.weights, self.trees):
            out += w * tree.leaf_values[tree.leaves(xb)]
        return out

    def predict(self, x):
        return self.predict_binned(self.quantizer.transform(x))

    def with_rates(self, epsilon, lam) -> "GbdtEnsemble":
        return GbdtEnsemble._view(self.quantizer, self._store, self._len, self._scale, float(epsilon), float(lam))

    def extend(self, tree: ObliviousTree, shrink=1.0) -> "GbdtEnsemble":
        """Scale existing weights by ``shrink`` and append ``tree`` with weight epsilon."""
        scale = self._scale * shrink
        with self._store.lock:
            store = self._store
            if len(store.trees) != self._len or scale < 1e-100:
                store = _TreeStore(store.trees[: self._len], self.weights * shrink)
                scale = 1.0
            store.trees.append(tree)
            store.coefs.append(self.epsilon / scale)
        return GbdtEnsemble._view(self.quantizer, store, self._len + 1, scale, self.epsilon, self.lam)


@models.predict.register
def _(model: GbdtEnsemble, x):
    return model.predict(x)


def empty_ensemble(cfg: GbdtConfig, x) -> GbdtEnsemble:
    return GbdtEnsemble(quantize(x, cfg.borders), (), None, cfg.epsilon, cfg.lam)


class _Session:
    """Boosting state. When the binned training rows repeat a lot, the trees
    are grown on the distinct rows weighted by multiplicity, which yields the
    same scores, trees and predictions as the row-level computation."""

    def __init__(self, model, cfg, x, y, x_val):
        self.model = model
        self.cfg = cfg
        self.y = np.asarray(y, dtype=float)
        n = self.y.shape[0]
        xb = model.quantizer.transform(x)
        cells, inverse, counts = np.unique(xb, axis=0, return_inverse=True, return_counts=True)
        if cells.shape[0] <= n // 2:
            self.xb, self.inverse = cells, inverse.ravel()
            self.counts = counts.astype(float)
            self.ysum = np.bincount(self.inverse, weights=self.y, minlength=cells.shape[0])
        else:
            self.xb, self.inverse, self.counts, self.ysum = xb, None, None, self.y
        self.cell_pred = model.predict_binned(self.xb)
        if x_val is None:
            self.xb_val, self.val_pred = None, None
        else:
            self.xb_val = model.quantizer.transform(x_val)
            self.val_pred = model.predict_binned(self.xb_val)

    @property
    def pred(self):
        return self.cell_pred if self.inverse is None else self.cell_pred[self.inverse]

    def step(self, rng):
        cfg, n = self.cfg, self.y.shape[0]
        if self.counts is None:
            z = self.y - self.cell_pred
        else:
            z = self.ysum - self.counts * self.cell_pred
        splits = sample_tree(z, cfg, self.xb, self.model.quantizer, rng, self.counts)
        tree = ObliviousTree(splits, fit_leaf_values(splits, z, self.xb, self.counts))
        shrink = 1.0 - cfg.lam * cfg.epsilon / n
        self.cell_pred = shrink * self.cell_pred + cfg.epsilon * tree.leaf_values[tree.leaves(self.xb)]
        if self.xb_val is not None:
            self.val_pred = shrink * self.val_pred + cfg.epsilon * tree.leaf_values[tree.leaves(self.xb_val)]
        self.model = self.model.extend(tree, shrink)


class GbdtLearner:
    family = "gbdt"

    def __init__(self, config: GbdtConfig | None = None, **kw):
        self.config = config or GbdtConfig(**kw)

    def init(self, data, rng=None) -> GbdtEnsemble:
        return empty_ensemble(self.config, data.x)

    def session(self, model: GbdtEnsemble, x, y, x_val=None):
        cfg = self.config
        if (model.epsilon, model.lam) != (cfg.epsilon, cfg.lam):
            model = model.with_rates(cfg.epsilon, cfg.lam)
        return _Session(model, cfg, x, y, x_val)

    def with_options(self, **kw) -> "GbdtLearner":
        return GbdtLearner(GbdtConfig(**{**vars(self.config), **kw}))

    def describe(self):
        return {"family": "gbdt", **vars(self.config)}


def train_gbdt(cfg: GbdtConfig, data, rng: RngStream, warm_start: GbdtEnsemble | None = None,
               stop=None):
    """Boost from ``warm_start`` (or the zero model).

    ``stop`` is ``None`` (run ``cfg.max_iters`` iterations) or a stopping policy,
    which is handed to :func:`viforge.stopping.early_stop_train`.
    """
    from .stopping import FixedT, early_stop_train

    if warm_start is not None and warm_start.quantizer.n_features != data.p:
        raise InvalidArgumentError("warm start quantizer does not match the data's feature count")
    learner = GbdtLearner(cfg)
    model = warm_start if warm_start is not None else learner.init(data)
    policy = FixedT(cfg.max_iters) if stop is None else stop
    model, _ = early_stop_train(learner, model, data, policy, rng)
    return model


def tree_kernel(splits, xb) -> np.ndarray:
    """k_nu(x_i, x_j) = N / max(N_leaf, 1) when i and j share a leaf, else 0."""
    n = xb.shape[0]
    leaf = leaf_index(splits, xb)
    counts = np.bincount(leaf, minlength=2 ** len(splits))
    w = n / np.maximum(counts, 1)
    same = leaf[:, None] == leaf[None, :]
    return np.where(same, w[leaf][:, None], 0.0)


def n_structures(n_candidates, depth):
    return math.comb(n_candidates, min(depth, n_candidates))


def enumerate_trees(quantizer: Quantizer, depth, budget=ENUMERATION_BUDGET):
    """All tree structures (unordered split sets of size min(depth, |S|)), canonically sorted."""
    feats, borders = quantizer.candidates()
    cands = list(zip(feats.tolist(), borders.tolist()))
    if n_structures(len(cands), depth) > budget:
        raise BudgetError(f"{n_structures(len(cands), depth)} tree structures exceed budget {budget}")
    return list(itertools.combinations(cands, min(depth, len(cands))))


def stationary_kernel(xb, quantizer: Quantizer, depth, budget=ENUMERATION_BUDGET):
    """K = (1/N) * mean over all structures of k_nu, evaluated at the binned rows ``xb``."""
    from .stopping import KernelMatrix

    trees = enumerate_trees(quantizer, depth, budget)
    n = xb.shape[0]
    cells, inverse, counts = np.unique(xb, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    kc = np.zeros((cells.shape[0], cells.shape[0]))
    for splits in trees:
        leaf = leaf_index(splits, cells)
        leaf_counts = np.bincount(leaf, weights=counts, minlength=2 ** len(splits))
        w = n / np.maximum(leaf_counts, 1.0)
        kc += np.where(leaf[:, None] == leaf[None, :], w[leaf][:, None], 0.0)
    kc /= len(trees) * n
    return KernelMatrix(kc[np.ix_(inverse, inverse)])


def tree_distribution(z, cfg: GbdtConfig, xb, quantizer: Quantizer, budget=ENUMERATION_BUDGET):
    """Exact law of ``sample_tree``: {sorted split tuple: probability}.

    Sums over every order in which the same split set can be grown, with a
    softmax of D / beta over the remaining candidates at each level.
    """
    if cfg.beta <= 0:
        raise InvalidArgumentError("tree_distribution needs beta > 0")
    z = np.asarray(z, dtype=float)
    feats, borders = quantizer.candidates()
    n_cand = feats.shape[0]
    depth = min(cfg.depth, n_cand)
    paths = math.perm(n_cand, depth)
    if paths > budget:
        raise BudgetError(f"{paths} ordered split sequences exceed budget {budget}")
    table = {}

    def grow(level, leaf, used, prefix, logp):
        if level == depth:
            key = tuple(sorted(prefix))
            table[key] = table.get(key, 0.0) + math.exp(logp)
            return
        d = _level_scores(leaf, 2**level, z, xb, quantizer) / cfg.beta
        d[list(used)] = -np.inf
        logq = d - np.logaddexp.reduce(d[np.isfinite(d)])
        for c in range(n_cand):
            if c in used:
                continue
            f, k = int(feats[c]), int(borders[c])
            grow(level + 1, 2 * leaf + (xb[:, f] > k), used | {c}, prefix + ((f, k),), logp + logq[c])

    grow(0, np.zeros(z.shape[0], dtype=np.int64), frozenset(), (), 0.0)
    return table


def to_dict(model: GbdtEnsemble) -> dict:
    return {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "epsilon": model.epsilon,
        "lam": model.lam,
        "thresholds": [t.tolist() for t in model.quantizer.thresholds],
        "weights": model.weights.tolist(),
        "trees": [
            {"splits": [list(s) for s in t.splits], "leaf_values": t.leaf_values.tolist()}
            for t in model.trees
        ],
    }


def from_dict(blob: dict) -> GbdtEnsemble:
    if blob.get("format") != FORMAT or blob.get("version") != FORMAT_VERSION:
        raise InvalidArgumentError("not a viforge GBDT ensemble (or unsupported version)")
    quant = Quantizer(tuple(np.array(t, dtype=float) for t in blob["thresholds"]))
    trees = tuple(
        ObliviousTree(tuple((int(f), int(k)) for f, k in t["splits"]), np.array(t["leaf_values"], dtype=float))
        for t in blob["trees"]
    )
    return GbdtEnsemble(quant, trees, np.array(blob["weights"], dtype=float), blob["epsilon"], blob["lam"])


def save(model: GbdtEnsemble, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_dict(model), fh)


def load(path) -> GbdtEnsemble:
    with open(path, encoding="utf-8") as fh:
        return from_dict(json.load(fh))
