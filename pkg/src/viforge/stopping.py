"""Early-stopping training and the spectrum-based stopping-rule diagnostics.

The diagnostics work on a normalised kernel matrix ``K`` (entries already
divided by N) with eigenvalues ``lam``:

    local Rademacher   R(rho) = sqrt(mean(min(lam, rho^2)))
    critical radius    smallest rho > 0 with R(rho) <= rho^2 C_H^2 / (2 e sigma)
    T_max              first tau with R(1/sqrt(tau*step)) > C_H^2 / (2 e sigma tau step), minus one
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import models
from .data import Dataset, SplitPlan, split
from .errors import BudgetError, InvalidArgumentError, NotPSDError
from .numerics import PINV_CUTOFF, EigenDecomposition, RngStream, quad_form_pinv, sym_eig

IMPROVEMENT_TOL = 1e-10
T_MAX_CAP = 10**7


class KernelMatrix:
    """Symmetric PSD kernel matrix (already scaled by 1/N) with a lazy eigendecomposition."""

    def __init__(self, matrix):
        m = np.asarray(matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise InvalidArgumentError(f"kernel matrix must be square, got shape {m.shape}")
        scale = max(np.abs(m).max(initial=0.0), np.finfo(float).tiny)
        if np.abs(m - m.T).max(initial=0.0) > 1e-10 * scale:
            raise InvalidArgumentError("kernel matrix is not symmetric")
        self.matrix = 0.5 * (m + m.T)

    @property
    def n(self):
        return self.matrix.shape[0]

    @cached_property
    def eig(self) -> EigenDecomposition:
        e = sym_eig(self.matrix)
        lam_max = max(e.eigenvalues[0], 0.0) if e.eigenvalues.size else 0.0
        if e.eigenvalues.size and e.eigenvalues[-1] < -max(1e-8, 1e-8 * lam_max):
            raise NotPSDError(f"kernel has eigenvalue {e.eigenvalues[-1]:.3g}")
        return e

    @property
    def eigenvalues(self):
        return np.clip(self.eig.eigenvalues, 0.0, None)


# policies -------------------------------------------------------------------

@dataclass(frozen=True)
class Patience:
    patience: int = 10
    q_val: float = 0.75
    max_epochs: int = 2000

    def __post_init__(self):
        if self.patience < 1 or self.max_epochs < 0:
            raise InvalidArgumentError("need patience >= 1 and max_epochs >= 0")
        if not 0 < self.q_val < 1:
            raise InvalidArgumentError("q_val must lie in (0, 1)")


@dataclass(frozen=True)
class FixedT:
    T: int


@dataclass(frozen=True)
class TMaxRule:
    """Stop at T_max computed from a known spectrum, C_H and noise level."""

    sigma: float
    c_h: float
    eigenvalues: tuple
    step: float

    def resolve(self) -> FixedT:
        return FixedT(t_max(np.asarray(self.eigenvalues), self.c_h, self.sigma, self.step))


@dataclass
class History:
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    wall_ms: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    truncated: bool = False

    def record(self, epoch, train, val, ms):
        self.epochs.append(epoch)
        self.train_loss.append(train)
        self.val_loss.append(val)
        self.wall_ms.append(ms)

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "wall_ms"])
            for row in zip(self.epochs, self.train_loss, self.val_loss, self.wall_ms):
                w.writerow([row[0], repr(row[1]), repr(row[2]), f"{row[3]:.3f}"])


def early_stop_train(learner, model, data: Dataset, policy, rng: RngStream, trajectory=None):
    """Continue training ``model`` on ``data`` under ``policy``.

    With ``Patience`` the data are split (fraction ``q_val`` for training) and
    the checkpoint with the lowest validation loss is returned once ``patience``
    epochs pass without an improvement larger than ``IMPROVEMENT_TOL``. With
    ``FixedT`` all rows are trained on for exactly ``T`` epochs. If ``trajectory``
    is a list, the training-set predictions after every epoch (starting at
    epoch 0) are appended to it.
    """
    if isinstance(policy, TMaxRule):
        policy = policy.resolve()
    noise = rng.child("tree-noise").generator()
    t0 = time.perf_counter()
    hist = History()

    if isinstance(policy, FixedT):
        if policy.T < 0:
            raise InvalidArgumentError("T must be non-negative")
        sess = learner.session(model, data.x, data.y)
        _trace(trajectory, sess.pred)
        hist.record(0, models.half_mse(data.y, sess.pred), math.nan, 0.0)
        for epoch in range(1, policy.T + 1):
            sess.step(noise)
            _trace(trajectory, sess.pred)
            hist.record(epoch, models.half_mse(data.y, sess.pred), math.nan,
                        1e3 * (time.perf_counter() - t0))
        hist.best_epoch = hist.stopped_epoch = policy.T
        return sess.model, hist

    if not isinstance(policy, Patience):
        raise InvalidArgumentError(f"unsupported stopping policy {policy!r}")
    if policy.max_epochs == 0:
        hist.record(0, math.nan, math.nan, 0.0)
        return model, hist

    train, val = split(data, SplitPlan(policy.q_val, rng.child("split")))
    sess = learner.session(model, train.x, train.y, val.x)
    _trace(trajectory, sess.pred)
    best_loss = models.half_mse(val.y, sess.val_pred)
    best_model, best_epoch = sess.model, 0
    hist.record(0, models.half_mse(train.y, sess.pred), best_loss, 0.0)
    epoch = 0
    while epoch < policy.max_epochs:
        epoch += 1
        sess.step(noise)
        _trace(trajectory, sess.pred)
        vloss = models.half_mse(val.y, sess.val_pred)
        hist.record(epoch, models.half_mse(train.y, sess.pred), vloss, 1e3 * (time.perf_counter() - t0))
        if vloss < best_loss - IMPROVEMENT_TOL:
            best_loss, best_model, best_epoch = vloss, sess.model, epoch
        elif epoch - best_epoch >= policy.patience:
            break
    else:
        hist.truncated = True
    hist.best_epoch, hist.stopped_epoch = best_epoch, epoch
    return best_model, hist


def _trace(trajectory, pred):
    if trajectory is not None:
        trajectory.append(np.array(pred))


def fit_from_scratch(learner, data: Dataset, policy, rng: RngStream):
    """Fresh initialisation followed by ``early_stop_train``."""
    model = learner.init(data, rng)
    return early_stop_train(learner, model, data, policy, rng)


# spectral diagnostics -------------------------------------------------------

def _clean_eigs(eigenvalues):
    lam = np.asarray(eigenvalues, dtype=float).ravel()
    if lam.size and lam.min() < -1e-8 * max(1.0, lam.max()):
        raise InvalidArgumentError("eigenvalues must be non-negative")
    return np.clip(lam, 0.0, None)


def local_rademacher(eigenvalues, rho, n=None) -> float:
    lam = _clean_eigs(eigenvalues)
    n = lam.shape[0] if n is None else n
    if rho < 0:
        raise InvalidArgumentError("rho must be non-negative")
    return math.sqrt(float(np.minimum(lam, rho * rho).sum()) / n)


def hilbert_distance(k: KernelMatrix, c, cutoff=PINV_CUTOFF) -> float:
    """C_H = sqrt(c^T K^+ c / N) for the normalised kernel ``K``."""
    c = np.asarray(c, dtype=float).ravel()
    if c.shape[0] != k.n:
        raise InvalidArgumentError("c must have one entry per kernel row")
    return math.sqrt(quad_form_pinv(k.matrix, c, cutoff, eig=k.eig) / k.n)


def critical_radius(eigenvalues, c_h, sigma, n=None, rtol=1e-8) -> float:
    """Smallest rho > 0 with R(rho) <= rho^2 c_h^2 / (2 e sigma), by bisection."""
    if c_h <= 0 or sigma <= 0:
        raise InvalidArgumentError("need c_h > 0 and sigma > 0")
    lam = _clean_eigs(eigenvalues)
    if not np.any(lam > 0):
        return float(np.finfo(float).tiny)
    coef = c_h * c_h / (2.0 * math.e * sigma)

    def h(rho):
        return rho * rho * coef - local_rademacher(lam, rho, n)

    lo, hi = 0.0, 1.0
    while h(hi) < 0:
        lo, hi = hi, 2.0 * hi
    # h(rho)/rho is increasing, so the sign change is unique
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if h(mid) < 0:
            lo = mid
        else:
            hi = mid
    return hi


def _rademacher_batch(lam_sorted, csum, thresholds, n):
    # sum_i min(lam_i, t) = sum_{lam < t} lam + t * #{lam >= t}
    k = np.searchsorted(lam_sorted, thresholds, side="left")
    below = np.where(k > 0, csum[np.maximum(k - 1, 0)], 0.0)
    return np.sqrt((below + thresholds * (lam_sorted.shape[0] - k)) / n)


def t_max(eigenvalues, c_h, sigma, step, n=None, cap=T_MAX_CAP) -> int:
    """Largest iteration count before the stopping inequality first fires."""
    lam = _clean_eigs(eigenvalues)
    n = lam.shape[0] if n is None else n
    lam1 = lam.max(initial=0.0)
    limit = min(1.0, 1.0 / lam1) if lam1 > 0 else 1.0
    if not 0 < step <= limit * (1 + 1e-12):
        raise InvalidArgumentError(f"step must lie in (0, min(1, 1/lambda_1)] = (0, {limit:.6g}]")
    if sigma <= 0:
        raise InvalidArgumentError("sigma must be positive")
    lam_sorted = np.sort(lam)
    csum = np.cumsum(lam_sorted)
    coef = c_h * c_h / (2.0 * math.e * sigma)
    start, block = 1, 1024
    while start <= cap:
        tau = np.arange(start, min(start + block, cap + 1), dtype=float)
        eta = tau * step
        fired = _rademacher_batch(lam_sorted, csum, 1.0 / eta, n) > coef / eta
        if fired.any():
            return int(tau[np.argmax(fired)]) - 1
        start += block
        block = min(block * 2, 1 << 20)
    raise BudgetError(f"stopping inequality did not fire within {cap} iterations")


@dataclass
class StoppingDiagnostics:
    eigenvalues: np.ndarray
    c_h: float
    rho_hat: float
    t_max: int
    step: float
    residual_norms: list = field(default_factory=list)

    @property
    def eta(self):
        return self.step * np.arange(self.t_max + 1)

    def to_dict(self):
        return {
            "n": int(self.eigenvalues.shape[0]),
            "eigenvalues": self.eigenvalues.tolist(),
            "trace": float(self.eigenvalues.sum()),
            "c_h": self.c_h,
            "rho_hat": self.rho_hat,
            "t_max": self.t_max,
            "step": self.step,
            "residual_norms": list(self.residual_norms),
        }


def diagnose(k: KernelMatrix, c, sigma, step=None) -> StoppingDiagnostics:
    """C_H, critical radius and T_max for kernel ``k`` and start-to-target gap ``c``."""
    lam = k.eigenvalues
    if step is None:
        step = min(1.0, 1.0 / lam[0]) if lam[0] > 0 else 1.0
    c_h = hilbert_distance(k, c)
    rho = critical_radius(lam, c_h, sigma) if c_h > 0 else float(np.finfo(float).tiny)
    return StoppingDiagnostics(lam, c_h, rho, t_max(lam, c_h, sigma, step), step)


def kernel_residuals(k: KernelMatrix, trajectory, y, step):
    """delta_t = [f_{t+1} - f_t + step * K (f_t - y)] / step against the frozen kernel."""
    y = np.asarray(y, dtype=float)
    out = []
    for f0, f1 in zip(trajectory[:-1], trajectory[1:]):
        out.append((f1 - f0 + step * (k.matrix @ (f0 - y))) / step)
    return out


@dataclass
class ErrorDecomposition:
    error_sq: np.ndarray  # ||f_t - f_{0,-I}||_N^2
    bias_sq: np.ndarray
    variance: np.ndarray
    difference: np.ndarray
    shrinkage: np.ndarray  # diagonal of S = I - step * Lambda

    @property
    def bound(self):
        return self.bias_sq + self.variance + self.difference

    def holds(self, slack=1e-8):
        return bool(np.all(self.error_sq <= self.bound + slack))


def decompose_error(k: KernelMatrix, trajectory, warm_start, true_f, noise, step,
                    cutoff=PINV_CUTOFF) -> ErrorDecomposition:
    """Bias / variance / kernel-difference terms along a recorded trajectory.

    ``trajectory[0]`` must be the warm-start predictions. Eigenvalues below
    ``cutoff * lambda_max`` are treated as exactly zero, and the residuals
    ``delta_t`` are measured against that truncated kernel so the unrolled
    recursion is an identity.
    """
    if trajectory is None or len(trajectory) == 0:
        raise InvalidArgumentError("decompose_error needs a recorded trajectory")
    traj = [np.asarray(t, dtype=float) for t in trajectory]
    warm = np.asarray(warm_start, dtype=float)
    truth = np.asarray(true_f, dtype=float)
    w = np.asarray(noise, dtype=float)
    n = warm.shape[0]
    lam = k.eigenvalues.copy()
    lam[lam <= cutoff * lam.max(initial=0.0)] = 0.0
    u = k.eig.eigenvectors
    k_eff = KernelMatrix((u * lam) @ u.T)
    y = truth + w
    deltas = kernel_residuals(k_eff, traj, y, step)
    s = 1.0 - step * lam
    zeta_star = u.T @ (truth - warm) / math.sqrt(n)
    w_tilde = u.T @ w
    acc = np.zeros(n)
    s_pow = np.ones(n)
    rows = []
    for tau, f in enumerate(traj):
        if tau > 0:
            acc = s * acc + u.T @ deltas[tau - 1]
            s_pow = s_pow * s
        err = float(np.mean((f - truth) ** 2))
        bias = 2.0 * float(np.sum((s_pow * zeta_star) ** 2))
        var = 4.0 / n * float(np.sum(((1.0 - s_pow) * w_tilde) ** 2))
        diff = 4.0 * step * step / n * float(np.sum(acc * acc))
        rows.append((err, bias, var, diff))
    arr = np.array(rows)
    return ErrorDecomposition(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], s)
