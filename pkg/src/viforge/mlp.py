"""Fully-connected networks trained by full-batch gradient descent.

Two parameterizations are supported. In ``"ntk"`` mode the trainable
weights are standard normal and the forward pass applies
``sigma_w / sqrt(fan_in)`` per layer (biases scaled by ``sigma_b``); in
``"standard"`` mode the variance lives in the initialisation instead. The
effective gradient step is ``eta0`` for NTK mode and ``eta0 / width`` for
standard mode, and the empirical NTK is divided by the width in standard mode,
so ``f_{t+1} - f_t ~= -eta0 * K (f_t - y)`` in both.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from . import models
from .errors import InvalidArgumentError, NumericOverflowError
from .numerics import RngStream

ACTIVATIONS = ("relu", "softplus")
PARAMETERIZATIONS = ("ntk", "standard")
MAX_JACOBIAN_ENTRIES = 2**27
AUTO_STEP_ROWS = 512
FORMAT = "viforge-mlp"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class MlpConfig:
    widths: tuple  # (n_inputs, hidden..., 1)
    activation: str = "relu"
    parameterization: str = "ntk"
    sigma_w: float = float(np.sqrt(2.0))
    sigma_b: float = 0.1
    eta0: float = 1.0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 2 or widths[-1] != 1:
            raise InvalidArgumentError("widths must run from n_inputs to a single output")
        if any(w < 1 for w in widths):
            raise InvalidArgumentError("layer widths must be positive")
        if self.activation not in ACTIVATIONS:
            raise InvalidArgumentError(f"activation must be one of {ACTIVATIONS}")
        if self.parameterization not in PARAMETERIZATIONS:
            raise InvalidArgumentError(f"parameterization must be one of {PARAMETERIZATIONS}")
        if self.sigma_w <= 0 or self.sigma_b < 0 or self.eta0 <= 0:
            raise InvalidArgumentError("need sigma_w > 0, sigma_b >= 0, eta0 > 0")

    @classmethod
    def make(cls, n_inputs, hidden=(256,), **kw) -> "MlpConfig":
        return cls(widths=(int(n_inputs), *hidden, 1), **kw)

    @property
    def width(self) -> int:
        """Width ``m`` used for the standard-mode normalisations."""
        return max(self.widths[1:-1], default=1)

    @property
    def effective_step(self) -> float:
        if self.parameterization == "ntk":
            return self.eta0
        return self.eta0 / self.width

    def layer_scales(self):
        if self.parameterization == "ntk":
            return [(self.sigma_w / np.sqrt(n_in), self.sigma_b) for n_in in self.widths[:-1]]
        return [(1.0, 1.0)] * (len(self.widths) - 1)


@dataclass(frozen=True, eq=False)
class MlpModel:
    config: MlpConfig
    weights: tuple  # W[l] has shape (n_l, n_{l+1})
    biases: tuple

    @property
    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flat_params(self):
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(self.weights, self.biases)])

    def with_flat_params(self, theta) -> "MlpModel":
        ws, bs, at = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(np.array(theta[at:at + w.size]).reshape(w.shape))
            at += w.size
            bs.append(np.array(theta[at:at + b.size]))
            at += b.size
        return MlpModel(self.config, tuple(ws), tuple(bs))


def init(config: MlpConfig, rng: RngStream) -> MlpModel:
    g = rng.generator()
    ntk = config.parameterization == "ntk"
    ws, bs = [], []
    for n_in, n_out in zip(config.widths[:-1], config.widths[1:]):
        w = g.standard_normal((n_in, n_out))
        b = g.standard_normal(n_out)
        if not ntk:
            w *= config.sigma_w / np.sqrt(n_in)
            b *= config.sigma_b
        if config.sigma_b == 0.0:
            b = np.zeros(n_out)
        ws.append(w)
        bs.append(b)
    return MlpModel(config, tuple(ws), tuple(bs))


def _act(name, h):
    if name == "relu":
        return np.maximum(h, 0.0)
    return np.logaddexp(0.0, h)


def _act_grad(name, h):
    if name == "relu":
        return (h > 0.0).astype(float)
    return expit(h)


def _check_input(model, x):
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.config.widths[0]:
        raise InvalidArgumentError(
            f"input has shape {x.shape}, network expects {model.config.widths[0]} columns"
        )
    return x


def _forward_cache(model: MlpModel, x):
    """Return (post-activations x^0..x^L, pre-activations h^1..h^{L+1})."""
    cfg = model.config
    acts, pres = [x], []
    scales = cfg.layer_scales()
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        ws, bsc = scales[l]
        h = acts[-1] @ (ws * w) + bsc * b
        pres.append(h)
        if l < last:
            acts.append(_act(cfg.activation, h))
    return acts, pres


def forward(model: MlpModel, x) -> np.ndarray:
    x = _check_input(model, x)
    _, pres = _forward_cache(model, x)
    return pres[-1][:, 0].copy()


@models.predict.register
def _(model: MlpModel, x):
    return forward(model, x)


def _backward_signals(model, acts, pres, seed):
    """Per-layer dOutput/dh signals, scaled row-wise by ``seed`` (shape (N, 1))."""
    cfg = model.config
    scales = cfg.layer_scales()
    sig = [None] * len(model.weights)
    g = seed
    for l in range(len(model.weights) - 1, -1, -1):
        sig[l] = g
        if l > 0:
            g = (g @ (scales[l][0] * model.weights[l]).T) * _act_grad(cfg.activation, pres[l - 1])
    return sig


def _loss_gradient(model, acts, pres, resid):
    n = resid.shape[0]
    scales = model.config.layer_scales()
    grads = []
    with np.errstate(over="ignore", invalid="ignore"):  # _apply_step reports non-finite gradients
        sig = _backward_signals(model, acts, pres, resid[:, None] / n)
        for l, g in enumerate(sig):
            ws, bsc = scales[l]
            grads.append((ws * (acts[l].T @ g), bsc * g.sum(axis=0)))
    return grads


def _apply_step(model, grads, step):
    ws, bs = [], []
    with np.errstate(over="ignore", invalid="ignore"):
        for (w, b), (gw, gb) in zip(zip(model.weights, model.biases), grads):
            if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
                raise NumericOverflowError("non-finite gradient; reduce the learning rate")
            ws.append(w - step * gw)
            bs.append(b - step * gb)
    return MlpModel(model.config, tuple(ws), tuple(bs))


def grad_step(model: MlpModel, x, y, step) -> MlpModel:
    """One full-batch step on the loss (1/2N)||y - f(x)||^2."""
    if step <= 0:
        raise InvalidArgumentError("step must be positive")
    x = _check_input(model, x)
    acts, pres = _forward_cache(model, x)
    resid = pres[-1][:, 0] - np.asarray(y, dtype=float)
    return _apply_step(model, _loss_gradient(model, acts, pres, resid), step)


def per_example_jacobian(model: MlpModel, x) -> np.ndarray:
    """N x |theta| matrix whose row i is grad_theta f(theta, x_i)."""
    x = _check_input(model, x)
    n = x.shape[0]
    if n * model.n_params > MAX_JACOBIAN_ENTRIES:
        raise InvalidArgumentError("Jacobian too large to materialise; use empirical_ntk")
    acts, pres = _forward_cache(model, x)
    sig = _backward_signals(model, acts, pres, np.ones((n, 1)))
    blocks = []
    for l, g in enumerate(sig):
        ws, bsc = model.config.layer_scales()[l]
        blocks.append(ws * (acts[l][:, :, None] * g[:, None, :]).reshape(n, -1))
        blocks.append(bsc * g)
    return np.concatenate(blocks, axis=1)


def empirical_ntk(model: MlpModel, x):
    """K(i, j) = <grad f(x_i), grad f(x_j)> / N (further divided by width in standard mode).

    Computed layer by layer as (x x^T * s_w^2 + s_b^2) o (g g^T) so the
    Jacobian is never stored.
    """
    from .stopping import KernelMatrix

    x = _check_input(model, x)
    n = x.shape[0]
    acts, pres = _forward_cache(model, x)
    sig = _backward_signals(model, acts, pres, np.ones((n, 1)))
    k = np.zeros((n, n))
    for l, g in enumerate(sig):
        ws, bsc = model.config.layer_scales()[l]
        k += (ws * ws * (acts[l] @ acts[l].T) + bsc * bsc) * (g @ g.T)
    k /= n
    if model.config.parameterization == "standard":
        k /= model.config.width
    return KernelMatrix(0.5 * (k + k.T))


def to_dict(model: MlpModel) -> dict:
    cfg = model.config
    return {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "config": {
            "widths": list(cfg.widths),
            "activation": cfg.activation,
            "parameterization": cfg.parameterization,
            "sigma_w": cfg.sigma_w,
            "sigma_b": cfg.sigma_b,
            "eta0": cfg.eta0,
        },
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
    }


def from_dict(blob: dict) -> MlpModel:
    if blob.get("format") != FORMAT or blob.get("version") != FORMAT_VERSION:
        raise InvalidArgumentError("not a viforge MLP checkpoint (or unsupported version)")
    cfg = MlpConfig(**{**blob["config"], "widths": tuple(blob["config"]["widths"])})
    ws = tuple(np.array(w, dtype=float).reshape(a, b) for w, a, b in
               zip(blob["weights"], cfg.widths[:-1], cfg.widths[1:]))
    bs = tuple(np.array(b, dtype=float) for b in blob["biases"])
    return MlpModel(cfg, ws, bs)


def save(model: MlpModel, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_dict(model), fh)


def load(path) -> MlpModel:
    with open(path, encoding="utf-8") as fh:
        return from_dict(json.load(fh))


class _Session:
    def __init__(self, model, x, y, x_val, step):
        self.model = model
        self.x, self.y, self.x_val = x, y, x_val
        self.step_size = step
        self._refresh()

    def _refresh(self):
        self._acts, self._pres = _forward_cache(self.model, self.x)
        self.pred = self._pres[-1][:, 0]
        self.val_pred = None if self.x_val is None else forward(self.model, self.x_val)

    def step(self, rng=None):
        resid = self.pred - self.y
        grads = _loss_gradient(self.model, self._acts, self._pres, resid)
        self.model = _apply_step(self.model, grads, self.step_size)
        self._refresh()


class MlpLearner:
    """Builds and trains networks whose input width follows the dataset."""

    family = "mlp"

    def __init__(self, hidden=(256,), auto_step=False, **config_kw):
        self.hidden = tuple(hidden)
        self.auto_step = auto_step
        self.config_kw = config_kw

    def config_for(self, n_inputs) -> MlpConfig:
        return MlpConfig.make(n_inputs, self.hidden, **self.config_kw)

    def init(self, data, rng: RngStream) -> MlpModel:
        model = init(self.config_for(data.p), rng.child("init"))
        if self.auto_step:
            model = stable_step(model, data.x)
        return model

    def session(self, model: MlpModel, x, y, x_val=None):
        x = _check_input(model, x)
        x_val = None if x_val is None else _check_input(model, x_val)
        return _Session(model, x, np.asarray(y, dtype=float), x_val, model.config.effective_step)

    def with_options(self, **kw) -> "MlpLearner":
        auto = kw.pop("auto_step", self.auto_step)
        return MlpLearner(self.hidden, auto, **{**self.config_kw, **kw})

    def describe(self):
        cfg = self.config_for(1)
        return {"family": "mlp", "hidden": list(self.hidden), **{k: v for k, v in vars(cfg).items() if k != "widths"}}


def with_eta(model: MlpModel, eta0) -> MlpModel:
    return MlpModel(replace(model.config, eta0=eta0), model.weights, model.biases)


def stable_step(model: MlpModel, x, max_rows=AUTO_STEP_ROWS) -> MlpModel:
    """Lower eta0 so the effective step is at most 1 / lambda_1 of the empirical
    NTK at ``model`` (estimated on the first ``max_rows`` rows)."""
    lam1 = empirical_ntk(model, np.asarray(x)[:max_rows]).eigenvalues[0]
    step = model.config.effective_step
    if lam1 <= 0 or step <= 1.0 / lam1:
        return model
    scale = 1.0 if model.config.parameterization == "ntk" else model.config.width
    return with_eta(model, scale / lam1)
