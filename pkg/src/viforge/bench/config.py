"""Experiment configuration and run records.

Config files are flat ``key = value`` lines; values are Python/TOML-style
literals (numbers, quoted strings, ``true``/``false``, ``[a, b]`` lists).
``#`` starts a comment.
"""
from __future__ import annotations

import ast
import math
from dataclasses import asdict, dataclass, field, fields, replace

from ..errors import ConfigError

EXPERIMENTS = ("rate", "corr-linear", "highdim", "shapley-logistic", "wald-coverage", "real-csv")
MODELS = ("mlp", "gbdt")
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    model: str = "mlp"
    seed: int = 0
    replicates: int = 10
    out_dir: str = "results"
    workers: int = 1
    n: int = 2000
    n_grid: tuple = (200, 400, 800, 1600)
    rho_grid: tuple = (0.0, 0.25, 0.5, 0.75)
    p: int = 6
    beta: tuple = (1.5, 1.2, 1.0, 0.0, 0.0, 0.0)
    noise_sd: float = 1.0
    rule_sigma: float | None = None  # noise level handed to the stopping rule; defaults to noise_sd
    kind: str = "linear"
    q: float = 0.75
    patience: int = 10
    max_epochs: int = 2000
    width: int = 256
    eta0: float = 1.0
    auto_step: bool = False  # cap the network step at 1 / lambda_1 of the initial NTK
    activation: str = "relu"
    parameterization: str = "ntk"
    depth: int = 2
    tree_beta: float = 10000.0
    epsilon: float = 0.1
    borders: int = 32
    samples: int = 50
    alpha: float = 0.05
    methods: tuple = ("early_stop", "dropout", "retrain")
    n_eval: int = 2000
    data: str | None = None
    target: str | None = None
    standardize: bool = True  # z-score CSV features and response before fitting

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; expected one of {MODELS}")
        if self.replicates < 1:
            raise ConfigError("replicates must be at least 1")
        if not self.n_grid or not self.rho_grid or not self.methods:
            raise ConfigError("grids must be non-empty")
        for m in self.methods:
            if m not in ("early_stop", "dropout", "retrain"):
                raise ConfigError(f"unknown VI method {m!r}")
        if not 0 < self.q < 1:
            raise ConfigError("q must lie in (0, 1)")

    @property
    def stop_sigma(self):
        return self.noise_sd if self.rule_sigma is None else self.rule_sigma

    def with_overrides(self, **kw) -> "ExperimentConfig":
        known = {f.name for f in fields(self)}
        bad = sorted(set(kw) - known)
        if bad:
            raise ConfigError(f"unknown config keys: {', '.join(bad)}")
        return replace(self, **{k: _coerce(k, v) for k, v in kw.items()})

    def to_dict(self):
        return asdict(self)


# Per-experiment desk-scale defaults layered over the dataclass defaults.
DEFAULTS = {
    "rate": dict(model="gbdt", p=3, noise_sd=1.0, replicates=10, epsilon=1.0),
    "corr-linear": dict(n=5000, replicates=10),
    "highdim": dict(p=50, n=2000, replicates=5, methods=("early_stop", "dropout", "retrain")),
    "wald-coverage": dict(model="gbdt", rho_grid=(0.0, 0.2, 0.5, 0.8, 1.0), replicates=100,
                          methods=("early_stop",)),
    "shapley-logistic": dict(p=10, n=5000, samples=50, replicates=10),
    "real-csv": dict(model="mlp", replicates=1, samples=20, target="NOX", auto_step=True),
}


def default_config(experiment, **overrides) -> ExperimentConfig:
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}; expected one of {EXPERIMENTS}")
    base = ExperimentConfig(experiment, **DEFAULTS[experiment])
    return base.with_overrides(**overrides) if overrides else base


_TUPLE_KEYS = {"n_grid", "rho_grid", "beta", "methods"}


def _coerce(key, value):
    if key in _TUPLE_KEYS:
        if isinstance(value, (str, int, float)):
            value = [value]
        return tuple(value)
    return value


def parse_config_text(text) -> dict:
    out = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]") and "=" not in line):
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if not key.isidentifier():
            raise ConfigError(f"line {line_no}: bad key {key!r}")
        val = {"true": "True", "false": "False"}.get(val, val)
        try:
            out[key] = ast.literal_eval(val)
        except (ValueError, SyntaxError):
            raise ConfigError(f"line {line_no}: cannot parse value {val!r} for {key!r}") from None
    return out


def load_config(path, experiment=None, **overrides) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            values = parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    exp = experiment or values.pop("experiment", None)
    values.pop("experiment", None)
    if exp is None:
        raise ConfigError("config does not name an experiment")
    return default_config(exp, **{**values, **overrides})


@dataclass
class RunRecord:
    experiment: str
    seed: int
    replicate: int
    params: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    wall_ms: float = 0.0

    def __post_init__(self):
        for k, v in self.metrics.items():
            if not math.isfinite(v):
                raise ValueError(f"metric {k} is not finite: {v}")

    def to_dict(self, timing=True):
        d = {"experiment": self.experiment, "seed": self.seed, "replicate": self.replicate,
             "params": self.params}
        if timing:
            d["metrics"], d["wall_ms"] = dict(self.metrics), self.wall_ms
        else:
            d["metrics"] = {k: v for k, v in self.metrics.items() if not k.endswith("_ms")}
        return d
