"""Family-agnostic helpers over fitted models (``MlpModel`` or ``GbdtEnsemble``).

Each model family registers its ``predict`` implementation and supplies a
learner object with ``init`` (fresh model for a dataset) and ``session``
(an incremental trainer). Training drivers only rely on that duck-typed surface:

    session = learner.session(model, x, y, x_val)
    session.step(rng)          # one epoch / boosting iteration
    session.model, session.pred, session.val_pred
"""
from __future__ import annotations

from functools import singledispatch

import numpy as np


@singledispatch
def predict(model, x) -> np.ndarray:
    raise TypeError(f"no predict registered for {type(model).__name__}")


def mse(y, pred):
    r = np.asarray(y) - np.asarray(pred)
    return float(np.mean(r * r))


def half_mse(y, pred):
    return 0.5 * mse(y, pred)
