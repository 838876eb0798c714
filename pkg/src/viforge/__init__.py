"""Warm-start early-stopping variable importance for neural networks and boosted trees."""
from .data import Dataset, DropSpec, drop_features, load_csv, split
from .errors import (BudgetError, ConfigError, InvalidArgumentError, NotPSDError,
                     NumericOverflowError, ParseError, UndefinedVarianceError, VIForgeError)
from .numerics import RngStream, sym_eig

__version__ = "0.1.0"
