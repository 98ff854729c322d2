"""Python interface to the mmml C++ core.

Config arguments are dicts in the same schema as the CLI's --config JSON file.
"""

import json

from ._mmml import (
    GRADCHECK_TOLERANCE,
    ConfigError,
    ContractError,
    DimensionError,
    Error,
    FileError,
    FormatError,
    Model,
    NumericError,
    ParseError,
    Sample,
    UndefinedMetricError,
    full_report,
    gradcheck,
    load_jsonl,
    load_model,
    save_jsonl,
)
from . import _mmml

__all__ = [
    "GRADCHECK_TOLERANCE", "ConfigError", "ContractError", "DimensionError", "Error", "FileError",
    "FormatError", "Model", "NumericError", "ParseError", "Sample", "UndefinedMetricError",
    "full_report", "generate", "gradcheck", "init_model", "load_jsonl", "load_model", "save_jsonl", "train",
]


def _dump(config):
    return json.dumps(config) if config else ""


def generate(config=None, run_seed=0):
    return _mmml.generate(_dump(config), run_seed)


def init_model(config=None, samples=(), seed=0):
    return _mmml.init_model(_dump(config), list(samples), seed)


def train(samples, config=None, seed=0):
    """Returns (model, history, best_epoch, stop_reason, splits)."""
    return _mmml.train(list(samples), _dump(config), seed)
