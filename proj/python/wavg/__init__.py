"""Python bindings for the wavg weight-averaging library."""

import json

from ._core import (
    ConfigError,
    ContractError,
    Ema,
    InputError,
    accuracy_nll,
    builtin_config,
    churn,
    ece,
    effective_decay,
    js_divergence,
    lr_at,
    resolve_config,
    softmax,
    temperature_scale,
    warmup_decay,
)
from ._core import train_run as _train_run

__all__ = [
    "ConfigError",
    "ContractError",
    "Ema",
    "InputError",
    "accuracy_nll",
    "config",
    "churn",
    "ece",
    "effective_decay",
    "js_divergence",
    "lr_at",
    "resolve_config",
    "softmax",
    "temperature_scale",
    "train",
    "warmup_decay",
]


def config(name="base", **overrides):
    """Builtin config as a dict; `section__key=value` keyword overrides are applied."""
    cfg = json.loads(builtin_config(name))
    for key, value in overrides.items():
        node = cfg
        *path, leaf = key.split("__")
        for part in path:
            node = node.setdefault(part, {})
        node[leaf] = value
    return cfg


def train(cfg, seed=1):
    """Train one run. Returns (epoch records, summary, val logits by model, val labels)."""
    out = _train_run(json.dumps(cfg), seed)
    lines = [json.loads(line) for line in out["record"].splitlines() if line]
    return lines[:-1], lines[-1], out["val_logits"], out["val_labels"]
