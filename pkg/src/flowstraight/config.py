"""Run-config loading and schema validation.

Configs are JSON documents with one section per pipeline concern. The
validator walks a declarative schema, rejects unknown keys (naming the full
path), and type-checks every leaf before any work starts.
"""

from __future__ import annotations

import hashlib
import json

from .errors import ConfigError

_NUM = (int, float)

_DIST_SCHEMA = {
    "kind": str,
    "mean": _NUM,
    "sigma": _NUM,
    "dim": int,
    "radius": _NUM,
    "noise": _NUM,
    "cells": int,
    "extent": _NUM,
}

_FIELD_SCHEMA = {
    "kind": str,
    "checkpoint": str,
    "use_ema": bool,
    "mean0": _NUM,
    "sigma0": _NUM,
    "mean1": _NUM,
    "sigma1": _NUM,
    "dim": int,
    "x0": list,
    "x1": list,
    "lam": _NUM,
    "omega": _NUM,
    "c": list,
}

_SOLVER_SCHEMA = {
    "method": str,
    "n_steps": int,
    "rtol": _NUM,
    "atol": _NUM,
    "h_init": _NUM,
}

SCHEMA = {
    "seed": int,
    "out": str,
    "data": {"source": _DIST_SCHEMA, "target": _DIST_SCHEMA},
    "model": {"hidden": list, "n_freqs": int, "activation": str},
    "train": {
        "batch_size": int,
        "steps": int,
        "lr": _NUM,
        "beta1": _NUM,
        "beta2": _NUM,
        "eps": _NUM,
        "ema_decay": _NUM,
        "ema_warmup": bool,
    },
    "segmentation": {"k": int},
    "solver": _SOLVER_SCHEMA,
    "reflow": {
        "per_segment_n": int,
        "cold_start": bool,
        "train": {
            "batch_size": int,
            "steps": int,
            "lr": _NUM,
            "beta1": _NUM,
            "beta2": _NUM,
            "eps": _NUM,
            "ema_decay": _NUM,
            "ema_warmup": bool,
        },
    },
    "sample": {"n": int, "mode": str},
    "metrics": {
        "set": list,
        "n": int,
        "nfe_list": list,
        "t_grid": list,
        "lipschitz_eps": _NUM,
        "variance_edges": list,
        "variance_draws": int,
        "variance_min_count": int,
    },
    "solve": {
        "field": _FIELD_SCHEMA,
        "x0": list,
        "interval": list,
        "solver": _SOLVER_SCHEMA,
        "study_n_list": list,
        "study_methods": list,
        "segment_k_list": list,
        "segment_n_per": int,
        "lipschitz_const": _NUM,
    },
    "pipeline": list,
}


def _check(node, schema, path):
    if isinstance(schema, dict):
        if not isinstance(node, dict):
            raise ConfigError(f"{path or 'config'}: expected an object, got {type(node).__name__}")
        for key, val in node.items():
            here = f"{path}.{key}" if path else key
            if key not in schema:
                raise ConfigError(f"unknown config key: {here}")
            _check(val, schema[key], here)
        return
    # bool is an int subclass; keep them distinct
    if schema is int and isinstance(node, bool):
        raise ConfigError(f"{path}: expected int, got bool")
    if schema == _NUM and isinstance(node, bool):
        raise ConfigError(f"{path}: expected number, got bool")
    if not isinstance(node, schema):
        want = schema.__name__ if isinstance(schema, type) else "number"
        raise ConfigError(f"{path}: expected {want}, got {type(node).__name__}")


def validate_config(doc: dict) -> dict:
    _check(doc, SCHEMA, "")
    return doc


def load_config(path) -> tuple[dict, str]:
    """Read, validate, and hash a config file. Returns (doc, sha256 hex)."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    validate_config(doc)
    return doc, hashlib.sha256(raw).hexdigest()
