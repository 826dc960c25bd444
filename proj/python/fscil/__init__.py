"""Few-shot class-incremental learning: routing, rectification, metrics and runs."""

import json

from ._core import (
    ArgumentError,
    ContractViolation,
    DomainError,
    FormatError,
    NumericError,
    PredictionNet,
    SessionStats,
    TaskRouter,
    UsageError,
    build_splits,
    fit_class_stats,
    generate_blobs,
    mahalanobis,
)
from . import _core

__all__ = [
    "ArgumentError",
    "ContractViolation",
    "DomainError",
    "FormatError",
    "NumericError",
    "PredictionNet",
    "SessionStats",
    "TaskRouter",
    "UsageError",
    "build_splits",
    "compute_metrics",
    "fit_class_stats",
    "generate_blobs",
    "mahalanobis",
    "profile",
    "run",
    "without",
]


def compute_metrics(evals, session_classes):
    """Metrics from (labels, predictions) pairs, one per evaluation point."""
    pairs = [(list(map(int, y)), list(map(int, p))) for y, p in evals]
    return json.loads(_core.compute_metrics_json(pairs, [list(map(int, c)) for c in session_classes]))


def profile(name="desk"):
    """Run configuration of a named profile as a dict."""
    return json.loads(_core.profile_json(name))


def without(config, toggle):
    """Copy of `config` with one component disabled."""
    return json.loads(_core.without_json(json.dumps(config), toggle))


def run(config, seed=0):
    """Full incremental run; returns the run record as a dict."""
    return json.loads(_core.run_json(json.dumps(config), seed))
