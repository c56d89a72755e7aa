"""Deeply-supervised knowledge synergy training engine.

The heavy lifting (training loops, checkpoints, the CLI) lives in the
compiled core; this package re-exports the pieces useful from Python:
the loss algebra, pair-set construction, data utilities, a model handle
and the Monte-Carlo verification entry point.
"""

from ._core import (
    Model,
    build_pair_set,
    corrupt_labels,
    cross_entropy,
    fixture_names,
    generate_synthetic,
    knowledge_match,
    lr_at,
    softmax,
    synergy_decomposition,
    total_loss,
)

__all__ = [
    "Model",
    "build_pair_set",
    "corrupt_labels",
    "cross_entropy",
    "fixture_names",
    "generate_synthetic",
    "knowledge_match",
    "lr_at",
    "softmax",
    "synergy_decomposition",
    "total_loss",
]

__version__ = "0.1.0"
