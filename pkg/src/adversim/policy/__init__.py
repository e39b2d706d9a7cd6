"""Behavior-cloning policy: feature extraction, a small MLP with exact
analytic gradients, and deterministic single-threaded training."""

from .features import (
    FEATURES_PER_CHANNEL,
    PROPRIO_DIM,
    FeatureSpec,
    feature_spec,
    featurize,
    featurize_units,
)
from .network import (
    ACTION_DIM,
    PARAMS_SCHEMA_VERSION,
    PolicyParams,
    forward,
    forward_batch,
    init_params,
    load_params,
    loss_and_grad,
    params_equal,
    save_params,
)
from .train import TrainConfig, train

__all__ = [
    "FEATURES_PER_CHANNEL",
    "PROPRIO_DIM",
    "FeatureSpec",
    "feature_spec",
    "featurize",
    "featurize_units",
    "ACTION_DIM",
    "PARAMS_SCHEMA_VERSION",
    "PolicyParams",
    "forward",
    "forward_batch",
    "init_params",
    "load_params",
    "loss_and_grad",
    "params_equal",
    "save_params",
    "TrainConfig",
    "train",
]
