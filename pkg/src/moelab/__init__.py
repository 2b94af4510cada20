"""Desk-scale mixture-of-experts lab: routing analysis, language-aware expert
selection, masked training and checks of the isolation theory."""

__version__ = "0.1.0"

from .errors import ConfigError, InputError, MoelabError, TrainingError
from .model import ExpertId, ModelConfig, MoeModel, forward, init_model, prune_experts
from .routing import RoutingProfile, collect_profile, global_topk, jaccard
from .selection import SelectionConfig, select_subnetwork
from .training import TrainConfig, build_mask, train

__all__ = [
    "ConfigError",
    "ExpertId",
    "InputError",
    "ModelConfig",
    "MoeModel",
    "MoelabError",
    "RoutingProfile",
    "SelectionConfig",
    "TrainConfig",
    "TrainingError",
    "build_mask",
    "collect_profile",
    "forward",
    "global_topk",
    "init_model",
    "jaccard",
    "prune_experts",
    "select_subnetwork",
    "train",
]
