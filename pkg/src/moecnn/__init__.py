"""Sparsely-gated mixture-of-experts layers for convolutional residual networks."""

from .constraints import ConstraintConfig, ConstraintKind, ImportanceTracker
from .models import ModelConfig, build_baseline, build_model, count_macs
from .moe import GateConfig, GateKind, MoELayer, RoutingMode, topk_sparsify

__version__ = "0.1.0"

__all__ = [
    "ConstraintConfig",
    "ConstraintKind",
    "GateConfig",
    "GateKind",
    "ImportanceTracker",
    "MoELayer",
    "ModelConfig",
    "RoutingMode",
    "build_baseline",
    "build_model",
    "count_macs",
    "topk_sparsify",
]
