"""Squeeze-excitation attention UNet and baselines on a numpy autodiff core."""
from .autodiff import Tensor, backward, no_grad
from .models import (
    ARCHS,
    ModelConfig,
    SegmentationNetwork,
    analytic_param_formula,
    build_model,
    canonical_config,
    count_parameters,
    summarize,
)
from .params import ParameterStore

__version__ = "0.1.0"

__all__ = [
    "ARCHS",
    "ModelConfig",
    "ParameterStore",
    "SegmentationNetwork",
    "Tensor",
    "analytic_param_formula",
    "backward",
    "build_model",
    "canonical_config",
    "count_parameters",
    "no_grad",
    "summarize",
]
