"""Per-tensor fixed-point precision assignment for neural-network training."""

from .assigner import (
    LayerPrecision,
    PrecisionConfig,
    build_config,
    feedforward_offsets,
    perturb_config,
    sweep_bmin,
    verify_criteria,
)
from .costs import NetworkDescriptor, cost_report
from .errors import (
    AssignmentError,
    ConfigurationError,
    DomainError,
    FormatError,
    FxError,
    NumericError,
    SchemaError,
    StateError,
)
from .fxnum import QuantizerSpec, quantize
from .stats import StatsBundle, compute_noise_gains, load_stats

__version__ = "0.1.0"

__all__ = [
    "AssignmentError",
    "ConfigurationError",
    "DomainError",
    "FormatError",
    "FxError",
    "LayerPrecision",
    "NetworkDescriptor",
    "NumericError",
    "PrecisionConfig",
    "QuantizerSpec",
    "SchemaError",
    "StateError",
    "StatsBundle",
    "build_config",
    "compute_noise_gains",
    "cost_report",
    "feedforward_offsets",
    "load_stats",
    "perturb_config",
    "quantize",
    "sweep_bmin",
    "verify_criteria",
]
