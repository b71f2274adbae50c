"""Self-supervised representation learning and transfer for well-log intervals.

Everything runs on a small reverse-mode autodiff core over float64 numpy
arrays; see the submodules for details.
"""

from .autodiff import NumericalError, ShapeError, SVDNonConvergence, Tensor
from .data import DataError, PairingRule, WellRecord, load_wells
from .models import Model, ModelSpec, load_model, save_model
from .params import ParameterSet
from .runner import ConfigError, ExperimentConfig, MetricsReport, load_config
from .training import TrainConfig, fit
from .transfer import SourceAnchor, TransferConfig, transfer_fit

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "ExperimentConfig",
    "MetricsReport",
    "Model",
    "ModelSpec",
    "NumericalError",
    "PairingRule",
    "ParameterSet",
    "SVDNonConvergence",
    "ShapeError",
    "SourceAnchor",
    "Tensor",
    "TrainConfig",
    "TransferConfig",
    "WellRecord",
    "fit",
    "load_config",
    "load_model",
    "load_wells",
    "save_model",
    "transfer_fit",
]
