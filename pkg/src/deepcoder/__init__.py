"""Semi-parametric two-coder model for ordinal labels on images.

A convolutional variational autoencoder compresses images into a first
latent layer; a Gaussian-process autoencoder with an ordinal likelihood
sits on top of it.  The two are trained jointly so that held-out images
can be scored on every ordinal output and reconstructed.
"""

from .autodiff import Tape, Var
from .backend import BACKEND
from .dataio import (Dataset, SyntheticSpec, TrainConfig, generate_synthetic,
                     load_checkpoint, load_dataset, parse_config,
                     save_checkpoint, save_dataset)
from .errors import (ConfigError, DeepCoderError, FormatError,
                     InvalidArgumentError, NumericalError, ShapeError,
                     TrainingError)
from .metrics import MetricReport, UndefinedMetricError, build_report, icc31
from .trainer import TrainState, evaluate_split, infer, train_joint
from .vcae import VcaeArchitecture, desk_architecture, full_scale_architecture
from .vogpae import VogpaeState

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ConfigError",
    "Dataset",
    "DeepCoderError",
    "FormatError",
    "InvalidArgumentError",
    "MetricReport",
    "NumericalError",
    "ShapeError",
    "SyntheticSpec",
    "Tape",
    "TrainConfig",
    "TrainState",
    "TrainingError",
    "UndefinedMetricError",
    "VcaeArchitecture",
    "Var",
    "VogpaeState",
    "build_report",
    "desk_architecture",
    "evaluate_split",
    "full_scale_architecture",
    "generate_synthetic",
    "icc31",
    "infer",
    "load_checkpoint",
    "load_dataset",
    "parse_config",
    "save_checkpoint",
    "save_dataset",
    "train_joint",
    "__version__",
]
