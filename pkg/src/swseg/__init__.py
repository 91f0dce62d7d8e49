"""PSO-tuned U-Net segmentation in plain numpy."""

from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    NumericError,
    ShapeError,
    SwsegError,
    UndefinedMetricError,
)
from .unet import UNetConfig, UNetModel, build, load_checkpoint, param_count, save_checkpoint
from .train import TrainSettings, TrainTrace, train
from .pso import SearchSpace, SwarmConfig, optimize, unet_space
from .objective import UNetObjective, unet_objective
from .data import Dataset, SynthSpec, generate, preprocess, split
from .metrics import MetricsReport, evaluate

__version__ = "0.1.0"
