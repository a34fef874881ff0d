"""TResNet on the CPU: a numpy inference engine, cost analyzer and gradient checker."""
from .analysis import (
    compare,
    cost_report,
    count_macs,
    count_params,
    estimate_activation_memory,
    max_batch,
)
from .errors import (
    ConfigError,
    DimensionError,
    ImageError,
    PaddingError,
    ParameterError,
    TResNetError,
    ValidationError,
    WeightFormatError,
    WeightLoadError,
)
from .model import VARIANTS, Model, ModelConfig, StageSpec, build, build_resnet50_baseline, forward, get_config
from .weights import load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "VARIANTS", "Model", "ModelConfig", "StageSpec", "build", "build_resnet50_baseline", "forward",
    "get_config", "load_weights", "save_weights", "compare", "cost_report", "count_macs", "count_params",
    "estimate_activation_memory", "max_batch", "ConfigError", "DimensionError", "ImageError",
    "PaddingError", "ParameterError", "TResNetError", "ValidationError", "WeightFormatError",
    "WeightLoadError",
]
