"""Foreground/background adversarial person re-identification at desk scale."""

from .config import Config, ConfigError, load_config
from .estimator import FBAReID, check_reid_inputs
from .evaluator import EvalReport, evaluate, map_cmc
from .model import FBAModel
from .trainer import train, train_model

__all__ = [
    "Config",
    "ConfigError",
    "EvalReport",
    "FBAModel",
    "FBAReID",
    "check_reid_inputs",
    "evaluate",
    "load_config",
    "map_cmc",
    "train",
    "train_model",
]
__version__ = "0.1.0"
