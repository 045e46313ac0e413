__version__ = "0.1.0"

from .base import Stage, ShapeError, NumericError, ConfigError, DegenerateProblem
from . import autodiff
from .TwoColorsEnv import TwoColorsEnv, TrajectoryWriter
from .ActorCriticRunner import ActorCriticRunner
from .QLambdaRunner import QLambdaRunner
from .MultitaskRunner import MultitaskRunner
from .NanGuard import NanGuard
from .MetricsWriter import MetricsWriter
from .config import ExperimentConfig, PRESETS, load_config, resolve
from .experiments import run, sweep
