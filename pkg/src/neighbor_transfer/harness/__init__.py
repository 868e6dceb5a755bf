from .config import ConfigError, ExperimentConfig, from_dict, load_config
from .evaluation import evaluate_split
from .experiment import RunResult, evaluate, run, run_experiment
from .optim import Adam
from .training import RunHistory, TrainingDivergedError, train

__all__ = [
    "Adam", "ConfigError", "ExperimentConfig", "RunHistory", "RunResult", "TrainingDivergedError",
    "evaluate", "evaluate_split", "from_dict", "load_config", "run", "run_experiment", "train",
]
