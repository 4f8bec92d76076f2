"""Modular networks for continual learning with a task-driven prior over paths."""

from .graph import (
    FrozenModuleError,
    InvalidPathError,
    ModuleId,
    ModuleLibrary,
    NeuralModule,
    Path,
    backward_path,
    forward_path,
    read_snapshot,
    write_snapshot,
)
from .harness import ConfigError, ExperimentConfig, StreamCursor, run_experiment
from .learners import LEARNERS, make_learner
from .metrics import AccuracyMatrix, avg_accuracy, forgetting, lca, transfer
from .prior import candidate_paths, closest_task, knn_predict, random_prior
from .streams import Stream, TaskSpec, build_stream
from .training import HyperGrid, TrainBudget

__version__ = "0.1.0"
