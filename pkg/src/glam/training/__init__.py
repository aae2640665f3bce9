"""Training loop, evaluation, checkpoints, metrics, plots and score utilities."""

from .checkpoint import CheckpointMismatch, latest_checkpoint, read_container, write_container
from .metrics import MetricsWriter, read_metrics, stable_view
from .scores import aggregate_scores, human_normalized, load_reference
from .trainer import (
    Counters,
    EvalResult,
    Trainer,
    TrainingAborted,
    context_feature,
    episode_rng,
    evaluate,
    replay_episode_log,
)
