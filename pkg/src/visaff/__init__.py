"""Attention-pooled multi-task regression engine for per-image affect scores."""

from .dataset import (
    DIMENSIONS,
    FeatureTensor,
    LabelMatrix,
    aggregate_labels,
    kfold_split,
    read_features,
    scale_rating,
    synth_planted_dataset,
    write_features,
)
from .evaluation import MetricsReport, build_report, pearson, r_squared, rmse
from .model import (
    ModelConfig,
    ModelParams,
    forward,
    init_params,
    joint_loss,
    load_checkpoint,
    save_checkpoint,
)
from .training import AdamState, TrainConfig, adam_step, run_experiment, train_fold

__version__ = "0.1.0"
