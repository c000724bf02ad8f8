"""Estimate how much a source dataset helps a target task with a different feature space."""

from .data import Dataset, load_csv, load_registry
from .errors import (
    DegenerateDataError,
    InvalidArgumentError,
    LoadError,
    ShapeError,
    StateError,
    TransmeterError,
    UndefinedScoreError,
)
from .model import build_source_model, build_transmeter, load_source_model, load_transmeter
from .train import TrainConfig, grid_search, make_grid, pretrain_source, train_transmeter
from .transfer import (
    Protocol,
    Ranking,
    TransferReport,
    ablation_config,
    measure_pair,
    pretrain_dataset,
    rank_sources,
    train_baseline,
    transferability,
)

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "DegenerateDataError",
    "InvalidArgumentError",
    "LoadError",
    "Protocol",
    "Ranking",
    "ShapeError",
    "StateError",
    "TrainConfig",
    "TransferReport",
    "TransmeterError",
    "UndefinedScoreError",
    "ablation_config",
    "build_source_model",
    "build_transmeter",
    "grid_search",
    "load_csv",
    "load_registry",
    "load_source_model",
    "load_transmeter",
    "make_grid",
    "measure_pair",
    "pretrain_dataset",
    "pretrain_source",
    "rank_sources",
    "train_baseline",
    "train_transmeter",
    "transferability",
]
