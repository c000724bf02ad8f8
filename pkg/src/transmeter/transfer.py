"""Transferability scores, baselines, pair measurement and source ranking."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset, fit_norm_stats, split, znormalize
from .errors import InvalidArgumentError, ShapeError, UndefinedScoreError
from .model import SourceModel, predict_label
from .train import (
    TrainConfig,
    accuracy,
    derive_rng,
    fit_classifier,
    grid_search,
    pretrain_source,
    train_transmeter,
)

ABLATIONS = ("full", "no_pretrain", "no_recon")
SUMMARY_COLUMNS = ("source", "target", "acc_0", "acc_T", "transferability", "flip", "alpha", "beta", "seed")

_TAG_SPLIT = 41
_TAG_FINAL = 53
_TAG_PRETRAIN = 59


@dataclass
class TransferReport:
    source_name: str
    target_name: str
    acc_0: float
    acc_T: float
    transferability: float
    chosen_config: TrainConfig
    flip_used: bool
    wall_time_seconds: float = 0.0
    cv_score: float = float("nan")
    stopped_epoch: int = 0
    best_epoch: int = 0

    def to_dict(self) -> Dict:
        return {
            "source": self.source_name,
            "target": self.target_name,
            "acc_0": self.acc_0,
            "acc_T": self.acc_T,
            "transferability": self.transferability,
            "flip_used": self.flip_used,
            "cv_score": self.cv_score,
            "stopped_epoch": self.stopped_epoch,
            "best_epoch": self.best_epoch,
            "config": self.chosen_config.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Dict, wall_time_seconds: float = 0.0) -> "TransferReport":
        return cls(
            source_name=d["source"],
            target_name=d["target"],
            acc_0=d["acc_0"],
            acc_T=d["acc_T"],
            transferability=d["transferability"],
            chosen_config=TrainConfig.from_dict(d["config"]),
            flip_used=d["flip_used"],
            wall_time_seconds=wall_time_seconds,
            cv_score=d.get("cv_score", float("nan")),
            stopped_epoch=d.get("stopped_epoch", 0),
            best_epoch=d.get("best_epoch", 0),
        )


@dataclass
class Ranking:
    entries: List[tuple]
    k: int
    selected: List[str] = field(default_factory=list)

    @property
    def expanded(self) -> bool:
        return len(self.selected) > self.k


@dataclass(frozen=True)
class Protocol:
    """Settings of one measurement run that are not per-config hyperparameters."""

    train_fraction: float = 0.7
    folds: int = 3
    seed: int = 0
    jobs: int = 1


def evaluate_accuracy(predictions, labels) -> float:
    """Share of rows where ``prediction >= 0.5`` matches the label."""
    return accuracy(predictions, labels)


def transferability(acc_T: float, acc_0: float) -> float:
    if acc_0 <= 0:
        raise UndefinedScoreError("transferability is undefined for a zero baseline accuracy")
    return (acc_T - acc_0) / acc_0 * 100.0


def train_baseline(
    target_train: Dataset,
    target_test: Dataset,
    cfg: TrainConfig,
    seeds: Optional[Sequence[int]] = None,
) -> float:
    """Test accuracy of a target-only classifier with the label-predictor shape.

    Each seed trains one model; the seed with the best held-out validation
    accuracy (then lowest validation loss) is kept.
    """
    seeds = sorted(set(seeds)) if seeds else [cfg.seed]
    best = None
    for seed in seeds:
        net, history = fit_classifier(target_train, replace(cfg, seed=seed, flip=False), cfg.predictor_widths)
        rec = history.records[history.best_epoch - 1]
        key = (-rec.val_accuracy, rec.val.total)
        if best is None or key < best[0]:
            best = (key, net)
    net = best[1]
    return accuracy(net.forward(target_test.features).reshape(-1), target_test.labels)


def prepare_target(target: Dataset, protocol: Protocol):
    """Split 7:3 (by default) and z-normalize with training statistics."""
    train, test = split(target, protocol.train_fraction, derive_rng(protocol.seed, _TAG_SPLIT))
    (train, test), _ = znormalize(train, [test])
    return train, test


def pretrain_dataset(
    ds: Dataset,
    cfg: TrainConfig,
    train_fraction: float = 0.7,
    hidden_widths: Optional[Sequence[int]] = None,
) -> Tuple[SourceModel, float]:
    """Split, z-normalize on the training part, pretrain; returns test accuracy.

    The normalization statistics travel with the model so later runs see the
    source exactly as the classifier did.
    """
    train, test = split(ds, train_fraction, derive_rng(cfg.seed, _TAG_PRETRAIN))
    (train, test), stats = znormalize(train, [test])
    model, acc = pretrain_source(train, cfg, test, hidden_widths)
    model.norm = stats
    model.meta["dataset"] = ds.name
    return model, acc


def prepare_source(source: Dataset, source_model: SourceModel) -> Dataset:
    if source_model.input_dim != source.dim:
        raise ShapeError(
            f"source model for {source.name!r} takes {source_model.input_dim} features, data has {source.dim}"
        )
    norm = source_model.norm if source_model.norm is not None else fit_norm_stats(source)
    return norm.apply(source)


def measure_pair(
    source: Dataset,
    source_model: SourceModel,
    target: Dataset,
    grid: Sequence[TrainConfig],
    protocol: Protocol = Protocol(),
    acc_0: Optional[float] = None,
) -> TransferReport:
    """Grid-search, retrain on the whole target training split, score.

    ``acc_0`` may be passed in when several sources share one target.
    """
    start = time.perf_counter()
    source_n = prepare_source(source, source_model)
    target_train, target_test = prepare_target(target, protocol)

    result = grid_search(
        source_n, target_train, grid, protocol.folds, source_model, base_seed=protocol.seed, jobs=protocol.jobs
    )
    best = result.best
    model, history = train_transmeter(source_n, target_train, best, source_model, stream=(protocol.seed, _TAG_FINAL))
    test_labels = 1 - target_test.labels if best.flip else target_test.labels
    acc_T = accuracy(predict_label(model, target_test.features), test_labels)
    if acc_0 is None:
        acc_0 = train_baseline(target_train, target_test, best, seeds=[c.seed for c in grid])
    return TransferReport(
        source_name=source.name,
        target_name=target.name,
        acc_0=acc_0,
        acc_T=acc_T,
        transferability=transferability(acc_T, acc_0),
        chosen_config=best,
        flip_used=best.flip,
        wall_time_seconds=time.perf_counter() - start,
        cv_score=result.score,
        stopped_epoch=history.stopped_epoch,
        best_epoch=history.best_epoch,
    )


def rank_sources(reports: Sequence[TransferReport], k: int) -> Ranking:
    """Top-k by transferability, widened to every source tied with the k-th score."""
    if k < 1:
        raise InvalidArgumentError("k must be >= 1")
    if not reports:
        raise InvalidArgumentError("no reports to rank")
    entries = sorted(((r.source_name, r.transferability) for r in reports), key=lambda e: (-e[1], e[0]))
    cutoff = entries[min(k, len(entries)) - 1][1]
    selected = [name for name, score in entries if score >= cutoff]
    return Ranking(entries, k, selected)


def ablation_config(base: TrainConfig, variant: str) -> TrainConfig:
    if variant == "full":
        return base
    if variant == "no_pretrain":
        return replace(base, use_pretrained_init=False)
    if variant == "no_recon":
        return replace(base, use_reconstruction=False)
    raise InvalidArgumentError(f"unknown ablation variant {variant!r}; choose from {ABLATIONS}")


# serialization ------------------------------------------------------------


def write_reports(reports: Iterable[TransferReport], path) -> None:
    """One JSON object per line."""
    lines = [json.dumps(r.to_dict(), sort_keys=True) for r in reports]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_reports(path) -> List[TransferReport]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(TransferReport.from_dict(json.loads(line)))
    return out


def write_summary(reports: Iterable[TransferReport], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for r in reports:
            c = r.chosen_config
            writer.writerow(
                [r.source_name, r.target_name, repr(r.acc_0), repr(r.acc_T), repr(r.transferability),
                 int(r.flip_used), repr(c.alpha), repr(c.beta), c.seed]
            )


def write_timings(reports: Iterable[TransferReport], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("source", "target", "wall_time"))
        for r in reports:
            writer.writerow([r.source_name, r.target_name, f"{r.wall_time_seconds:.3f}"])


def format_ranking(ranking: Ranking) -> str:
    lines = [f"{'rank':>4}  {'source':<24} {'transferability':>16}  selected"]
    for i, (name, score) in enumerate(ranking.entries, start=1):
        mark = "*" if name in ranking.selected else ""
        lines.append(f"{i:>4}  {name:<24} {score:>16.4f}  {mark}")
    note = f"top-{ranking.k}: {len(ranking.selected)} selected"
    if ranking.expanded:
        note += " (expanded to include ties at rank k)"
    lines.append(note)
    return "\n".join(lines)
