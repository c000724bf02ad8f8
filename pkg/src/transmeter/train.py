"""Training loops: source pretraining, adversarial transfer training, grid search."""

from __future__ import annotations

import itertools
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import Batch, Dataset, balanced_batches, flip_labels, make_folds
from .errors import DegenerateDataError, InvalidArgumentError
from .model import (
    DEFAULT_ENCODER_WIDTHS,
    DEFAULT_PREDICTOR_WIDTHS,
    SourceModel,
    TransmeterModel,
    build_classifier,
    build_transmeter,
    predict_label,
)
from .nn import MLP, Adam, GradientReversal, bce_grad, bce_loss, mse_recon_grad, mse_recon_loss

ALPHA_GRID = (0.003, 0.01, 0.1, 0.3, 1.0, 10.0)
BETA_GRID = (0.1, 0.5)
SEED_GRID = (1, 2, 3, 4, 5)
FLIP_GRID = (False, True)

# stream tags keep the random streams of different run kinds apart
_TAG_TRANSMETER = 11
_TAG_CLASSIFIER = 23
_TAG_FOLDS = 37


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.1
    beta: float = 0.1
    seed: int = 1
    flip: bool = False
    lr: float = 1e-3
    per_domain_batch: int = 32
    max_epochs: int = 500
    patience: int = 10
    use_pretrained_init: bool = True
    use_reconstruction: bool = True
    validation_fraction: float = 0.2
    encoder_widths: Tuple[int, ...] = DEFAULT_ENCODER_WIDTHS
    predictor_widths: Tuple[int, ...] = DEFAULT_PREDICTOR_WIDTHS

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise InvalidArgumentError("alpha and beta must be nonnegative")
        if self.patience < 1 or self.max_epochs < 1:
            raise InvalidArgumentError("patience and max_epochs must be >= 1")
        if not 0.0 < self.validation_fraction < 1.0:
            raise InvalidArgumentError("validation_fraction must be in (0, 1)")
        if self.lr <= 0 or self.per_domain_batch < 1:
            raise InvalidArgumentError("lr and per_domain_batch must be positive")
        object.__setattr__(self, "encoder_widths", tuple(self.encoder_widths))
        object.__setattr__(self, "predictor_widths", tuple(self.predictor_widths))

    @property
    def effective_beta(self) -> float:
        return self.beta if self.use_reconstruction else 0.0

    def sort_key(self) -> Tuple:
        return (self.alpha, self.beta, self.flip, self.seed)

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["predictor_widths"] = list(self.predictor_widths)
        return d

    @classmethod
    def from_dict(cls, d: Dict) -> "TrainConfig":
        return cls(**d)


@dataclass(frozen=True)
class ObjectiveBreakdown:
    label_loss: float
    domain_loss: float
    recon_loss: float
    total: float

    @classmethod
    def combine(cls, label_loss: float, domain_loss: float, recon_loss: float, alpha: float, beta: float):
        total = label_loss - alpha * domain_loss + beta * recon_loss
        return cls(float(label_loss), float(domain_loss), float(recon_loss), float(total))

    @classmethod
    def mean(cls, items: Sequence["ObjectiveBreakdown"]) -> "ObjectiveBreakdown":
        cols = np.array([[b.label_loss, b.domain_loss, b.recon_loss, b.total] for b in items])
        return cls(*(float(v) for v in cols.mean(axis=0)))


@dataclass
class EpochRecord:
    epoch: int
    train: ObjectiveBreakdown
    val: ObjectiveBreakdown
    val_accuracy: float
    elapsed: float = field(default=0.0, compare=False)


@dataclass
class TrainHistory:
    records: List[EpochRecord] = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0

    @property
    def val_losses(self) -> List[float]:
        return [r.val.total for r in self.records]

    def to_dict(self) -> Dict:
        return {
            "stopped_epoch": self.stopped_epoch,
            "best_epoch": self.best_epoch,
            "epochs": [
                {
                    "epoch": r.epoch,
                    "train": asdict(r.train),
                    "val": asdict(r.val),
                    "val_accuracy": r.val_accuracy,
                }
                for r in self.records
            ],
        }


class EarlyStopping:
    """Stop once ``patience`` consecutive epochs end above the best loss so far.

    The best epoch is the first one reaching the minimum loss.
    """

    def __init__(self, patience: int):
        if patience < 1:
            raise InvalidArgumentError("patience must be >= 1")
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = 0
        self.rises = 0
        self.epoch = 0

    def update(self, loss: float) -> bool:
        """Record one epoch; returns True when it is a new best."""
        self.epoch += 1
        if not math.isfinite(loss):
            loss = math.inf
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_epoch = self.epoch
            self.rises = 0
            return True
        self.rises += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.rises >= self.patience


def stopping_point(losses: Sequence[float], patience: int, max_epochs: Optional[int] = None) -> Tuple[int, int]:
    """(stopped_epoch, best_epoch) the stopping rule yields on a loss sequence."""
    stopper = EarlyStopping(patience)
    limit = len(losses) if max_epochs is None else min(max_epochs, len(losses))
    for loss in losses[:limit]:
        stopper.update(loss)
        if stopper.should_stop:
            break
    return stopper.epoch, stopper.best_epoch


def derive_rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(e) for e in entropy]))


def _holdout(n: int, fraction: float, rng: np.random.Generator, min_train: int = 2) -> Tuple[np.ndarray, np.ndarray]:
    n_val = int(round(n * fraction))
    n_val = min(max(n_val, 1), n - min_train)
    if n_val < 1:
        raise DegenerateDataError(f"{n} rows are too few for a validation holdout")
    perm = rng.permutation(n)
    return perm[n_val:], perm[:n_val]


def _require_both_classes(ds: Dataset) -> None:
    if np.unique(ds.labels).size < 2:
        raise DegenerateDataError(f"dataset {ds.name!r} has a single class")


# objective ----------------------------------------------------------------


def compute_objective(model: TransmeterModel, batch: Batch, cfg: TrainConfig, train: bool = False) -> ObjectiveBreakdown:
    """Forward pass only: the three loss terms and their weighted total."""
    if len(batch) == 0:
        raise InvalidArgumentError("empty batch")
    parts = []
    if batch.n_source:
        parts.append(batch.source_features)
    t_rep = None
    if batch.n_target:
        t_rep = model.encoder.forward(batch.target_features, train)
        parts.append(t_rep)
    rep = np.vstack(parts) if len(parts) > 1 else parts[0]
    label_loss = bce_loss(model.label_predictor.forward(rep, train), batch.labels)
    domain_loss = bce_loss(model.domain_classifier.forward(rep, train), batch.domain_labels)
    recon_loss = 0.0
    if cfg.use_reconstruction and t_rep is not None:
        recon_loss = mse_recon_loss(model.decoder.forward(t_rep, train), batch.target_features)
    return ObjectiveBreakdown.combine(label_loss, domain_loss, recon_loss, cfg.alpha, cfg.effective_beta)


def make_optimizers(model: TransmeterModel, lr: float) -> Dict[str, Adam]:
    return {name: Adam(net, lr=lr) for name, net in model.blocks().items()}


def objective_gradients(model: TransmeterModel, batch: Batch, cfg: TrainConfig) -> Tuple[ObjectiveBreakdown, List[str]]:
    """Train-mode forward and backward; leaves gradients on every layer.

    Returns the breakdown and the names of the blocks that received
    gradients. The domain classifier gets the gradient of its own loss;
    the encoder gets that gradient through a reversal junction scaled by
    alpha, plus the label and weighted reconstruction gradients.
    """
    if len(batch) == 0:
        raise InvalidArgumentError("empty batch")
    n_s = batch.n_source
    has_target = batch.n_target > 0
    parts = [batch.source_features] if n_s else []
    if has_target:
        t_rep = model.encoder.forward(batch.target_features, train=True)
        parts.append(t_rep)
    rep = np.vstack(parts) if len(parts) > 1 else parts[0]

    labels = batch.labels
    y_hat = model.label_predictor.forward(rep, train=True).reshape(-1)
    g_rep = model.label_predictor.backward(bce_grad(y_hat, labels).reshape(-1, 1))

    domains = batch.domain_labels
    d_hat = model.domain_classifier.forward(rep, train=True).reshape(-1)
    g_dc = model.domain_classifier.backward(bce_grad(d_hat, domains).reshape(-1, 1))
    g_rep = g_rep + GradientReversal(cfg.alpha).backward(g_dc)
    touched = ["label_predictor", "domain_classifier"]

    recon = 0.0
    beta = cfg.effective_beta
    use_decoder = cfg.use_reconstruction and has_target
    if use_decoder:
        x_hat = model.decoder.forward(t_rep, train=True)
        recon = mse_recon_loss(x_hat, batch.target_features)
        g_t = model.decoder.backward(beta * mse_recon_grad(x_hat, batch.target_features))
        touched.append("decoder")
    if has_target:
        g_enc = g_rep[n_s:]
        if use_decoder:
            g_enc = g_enc + g_t
        model.encoder.backward(g_enc)
        touched.append("encoder")
    breakdown = ObjectiveBreakdown.combine(bce_loss(y_hat, labels), bce_loss(d_hat, domains), recon, cfg.alpha, beta)
    return breakdown, touched


def train_step(model: TransmeterModel, batch: Batch, cfg: TrainConfig, optimizers: Dict[str, Adam]) -> ObjectiveBreakdown:
    """One forward/backward pass and one Adam step per participating block."""
    breakdown, touched = objective_gradients(model, batch, cfg)
    for name in touched:
        optimizers[name].step()
    return breakdown


# transfer training --------------------------------------------------------


def train_transmeter(
    source_train: Dataset,
    target_train: Dataset,
    cfg: TrainConfig,
    source_model: Optional[SourceModel] = None,
    stream: Sequence[int] = (),
) -> Tuple[TransmeterModel, TrainHistory]:
    """Fit the four-block network with early stopping and best-epoch restore.

    Target labels are flipped here when ``cfg.flip`` is set; a held-out
    ``validation_fraction`` of both domains drives early stopping.
    """
    target = flip_labels(target_train) if cfg.flip else target_train
    _require_both_classes(target)
    rng = derive_rng(cfg.seed, _TAG_TRANSMETER, *stream)

    t_tr, t_val = _holdout(target.size, cfg.validation_fraction, rng)
    s_tr, s_val = _holdout(source_train.size, cfg.validation_fraction, rng)
    target_fit, target_val = target.subset(t_tr), target.subset(t_val)
    source_fit, source_val = source_train.subset(s_tr), source_train.subset(s_val)
    val_batch = Batch.from_datasets(source_val, target_val)

    init_source = source_model if cfg.use_pretrained_init else None
    model = build_transmeter(
        source_train.dim,
        target.dim,
        cfg.encoder_widths,
        source=init_source,
        alpha=cfg.alpha,
        beta=cfg.effective_beta,
        rng=rng,
        predictor_widths=cfg.predictor_widths if init_source is None else None,
    )
    model.meta.update({"seed": cfg.seed, "flip": cfg.flip})
    optimizers = make_optimizers(model, cfg.lr)

    history = TrainHistory()
    stopper = EarlyStopping(cfg.patience)
    best_state = model.state()
    start = time.perf_counter()
    for epoch in range(1, cfg.max_epochs + 1):
        steps = [
            train_step(model, batch, cfg, optimizers)
            for batch in balanced_batches(source_fit, target_fit, cfg.per_domain_batch, rng)
        ]
        val = compute_objective(model, val_batch, cfg, train=False)
        val_acc = accuracy(predict_label(model, target_val.features), target_val.labels)
        history.records.append(
            EpochRecord(epoch, ObjectiveBreakdown.mean(steps), val, val_acc, time.perf_counter() - start)
        )
        if stopper.update(val.total):
            best_state = model.state()
        if stopper.should_stop:
            break
    model.load_state(best_state)
    history.stopped_epoch = stopper.epoch
    history.best_epoch = stopper.best_epoch
    return model, history


def accuracy(probabilities: np.ndarray, labels: np.ndarray) -> float:
    probabilities = np.asarray(probabilities).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if probabilities.size == 0 or probabilities.size != labels.size:
        raise InvalidArgumentError("accuracy needs equal, non-empty prediction and label vectors")
    return float(np.mean((probabilities >= 0.5).astype(int) == labels))


# plain classifiers --------------------------------------------------------


def _minibatches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    chunks = [perm[i : i + size] for i in range(0, n, size)]
    if len(chunks) > 1 and chunks[-1].size < 2:
        # batch norm cannot normalize a lone row
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def fit_classifier(
    train: Dataset,
    cfg: TrainConfig,
    hidden_widths: Sequence[int],
    stream: Sequence[int] = (),
) -> Tuple[MLP, TrainHistory]:
    """Adam + BCE with early stopping on a held-out split; best epoch restored."""
    _require_both_classes(train)
    rng = derive_rng(cfg.seed, _TAG_CLASSIFIER, *stream)
    tr, va = _holdout(train.size, cfg.validation_fraction, rng)
    fit, val = train.subset(tr), train.subset(va)
    net = build_classifier(train.dim, hidden_widths, rng)
    opt = Adam(net, lr=cfg.lr)
    batch_size = 2 * cfg.per_domain_batch

    history = TrainHistory()
    stopper = EarlyStopping(cfg.patience)
    best_state = net.state()
    start = time.perf_counter()
    for epoch in range(1, cfg.max_epochs + 1):
        losses = []
        for idx in _minibatches(fit.size, batch_size, rng):
            losses.append(_classifier_step(net, opt, fit.features[idx], fit.labels[idx]))
        val_pred = net.forward(val.features).reshape(-1)
        val_loss = bce_loss(val_pred, val.labels)
        train_loss = float(np.mean(losses))
        history.records.append(
            EpochRecord(
                epoch,
                ObjectiveBreakdown(train_loss, 0.0, 0.0, train_loss),
                ObjectiveBreakdown(val_loss, 0.0, 0.0, val_loss),
                accuracy(val_pred, val.labels),
                time.perf_counter() - start,
            )
        )
        if stopper.update(val_loss):
            best_state = net.state()
        if stopper.should_stop:
            break
    net.load_state(best_state)
    history.stopped_epoch = stopper.epoch
    history.best_epoch = stopper.best_epoch
    return net, history


def _classifier_step(net: MLP, opt: Adam, x: np.ndarray, y: np.ndarray) -> float:
    y_hat = net.forward(x, train=True).reshape(-1)
    net.backward(bce_grad(y_hat, y).reshape(-1, 1))
    opt.step()
    return bce_loss(y_hat, y)


def pretrain_source(
    train: Dataset,
    cfg: TrainConfig,
    test: Optional[Dataset] = None,
    hidden_widths: Optional[Sequence[int]] = None,
) -> Tuple[SourceModel, float]:
    """Train the source classifier; accuracy is on ``test`` if given, else on ``train``."""
    widths = tuple(hidden_widths) if hidden_widths is not None else cfg.predictor_widths
    net, history = fit_classifier(train, cfg, widths)
    model = SourceModel(net, meta={"seed": cfg.seed, "stopped_epoch": history.stopped_epoch, "best_epoch": history.best_epoch})
    eval_on = test if test is not None else train
    return model, accuracy(model.predict(eval_on.features), eval_on.labels)


# grid search --------------------------------------------------------------


def make_grid(
    alphas: Sequence[float] = ALPHA_GRID,
    betas: Sequence[float] = BETA_GRID,
    seeds: Sequence[int] = SEED_GRID,
    flips: Sequence[bool] = FLIP_GRID,
    base: TrainConfig = TrainConfig(),
) -> List[TrainConfig]:
    grid = [
        replace(base, alpha=a, beta=b, flip=f, seed=s)
        for a, b, f, s in itertools.product(alphas, betas, flips, seeds)
    ]
    return sorted(grid, key=TrainConfig.sort_key)


@dataclass
class GridResult:
    best: TrainConfig
    score: float
    scores: Dict[TrainConfig, float]
    fold_histories: Dict[Tuple[TrainConfig, int], TrainHistory] = field(default_factory=dict, repr=False)


def _fold_task(args) -> Tuple[float, TrainHistory]:
    source, target, cfg, source_model, train_idx, val_idx, stream = args
    model, history = train_transmeter(source, target.subset(train_idx), cfg, source_model, stream=stream)
    val = target.subset(val_idx)
    labels = 1 - val.labels if cfg.flip else val.labels
    return accuracy(predict_label(model, val.features), labels), history


def grid_search(
    source_train: Dataset,
    target_train: Dataset,
    grid: Sequence[TrainConfig],
    k: int = 3,
    source_model: Optional[SourceModel] = None,
    base_seed: int = 0,
    jobs: int = 1,
) -> GridResult:
    """k-fold CV over target rows for every config; argmax of mean fold accuracy.

    Source rows take part in every fold. Ties go to the lexicographically
    smallest (alpha, beta, flip, seed).
    """
    if not grid:
        raise InvalidArgumentError("empty hyperparameter grid")
    plan = make_folds(target_train, k, derive_rng(base_seed, _TAG_FOLDS))
    tasks = []
    for cfg in grid:
        for fold in range(k):
            train_idx, val_idx = plan.indices(fold)
            tasks.append((source_train, target_train, cfg, source_model, train_idx, val_idx, (base_seed, fold)))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_fold_task, tasks))
    else:
        results = [_fold_task(t) for t in tasks]

    scores: Dict[TrainConfig, float] = {}
    histories = {}
    for i, cfg in enumerate(grid):
        fold_results = results[i * k : (i + 1) * k]
        scores[cfg] = float(np.mean([acc for acc, _ in fold_results]))
        for fold, (_, hist) in enumerate(fold_results):
            histories[(cfg, fold)] = hist
    best = min(scores, key=lambda c: (-scores[c], c.sort_key()))
    return GridResult(best, scores[best], scores, histories)
