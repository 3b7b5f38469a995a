"""SGD with momentum, the warmup/decay schedule, teacher training and ensemble distillation."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .data import DataSplits, DataValidationError
from .losses import ConfigError, LossConfig, ce_member_loss, combined_distill_loss, cross_entropy_logits
from .metrics import accuracy_from_probs, nll_from_probs
from .models import BatchEnsembleStudent, DeepEnsemble, MlpTeacher, ensemble_predict
from .perturb import PerturbationConfig, perturb_batch
from .diffcore import ShapeError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float = 0.1
    total_epochs: int = 100
    warmup_epochs: int = 5

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if self.total_epochs < 1:
            raise ConfigError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if not 0 <= self.warmup_epochs < 0.5 * self.total_epochs:
            raise ConfigError(
                f"warmup_epochs must be below half of total_epochs ({self.warmup_epochs} vs {self.total_epochs})")


def lr_at(epoch: int, cfg: ScheduleConfig) -> float:
    """Learning rate for ``epoch``: warmup, hold, linear decay, then a 1% floor."""
    T = cfg.total_epochs
    if not 0 <= epoch < T:
        raise ValueError(f"epoch {epoch} outside [0, {T})")
    base, low = cfg.base_lr, 0.01 * cfg.base_lr
    if epoch < cfg.warmup_epochs:
        return low + (base - low) * epoch / cfg.warmup_epochs
    if epoch <= 0.5 * T:
        return base
    if epoch <= 0.9 * T:
        return base + (low - base) * (epoch - 0.5 * T) / (0.4 * T)
    return low


def in_final_phase(epoch: int, total_epochs: int) -> bool:
    return 10 * epoch >= 9 * total_epochs


@dataclass
class OptimState:
    velocity: dict[str, np.ndarray]
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr: float = 0.1

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], momentum: float = 0.9,
                   weight_decay: float = 0.0, lr: float = 0.1) -> "OptimState":
        return cls({k: np.zeros_like(v) for k, v in params.items()}, momentum, weight_decay, lr)


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState) -> None:
    """Heavy-ball update in place: ``v = mu v + (g + wd p)``, ``p -= lr v``."""
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.velocity[k].shape != p.shape:
            raise ShapeError(f"sgd_step: parameter {k} has shape {p.shape}, gradient {g.shape}")
        v = state.velocity[k]
        v *= state.momentum
        v += g + state.weight_decay * p
        p -= state.lr * v


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.1
    epochs: int = 100
    warmup_epochs: int = 5
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4

    @property
    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.base_lr, self.epochs, self.warmup_epochs)


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)
    degenerate_count: int = 0
    best_epoch: int | None = None
    notes: dict = field(default_factory=dict)

    COLUMNS = ("epoch", "lr", "train_loss", "val_acc", "val_nll")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (format(r[k], ".17g") if isinstance(r[k], float) else r[k]) for k in self.COLUMNS})
        return buf.getvalue()

    def summary(self) -> dict:
        return {"epochs": len(self.rows), "best_epoch": self.best_epoch,
                "degenerate_count": self.degenerate_count, **self.notes}


def _check_dataset(splits: DataSplits) -> None:
    if len(np.unique(splits.train.class_index)) < 2:
        raise DataValidationError("training data contains a single class")


def _run_epochs(model, splits: DataSplits, cfg: TrainConfig, rng: np.random.Generator,
                batch_loss, evaluate) -> tuple[dict[str, np.ndarray], TrainingLog]:
    """Shared minibatch loop with the best-validation snapshot in the final LR phase.

    ``batch_loss(x, y, nodes)`` returns (loss node, degenerate count);
    ``evaluate()`` returns validation (accuracy, nll) for the current parameters.
    """
    sched = cfg.schedule
    state = OptimState.for_params(model.params, cfg.momentum, cfg.weight_decay)
    trace = TrainingLog()
    x, y = splits.train.x, splits.train.y
    n = len(x)
    best_acc, best_params = -np.inf, None
    for epoch in range(cfg.epochs):
        state.lr = lr_at(epoch, sched)
        perm = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            nodes = model.param_nodes(requires_grad=True)
            loss, degenerate = batch_loss(x[idx], y[idx], nodes)
            if not np.isfinite(loss.value):
                raise FloatingPointError(f"training loss became {float(loss.value)} at epoch {epoch}")
            dc.backward(loss)
            sgd_step(model.params, {k: nd.grad for k, nd in nodes.items()}, state)
            trace.degenerate_count += degenerate
            total += float(loss.value) * len(idx)
            count += len(idx)
        val_acc, val_nll = evaluate()
        trace.rows.append({"epoch": epoch, "lr": state.lr, "train_loss": total / count,
                           "val_acc": val_acc, "val_nll": val_nll})
        if in_final_phase(epoch, cfg.epochs) and val_acc > best_acc:
            best_acc, trace.best_epoch = val_acc, epoch
            best_params = {k: v.copy() for k, v in model.params.items()}
    if best_params is None:
        best_params = {k: v.copy() for k, v in model.params.items()}
        trace.best_epoch = cfg.epochs - 1
    return best_params, trace


def train_teacher(splits: DataSplits, widths, cfg: TrainConfig, seed: int) -> tuple[MlpTeacher, TrainingLog]:
    _check_dataset(splits)
    model = MlpTeacher(widths, seed=seed)
    rng = np.random.default_rng([seed, 7])

    def batch_loss(xb, yb, nodes):
        return cross_entropy_logits(model.forward(xb, nodes), yb), 0

    def evaluate():
        probs = dc.softmax_array(model.logits(splits.val.x))
        return accuracy_from_probs(probs, splits.val.y), nll_from_probs(probs, splits.val.y)

    best, trace = _run_epochs(model, splits, cfg, rng, batch_loss, evaluate)
    trace.notes["snapshot_metric"] = "val_acc"
    model.params = best
    model.meta.update({"seed": seed, "train_config": asdict(cfg), "best_epoch": trace.best_epoch})
    return model, trace


def train_teachers(splits: DataSplits, widths, M: int, cfg: TrainConfig,
                   seeds) -> tuple[DeepEnsemble, list[TrainingLog]]:
    seeds = list(seeds)
    if len(seeds) != M or len(set(seeds)) != M:
        raise ConfigError(f"need {M} distinct seeds, got {seeds}")
    results = [train_teacher(splits, widths, cfg, s) for s in seeds]
    return DeepEnsemble([m for m, _ in results]), [t for _, t in results]


def _student_evaluator(student: BatchEnsembleStudent, splits: DataSplits):
    def evaluate():
        probs = ensemble_predict(student, splits.val.x)
        return accuracy_from_probs(probs, splits.val.y), nll_from_probs(probs, splits.val.y)
    return evaluate


def distill(teachers: DeepEnsemble, student: BatchEnsembleStudent, splits: DataSplits,
            loss_cfg: LossConfig, perturb_cfg: PerturbationConfig, cfg: TrainConfig,
            rng: np.random.Generator) -> tuple[BatchEnsembleStudent, TrainingLog]:
    """One-to-one distillation of ``teachers`` into the subnetworks of ``student``.

    Each minibatch is perturbed with ``perturb_cfg`` (guide and random teacher
    drawn per example), then one SGD step is taken on the combined objective.
    The input ``student`` is not modified.
    """
    if len(teachers) != student.M:
        raise ConfigError(f"student has M={student.M} subnetworks but {len(teachers)} teachers were given")
    _check_dataset(splits)
    student = student.copy()
    members = list(teachers)

    def batch_loss(xb, yb, nodes):
        pert = perturb_batch(xb, yb, members, perturb_cfg, rng)
        return combined_distill_loss(student, members, xb, pert.x, yb, loss_cfg, nodes), pert.degenerate

    best, trace = _run_epochs(student, splits, cfg, rng, batch_loss, _student_evaluator(student, splits))
    trace.notes["snapshot_metric"] = "ensemble_val_acc"
    if trace.degenerate_count:
        log.info("distill: %d examples left unperturbed (vanishing guided gradient)", trace.degenerate_count)
    student.params = best
    student.meta.update({"train_config": asdict(cfg), "loss": asdict(loss_cfg),
                         "perturb": asdict(perturb_cfg), "best_epoch": trace.best_epoch,
                         "degenerate_count": trace.degenerate_count,
                         "snapshot_metric": "ensemble_val_acc"})
    return student, trace


def train_student_scratch(student: BatchEnsembleStudent, splits: DataSplits, cfg: TrainConfig,
                          rng: np.random.Generator) -> tuple[BatchEnsembleStudent, TrainingLog]:
    """Train every BatchEnsemble subnetwork on labels alone (no teachers)."""
    _check_dataset(splits)
    student = student.copy()

    def batch_loss(xb, yb, nodes):
        return ce_member_loss(student, xb, yb, nodes), 0

    best, trace = _run_epochs(student, splits, cfg, rng, batch_loss, _student_evaluator(student, splits))
    trace.notes["snapshot_metric"] = "ensemble_val_acc"
    student.params = best
    student.meta.update({"train_config": asdict(cfg), "scratch": True, "best_epoch": trace.best_epoch})
    return student, trace
