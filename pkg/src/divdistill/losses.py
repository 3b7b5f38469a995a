"""Cross-entropy, temperature-scaled distillation loss and the one-to-one objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import DiffNode, ShapeError


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.9
    tau: float = 4.0

    def __post_init__(self):
        # alpha = 0 is admitted so the pure cross-entropy end of the objective is reachable.
        if not 0 <= self.alpha <= 1:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")


def check_one_hot(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim != 2:
        raise ValueError(f"labels must be one-hot [batch x K], got shape {labels.shape}")
    if not (np.all((labels == 0) | (labels == 1)) and np.all(labels.sum(axis=1) == 1)):
        raise ValueError("labels must be one-hot rows")
    return labels


def cross_entropy(probs: DiffNode, labels: np.ndarray) -> DiffNode:
    """Batch-mean of ``-sum_k y_k log p_k`` over probability rows."""
    probs = dc.as_node(probs)
    labels = check_one_hot(labels)
    if probs.shape != labels.shape:
        raise ShapeError(f"cross_entropy: probs {probs.shape} vs labels {labels.shape}")
    return dc.scale(dc.mean(dc.rowdot(dc.log(probs), dc.constant(labels))), -1.0)


def cross_entropy_logits(logits: DiffNode, labels: np.ndarray) -> DiffNode:
    """Same quantity as :func:`cross_entropy` evaluated from logits via log-softmax."""
    logits = dc.as_node(logits)
    labels = check_one_hot(labels)
    if logits.shape != labels.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    return dc.scale(dc.mean(dc.rowdot(dc.log_softmax_row(logits), dc.constant(labels))), -1.0)


def _teacher_value(teacher_logits) -> np.ndarray:
    # Teachers are frozen targets: only the value enters the graph.
    if isinstance(teacher_logits, DiffNode):
        return teacher_logits.value
    return np.asarray(teacher_logits, dtype=np.float64)


def kd_rows(student_logits: DiffNode, teacher_logits, tau: float) -> DiffNode:
    """Per-example distillation loss ``-tau^2 sum_k q_k log p_k`` as a ``[batch]`` node."""
    student_logits = dc.as_node(student_logits)
    t = _teacher_value(teacher_logits)
    if student_logits.shape != t.shape:
        raise ShapeError(f"kd_loss: student {student_logits.shape} vs teacher {t.shape}")
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    target = dc.constant(dc.softmax_array(t, tau))
    return dc.scale(dc.rowdot(dc.log_softmax_row(student_logits, tau), target), -tau * tau)


def kd_loss(student_logits: DiffNode, teacher_logits, tau: float) -> DiffNode:
    """Batch-mean temperature-scaled soft cross-entropy against a detached teacher."""
    return dc.mean(kd_rows(student_logits, teacher_logits, tau))


def kd_loss_joint(student_logits: DiffNode, teacher_logits: DiffNode, tau: float) -> DiffNode:
    """KD loss with gradient flowing into the teacher as well.

    Only used for Taylor checks in input space, where both networks move with x.
    """
    student_logits, teacher_logits = dc.as_node(student_logits), dc.as_node(teacher_logits)
    q = dc.softmax_row(teacher_logits, tau)
    return dc.scale(dc.mean(dc.rowdot(dc.log_softmax_row(student_logits, tau), q)), -tau * tau)


def combined_distill_loss(student, teachers, x_clean: np.ndarray, x_perturbed: np.ndarray,
                          labels: np.ndarray, cfg: LossConfig,
                          nodes: dict[str, DiffNode] | None = None) -> DiffNode:
    """Sum over members of ``(1-a) CE(S_j(x), y) + a KD(S_j(x~), T_j(x~); tau)``.

    Cross-entropy uses the clean batch and distillation the perturbed one.  Each
    per-member term is a batch mean.
    """
    if len(teachers) != student.M:
        raise ConfigError(f"student has M={student.M} subnetworks but {len(teachers)} teachers were given")
    x_clean = np.asarray(x_clean, dtype=np.float64)
    x_perturbed = np.asarray(x_perturbed, dtype=np.float64)
    if x_clean.shape != x_perturbed.shape:
        raise ShapeError(f"clean {x_clean.shape} and perturbed {x_perturbed.shape} inputs differ in shape")
    labels = check_one_hot(labels)
    nodes = nodes if nodes is not None else student.param_nodes(requires_grad=True)
    batch, M = x_clean.shape[0], student.M

    teacher_logits = np.concatenate([t.logits(x_perturbed) for t in teachers])
    kd = kd_rows(student.forward_members(x_perturbed, nodes), teacher_logits, cfg.tau)
    loss = dc.scale(dc.sum(kd), cfg.alpha / batch)
    if cfg.alpha < 1:
        ce_logits = student.forward_members(x_clean, nodes)
        ce = dc.rowdot(dc.log_softmax_row(ce_logits), dc.constant(np.tile(labels, (M, 1))))
        loss = dc.add(loss, dc.scale(dc.sum(ce), -(1 - cfg.alpha) / batch))
    return loss


def ce_member_loss(student, x: np.ndarray, labels: np.ndarray,
                   nodes: dict[str, DiffNode] | None = None) -> DiffNode:
    """Sum over members of the batch-mean cross-entropy (training from scratch)."""
    labels = check_one_hot(labels)
    nodes = nodes if nodes is not None else student.param_nodes(requires_grad=True)
    logits = student.forward_members(x, nodes)
    ce = dc.rowdot(dc.log_softmax_row(logits), dc.constant(np.tile(labels, (student.M, 1))))
    return dc.scale(dc.sum(ce), -1.0 / x.shape[0])
