"""Diagnostics: ensemble diversity plots, Jacobian similarity, ROC curves and gradient SNR."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .diffcore import LOG_FLOOR
from .losses import kd_loss, kd_loss_joint
from .models import member_probs
from .perturb import DegenerateGradient

DEFAULT_DIVERSITY_BINS = 20
DEFAULT_SNR_ETAS = tuple(k / 255 for k in (1, 2, 4, 8))


def _kl_matrix(p: np.ndarray) -> np.ndarray:
    """``KL(p_i || p_j)`` for member rows ``p`` of shape ``[..., M, K]``, giving ``[..., M, M]``."""
    logp = np.log(np.maximum(p, LOG_FLOOR))
    # differencing logs first keeps identical rows at exactly zero
    diff = logp[..., :, None, :] - logp[..., None, :, :]
    return np.sum(p[..., :, None, :] * diff, axis=-1)


def pairwise_kld(member_rows: np.ndarray) -> float | np.ndarray:
    """Mean KL divergence over ordered member pairs ``i != j``.

    ``member_rows`` is ``[M, K]`` for one example or ``[N, M, K]`` for a batch.
    """
    p = np.asarray(member_rows, dtype=np.float64)
    M = p.shape[-2]
    if M < 2:
        raise ValueError(f"pairwise KL needs at least two members, got {M}")
    kl = np.maximum(_kl_matrix(p), 0.0)
    out = kl.sum(axis=(-2, -1)) / (M * (M - 1))
    return float(out) if out.ndim == 0 else out


def min_confidence(member_rows: np.ndarray) -> float | np.ndarray:
    out = np.asarray(member_rows, dtype=np.float64).max(axis=-1).min(axis=-1)
    return float(out) if out.ndim == 0 else out


@dataclass
class DiversityPlotData:
    edges: np.ndarray
    mean_kl: np.ndarray
    counts: np.ndarray
    mean_kld: float

    @property
    def density(self) -> np.ndarray:
        return self.counts / max(self.counts.sum(), 1)

    def to_rows(self) -> list[dict]:
        return [
            {"bin_lo": float(lo), "bin_hi": float(hi), "count": int(c), "density": float(d), "mean_kl": float(k)}
            for lo, hi, c, d, k in zip(self.edges[:-1], self.edges[1:], self.counts, self.density, self.mean_kl)
        ]


def diversity_plot_from_probs(probs: np.ndarray, num_bins: int = DEFAULT_DIVERSITY_BINS) -> DiversityPlotData:
    """Bin examples by minimum member confidence; ``probs`` is ``[M, N, K]``."""
    if num_bins < 1:
        raise ValueError(f"num_bins must be >= 1, got {num_bins}")
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 3 or probs.shape[1] == 0:
        raise ValueError("diversity plot needs a nonempty [M, N, K] probability array")
    per_example = np.swapaxes(probs, 0, 1)
    kl = pairwise_kld(per_example)
    conf = min_confidence(per_example)
    idx = np.clip((conf * num_bins).astype(int), 0, num_bins - 1)
    counts = np.bincount(idx, minlength=num_bins)
    sums = np.bincount(idx, weights=kl, minlength=num_bins)
    mean_kl = np.where(counts > 0, sums / np.maximum(counts, 1), 0.0)
    mean_kld = float(np.sum(mean_kl * counts) / counts.sum())
    return DiversityPlotData(np.linspace(0.0, 1.0, num_bins + 1), mean_kl, counts, mean_kld)


def diversity_plot(members, x: np.ndarray, num_bins: int = DEFAULT_DIVERSITY_BINS) -> DiversityPlotData:
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("diversity plot needs at least one example")
    return diversity_plot_from_probs(member_probs(members, x), num_bins)


# ---------------------------------------------------------------------------
# Jacobians


def softmax_input_jacobian(model, x: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Input Jacobian of ``softmax(logits / tau)``, shape ``[N, K, D]``.

    One backward pass per class; rows are independent so a batch is handled at once.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    K = model.num_classes
    jac = np.empty((x.shape[0], K, x.shape[1]))
    for k in range(K):
        xn = dc.variable(x)
        probs = dc.softmax_row(model.forward(xn), tau)
        select = np.zeros((x.shape[0], K))
        select[:, k] = 1.0
        dc.backward(dc.sum(dc.rowdot(probs, dc.constant(select))))
        jac[:, k, :] = xn.grad
    return jac


def jacobian_cosine(model_a, model_b, x: np.ndarray, tau: float = 1.0) -> np.ndarray | float:
    """Cosine similarity of the flattened softmax input-Jacobians of two models, per example."""
    if model_a.num_classes != model_b.num_classes or model_a.in_dim != model_b.in_dim:
        raise ValueError("models must share input and output dimensions")
    single = np.asarray(x).ndim == 1
    ja = softmax_input_jacobian(model_a, x, tau).reshape(len(np.atleast_2d(x)), -1)
    jb = softmax_input_jacobian(model_b, x, tau).reshape(len(np.atleast_2d(x)), -1)
    na, nb = np.linalg.norm(ja, axis=1), np.linalg.norm(jb, axis=1)
    if np.any(na < 1e-300) or np.any(nb < 1e-300):
        raise DegenerateGradient("a Jacobian has zero norm")
    cos = np.clip(np.sum(ja * jb, axis=1) / (na * nb), -1.0, 1.0)
    return float(cos[0]) if single else cos


@dataclass
class RocData:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auroc: float
    mean_pos: float
    mean_neg: float

    def to_rows(self) -> list[dict]:
        return [{"threshold": float(t), "tpr": float(a), "fpr": float(b)}
                for t, a, b in zip(self.thresholds, self.tpr, self.fpr)]


def roc_auroc(positives, negatives) -> RocData:
    """ROC over every pooled threshold and AUROC as ``P(pos > neg) + P(pos = neg) / 2``."""
    pos = np.asarray(positives, dtype=np.float64).ravel()
    neg = np.asarray(negatives, dtype=np.float64).ravel()
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("ROC needs nonempty positive and negative samples")
    thresholds = np.concatenate([[np.inf], np.unique(np.concatenate([pos, neg]))[::-1]])
    pos_sorted, neg_sorted = np.sort(pos), np.sort(neg)
    # fraction scoring >= threshold
    tpr = 1.0 - np.searchsorted(pos_sorted, thresholds, side="left") / len(pos)
    fpr = 1.0 - np.searchsorted(neg_sorted, thresholds, side="left") / len(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    ties = np.searchsorted(neg_sorted, pos, side="right") - below
    auroc = float((below.sum() + 0.5 * ties.sum()) / (len(pos) * len(neg)))
    return RocData(thresholds, tpr, fpr, auroc, float(pos.mean()), float(neg.mean()))


# ---------------------------------------------------------------------------
# Jacobian matching diagnostics


def _kd_param_grad(teacher, student, x: np.ndarray, tau: float) -> np.ndarray:
    nodes = student.param_nodes(requires_grad=True)
    loss = kd_loss(student.forward(x, nodes), teacher.logits(x), tau)
    dc.backward(loss)
    return np.concatenate([nodes[k].grad.ravel() for k in sorted(nodes)])


def jacobian_matching_gradients(teacher, student, x: np.ndarray, perturber: Callable,
                                n_samples: int, rng: np.random.Generator, tau: float = 1.0) -> np.ndarray:
    """Samples of ``grad_theta(KD(x + eps) - KD(x))``, shape ``[n_samples, P]``.

    ``perturber(x, rng)`` returns a perturbation ``eps`` with the shape of ``x``.
    The loss is the batch mean over the rows of ``x``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    base = _kd_param_grad(teacher, student, x, tau)
    return np.stack([_kd_param_grad(teacher, student, x + perturber(x, rng), tau) - base
                     for _ in range(n_samples)])


def gradient_snr(samples: np.ndarray) -> float:
    """``||mean||_2 / sqrt(||elementwise variance||_2)`` over sample rows."""
    mean = samples.mean(axis=0)
    var = samples.var(axis=0)
    denom = math.sqrt(np.linalg.norm(var))
    if denom == 0.0:
        warnings.warn("gradient samples have zero variance; SNR is unbounded", stacklevel=2)
        return math.inf
    return float(np.linalg.norm(mean) / denom)


def jacobian_matching_snr(teacher, student, x: np.ndarray, perturber: Callable, n_samples: int = 64,
                          rng: np.random.Generator | None = None, tau: float = 1.0) -> float:
    if n_samples < 2:
        raise ValueError(f"n_samples must be >= 2, got {n_samples}")
    rng = rng if rng is not None else np.random.default_rng(0)
    return gradient_snr(jacobian_matching_gradients(teacher, student, x, perturber, n_samples, rng, tau))


def ods_perturber(teacher, eta: float, tau: float = 1.0) -> Callable:
    """Perturber stepping ``eta`` along ODS directions of ``teacher`` with fresh guides.

    Rows with a vanishing guided gradient are left in place.
    """
    from .perturb import ods_directions, sample_guide

    def perturb(x, rng):
        guides = sample_guide(rng, teacher.num_classes, size=len(x))
        d, _ = ods_directions(teacher, x, guides, tau)
        return eta * d
    return perturb


def gaussian_perturber(eta: float, unit_norm: bool = True) -> Callable:
    """Isotropic Gaussian perturber; with ``unit_norm`` each row is rescaled to norm ``eta``."""
    def perturb(x, rng):
        noise = rng.normal(size=x.shape)
        if unit_norm:
            return eta * noise / np.linalg.norm(noise, axis=-1, keepdims=True)
        return eta * noise
    return perturb


def _joint_kd_value_and_input_grad(teacher, student, x: np.ndarray, tau: float, loss_fn) -> tuple[float, np.ndarray]:
    xn = dc.variable(np.atleast_2d(x))
    loss = loss_fn(student.forward(xn), teacher.forward(xn), tau)
    dc.backward(loss)
    return float(loss.value), xn.grad


def jacobian_matching_residual(teacher, student, x: np.ndarray, direction: np.ndarray, eta_list,
                               tau: float = 1.0, loss_fn=kd_loss_joint) -> np.ndarray:
    """First-order Taylor residuals ``|L(x + eta d) - L(x) - eta d . grad_x L(x)|``.

    ``L`` is the distillation loss with both networks evaluated at the moved
    input, so for smooth instances the residual decays like ``eta^2``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    direction = np.asarray(direction, dtype=np.float64).reshape(x.shape)
    value = lambda z: float(loss_fn(student.forward(dc.constant(z)), teacher.forward(dc.constant(z)), tau).value)  # noqa: E731
    l0, g0 = _joint_kd_value_and_input_grad(teacher, student, x, tau, loss_fn)
    slope = float(np.sum(direction * g0))
    return np.array([abs(value(x + eta * direction) - l0 - eta * slope) for eta in eta_list])


def loglog_slope(etas, residuals) -> float:
    """Least-squares slope of ``log residual`` against ``log eta``."""
    return float(np.polyfit(np.log(np.asarray(etas)), np.log(np.asarray(residuals)), 1)[0])
