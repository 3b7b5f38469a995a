"""Accuracy, NLL, Brier, ECE, entropy, temperature scaling and deep-ensemble equivalent."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .diffcore import LOG_FLOOR, softmax_array

TAU_BOUNDS = (0.05, 5.0)
DEFAULT_ECE_BINS = 15
OUT_OF_RANGE = math.inf


@dataclass
class PredictionBatch:
    probs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.probs = np.atleast_2d(np.asarray(self.probs, dtype=np.float64))
        self.labels = np.atleast_2d(np.asarray(self.labels, dtype=np.float64))
        if self.probs.shape != self.labels.shape or len(self.probs) < 1:
            raise ValueError(f"probs {self.probs.shape} and labels {self.labels.shape} must match and be nonempty")
        if np.any(np.abs(self.probs.sum(axis=1) - 1) > 1e-9):
            raise ValueError("probability rows must sum to 1")


def accuracy_from_probs(probs: np.ndarray, labels: np.ndarray) -> float:
    # np.argmax returns the first maximum, so ties go to the lowest class index.
    return float(np.mean(np.argmax(probs, axis=1) == np.argmax(labels, axis=1)))


def nll_from_probs(probs: np.ndarray, labels: np.ndarray) -> float:
    p_true = np.sum(probs * labels, axis=1)
    return float(np.mean(-np.log(np.maximum(p_true, LOG_FLOOR))))


def accuracy(p: PredictionBatch) -> float:
    return accuracy_from_probs(p.probs, p.labels)


def nll(p: PredictionBatch) -> float:
    return nll_from_probs(p.probs, p.labels)


def brier(p: PredictionBatch) -> float:
    """Class-averaged squared error, ``mean_n (1/K) sum_k (p_k - y_k)^2``."""
    return float(np.mean(np.mean((p.probs - p.labels) ** 2, axis=1)))


def calibration_bins(p: PredictionBatch, num_bins: int = DEFAULT_ECE_BINS) -> dict[str, np.ndarray]:
    """Per-bin counts, accuracy and confidence over equal-width bins on (0, 1]."""
    if num_bins < 1:
        raise ValueError(f"num_bins must be >= 1, got {num_bins}")
    conf = p.probs.max(axis=1)
    correct = (np.argmax(p.probs, axis=1) == np.argmax(p.labels, axis=1)).astype(float)
    # bin l covers (l/L, (l+1)/L]
    idx = np.clip(np.ceil(conf * num_bins).astype(int) - 1, 0, num_bins - 1)
    counts = np.bincount(idx, minlength=num_bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=num_bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=num_bins)
    nonzero = np.maximum(counts, 1)
    return {
        "edges": np.linspace(0.0, 1.0, num_bins + 1),
        "count": counts,
        "accuracy": np.where(counts > 0, acc_sum / nonzero, 0.0),
        "confidence": np.where(counts > 0, conf_sum / nonzero, 0.0),
    }


def ece(p: PredictionBatch, num_bins: int = DEFAULT_ECE_BINS) -> float:
    b = calibration_bins(p, num_bins)
    n = len(p.probs)
    return float(np.sum(b["count"] / n * np.abs(b["accuracy"] - b["confidence"])))


def predictive_entropy(probs: np.ndarray) -> np.ndarray | float:
    """``-sum p log p`` along the last axis, with ``0 log 0 = 0``."""
    probs = np.asarray(probs, dtype=np.float64)
    terms = np.where(probs > 0, -probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def ensemble_logits(member_probs: np.ndarray) -> np.ndarray:
    """Log of member-averaged probabilities; ``member_probs`` is ``[M, N, K]``."""
    member_probs = np.asarray(member_probs, dtype=np.float64)
    if member_probs.ndim != 3 or member_probs.shape[0] < 1:
        raise ValueError(f"expected member probabilities of shape [M, N, K], got {member_probs.shape}")
    return np.log(np.maximum(member_probs.mean(axis=0), LOG_FLOOR))


def temperature_nll(logits: np.ndarray, labels: np.ndarray, tau: float) -> float:
    return nll_from_probs(softmax_array(logits, tau), labels)


def fit_temperature(val_logits: np.ndarray, val_labels: np.ndarray,
                    bounds: tuple[float, float] = TAU_BOUNDS, grid_points: int = 100,
                    tol: float = 1e-4) -> float:
    """Temperature minimizing validation NLL of ``softmax(logits / tau)``.

    A coarse grid brackets the minimum, golden-section search refines it to an
    interval narrower than ``tol``.  The returned temperature never has larger
    NLL than ``tau = 1`` or the best grid point.
    """
    val_logits = np.atleast_2d(np.asarray(val_logits, dtype=np.float64))
    val_labels = np.atleast_2d(np.asarray(val_labels, dtype=np.float64))
    lo, hi = bounds
    f = lambda t: temperature_nll(val_logits, val_labels, t)  # noqa: E731
    grid = np.linspace(lo, hi, grid_points)
    values = np.array([f(t) for t in grid])
    i = int(np.argmin(values))
    a, b = grid[max(i - 1, 0)], grid[min(i + 1, grid_points - 1)]

    invphi = (math.sqrt(5) - 1) / 2
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a >= tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    candidates = [((a + b) / 2, f((a + b) / 2)), (grid[i], values[i])]
    if lo <= 1.0 <= hi:
        candidates.append((1.0, f(1.0)))
    return float(min(candidates, key=lambda tv: tv[1])[0])


def metric_block(logits: np.ndarray, labels: np.ndarray, tau: float = 1.0,
                 num_bins: int = DEFAULT_ECE_BINS) -> dict[str, float]:
    probs = softmax_array(logits, tau)
    batch = PredictionBatch(probs, labels)
    return {
        "acc": accuracy(batch),
        "nll": nll(batch),
        "brier": brier(batch),
        "ece": ece(batch, num_bins),
        "entropy_mean": float(np.mean(predictive_entropy(probs))),
    }


@dataclass
class NllCurve:
    points: list[tuple[float, float]]

    def __post_init__(self):
        sizes = [s for s, _ in self.points]
        if len(sizes) < 2:
            raise ValueError("an NLL curve needs at least two ensemble sizes")
        if any(b <= a for a, b in zip(sizes, sizes[1:])) or sizes[0] < 1:
            raise ValueError(f"ensemble sizes must be positive and strictly increasing, got {sizes}")


def dee(model_nll: float, curve: NllCurve) -> float:
    """Interpolated ensemble size whose NLL matches ``model_nll``.

    Returns 1.0 when the model is no better than a single member and
    ``math.inf`` when it beats the largest ensemble on the curve.
    """
    sizes = np.array([s for s, _ in curve.points], dtype=float)
    nlls = np.array([v for _, v in curve.points], dtype=float)
    if np.any(np.diff(nlls) > 0):
        warnings.warn("NLL curve is not monotone; using its lower envelope", stacklevel=2)
        nlls = np.minimum.accumulate(nlls)
    if model_nll >= nlls[0]:
        return 1.0
    if model_nll < nlls[-1]:
        return OUT_OF_RANGE
    for i in range(len(sizes) - 1):
        hi, lo = nlls[i], nlls[i + 1]
        if lo <= model_nll <= hi:
            if hi == lo:
                return float(sizes[i])
            return float(sizes[i] + (hi - model_nll) / (hi - lo) * (sizes[i + 1] - sizes[i]))
    return OUT_OF_RANGE  # unreachable for a monotone envelope


def ensemble_nll_curve(val_member_logits: np.ndarray, val_labels: np.ndarray,
                       test_member_logits: np.ndarray, test_labels: np.ndarray,
                       calibrated: bool, rng: np.random.Generator, subsets_per_size: int = 3) -> NllCurve:
    """NLL of sub-ensembles of size 1..M, averaged over random member subsets.

    With ``calibrated`` every sub-ensemble gets its own temperature fitted on
    the validation split.
    """
    M = val_member_logits.shape[0]
    if M < 2:
        raise ValueError("an NLL curve needs at least two ensemble members")
    val_probs = softmax_array(val_member_logits)
    test_probs = softmax_array(test_member_logits)
    points = []
    for size in range(1, M + 1):
        values = []
        n_subsets = 1 if size == M else subsets_per_size
        for _ in range(n_subsets):
            subset = np.sort(rng.choice(M, size=size, replace=False))
            test_logit = ensemble_logits(test_probs[subset])
            tau = 1.0
            if calibrated:
                tau = fit_temperature(ensemble_logits(val_probs[subset]), val_labels)
            values.append(temperature_nll(test_logit, test_labels, tau))
        points.append((size, float(np.mean(values))))
    return NllCurve(points)
