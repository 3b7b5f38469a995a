"""Input perturbations for distillation: Gaussian, ODS, ConfODS and adversarial.

An ODS step moves an input along the normalized input-gradient of
``w . softmax(logits(x) / tau)`` for a random guide ``w`` drawn uniformly from
``[-1, 1]^K``.  Because the networks here process rows independently, the
gradients for a whole batch (each row with its own guide) come out of one
backward pass.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc

log = logging.getLogger(__name__)

STRATEGIES = ("none", "gaussian", "ods", "confods", "adversarial")
MIN_GRAD_NORM = 1e-12


class DegenerateGradient(ArithmeticError):
    """The guided input gradient vanished, so no direction can be formed."""


@dataclass(frozen=True)
class PerturbationConfig:
    strategy: str = "none"
    eta: float = 1 / 255
    tau: float = 4.0
    sigma: float | None = None  # Gaussian std; defaults to eta
    gaussian_unit_norm: bool = False  # rescale each Gaussian draw to norm eta
    share_per_batch: bool = False  # one guide and teacher for the whole batch

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown perturbation strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.eta < 0:
            raise ValueError(f"eta must be nonnegative, got {self.eta}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.sigma is not None and self.sigma < 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")

    @property
    def gaussian_sigma(self) -> float:
        return self.eta if self.sigma is None else self.sigma


def sample_guide(rng: np.random.Generator, num_classes: int, size: int | None = None) -> np.ndarray:
    shape = (num_classes,) if size is None else (size, num_classes)
    return rng.uniform(-1.0, 1.0, size=shape)


def pick_random_teacher(M: int, rng: np.random.Generator, size: int | None = None):
    """Uniform teacher index in ``0..M-1``."""
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    return rng.integers(0, M, size=size)


def guided_input_gradient(model, x: np.ndarray, guides: np.ndarray, tau: float) -> np.ndarray:
    """Rows of ``grad_x (w_i . softmax(logits(x_i) / tau))`` for a batch, shape ``[N, D]``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    guides = np.atleast_2d(np.asarray(guides, dtype=np.float64))
    xn = dc.variable(x)
    probs = dc.softmax_row(model.forward(xn), tau)
    dc.backward(dc.sum(dc.rowdot(probs, dc.constant(guides))))
    return xn.grad


def ods_directions(model, x: np.ndarray, guides: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Unit ODS directions for a batch plus a mask of rows whose gradient vanished.

    Degenerate rows are returned as zero vectors.
    """
    g = guided_input_gradient(model, x, guides, tau)
    norms = np.linalg.norm(g, axis=1)
    degenerate = norms < MIN_GRAD_NORM
    safe = np.where(degenerate, 1.0, norms)
    return np.where(degenerate[:, None], 0.0, g / safe[:, None]), degenerate


def ods_direction(model, x: np.ndarray, w: np.ndarray, tau: float) -> np.ndarray:
    """Unit-norm ODS direction for a single input ``x`` of shape ``[D]``."""
    dirs, degenerate = ods_directions(model, np.asarray(x)[None, :], np.asarray(w)[None, :], tau)
    if degenerate[0]:
        raise DegenerateGradient("guided input gradient has norm below 1e-12")
    return dirs[0]


def max_confidence(model, x: np.ndarray, tau: float) -> np.ndarray:
    return dc.softmax_array(model.logits(np.atleast_2d(x)), tau).max(axis=1)


def perturb_ods(x: np.ndarray, teacher, w: np.ndarray, eta: float, tau: float) -> np.ndarray:
    if eta == 0:
        return np.array(x, dtype=np.float64)
    return np.asarray(x, dtype=np.float64) + eta * ods_direction(teacher, x, w, tau)


def perturb_confods(x: np.ndarray, teacher, w: np.ndarray, eta: float, tau: float) -> np.ndarray:
    if eta == 0:
        return np.array(x, dtype=np.float64)
    c_max = max_confidence(teacher, x, tau)[0]
    return np.asarray(x, dtype=np.float64) + eta * c_max * ods_direction(teacher, x, w, tau)


def perturb_adversarial(x: np.ndarray, teacher, label: np.ndarray, eta: float, tau: float) -> np.ndarray:
    """ODS step with the guide replaced by the negated one-hot label."""
    if eta == 0:
        return np.array(x, dtype=np.float64)
    return np.asarray(x, dtype=np.float64) + eta * ods_direction(teacher, x, -np.asarray(label, dtype=np.float64), tau)


def perturb_gaussian(x: np.ndarray, sigma: float, rng: np.random.Generator,
                     unit_norm_eta: float | None = None) -> np.ndarray:
    """Add isotropic Gaussian noise; optionally rescale each row's noise to norm ``unit_norm_eta``."""
    x = np.asarray(x, dtype=np.float64)
    if sigma < 0:
        raise ValueError(f"sigma must be nonnegative, got {sigma}")
    noise = rng.normal(0.0, 1.0, size=x.shape)
    if unit_norm_eta is not None:
        return x + unit_norm_eta * noise / np.linalg.norm(noise, axis=-1, keepdims=True)
    return x + sigma * noise


@dataclass
class BatchPerturbation:
    x: np.ndarray
    teacher_index: np.ndarray | None = None
    degenerate: int = 0


def perturb_batch(x: np.ndarray, y: np.ndarray, teachers, cfg: PerturbationConfig,
                  rng: np.random.Generator) -> BatchPerturbation:
    """Perturb a minibatch with the configured strategy.

    Every row gets its own guide and random teacher unless ``share_per_batch``.
    Rows whose guided gradient vanishes are left unperturbed and counted.
    """
    x = np.asarray(x, dtype=np.float64)
    if cfg.strategy == "none":
        return BatchPerturbation(x.copy())
    if cfg.strategy == "gaussian":
        unit = cfg.eta if cfg.gaussian_unit_norm else None
        return BatchPerturbation(perturb_gaussian(x, cfg.gaussian_sigma, rng, unit_norm_eta=unit))

    n = x.shape[0]
    teachers = list(teachers)
    K = teachers[0].num_classes
    share = cfg.share_per_batch
    if cfg.strategy == "adversarial":
        guides = -np.asarray(y, dtype=np.float64)
    else:
        guides = sample_guide(rng, K, size=1 if share else n)
        if share:
            guides = np.repeat(guides, n, axis=0)
    r = pick_random_teacher(len(teachers), rng, size=1 if share else n)
    if share:
        r = np.repeat(r, n)

    directions = np.zeros_like(x)
    step = np.full(n, float(cfg.eta))
    degenerate = np.zeros(n, dtype=bool)
    for j in np.unique(r):
        rows = np.flatnonzero(r == j)
        d, bad = ods_directions(teachers[j], x[rows], guides[rows], cfg.tau)
        directions[rows] = d
        degenerate[rows] = bad
        if cfg.strategy == "confods":
            step[rows] *= max_confidence(teachers[j], x[rows], cfg.tau)
    if degenerate.any():
        log.debug("%d of %d rows had a vanishing guided gradient; left unperturbed", degenerate.sum(), n)
    return BatchPerturbation(x + step[:, None] * directions, r, int(degenerate.sum()))
