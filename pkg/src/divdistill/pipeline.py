"""Evaluation reports, artifact writers and the desk-scale experiment preset."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataSplits, gen_ood_shift, gen_spirals
from .diversity import diversity_plot_from_probs
from .losses import LossConfig
from .metrics import (DEFAULT_ECE_BINS, dee, ensemble_logits, ensemble_nll_curve, fit_temperature,
                      metric_block, predictive_entropy, temperature_nll)
from .models import BatchEnsembleStudent, DeepEnsemble, as_members, atomic_write_text, member_probs
from .perturb import PerturbationConfig, perturb_batch
from .train import TrainConfig, distill, train_student_scratch, train_teachers


def json_ready(obj):
    """Convert numpy scalars/arrays and non-finite floats into JSON-safe values."""
    if isinstance(obj, dict):
        return {str(k): json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_ready(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return json_ready(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def dumps(obj) -> str:
    return json.dumps(json_ready(obj), indent=1, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, obj) -> None:
    atomic_write_text(path, dumps(obj))


def rows_to_csv(rows: list[dict], columns=None) -> str:
    columns = list(columns or (rows[0].keys() if rows else []))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: format(v, ".17g") if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def write_csv(path, rows: list[dict], columns=None) -> None:
    atomic_write_text(path, rows_to_csv(rows, columns))


# ---------------------------------------------------------------------------
# evaluation


def model_ensemble_logits(model, x: np.ndarray) -> np.ndarray:
    """Log of member-averaged probabilities for any model or ensemble."""
    return ensemble_logits(member_probs(model, x))


def evaluate_report(model, splits: DataSplits, num_bins: int = DEFAULT_ECE_BINS,
                    dee_teachers: DeepEnsemble | None = None, rng: np.random.Generator | None = None,
                    subsets_per_size: int = 3, config_echo: dict | None = None) -> dict:
    """Standard and temperature-calibrated test metrics.

    The temperature is fitted on the validation split and the calibrated block
    re-evaluates every test metric at that temperature; top-level fields mirror
    the calibrated block.  With ``dee_teachers`` the calibrated test NLL is
    converted to a deep-ensemble equivalent against the teachers' own
    calibrated NLL curve.
    """
    val_logits = model_ensemble_logits(model, splits.val.x)
    test_logits = model_ensemble_logits(model, splits.test.x)
    tau = fit_temperature(val_logits, splits.val.y)
    standard = metric_block(test_logits, splits.test.y, 1.0, num_bins)
    calibrated = metric_block(test_logits, splits.test.y, tau, num_bins)
    report = {
        **calibrated,
        "tau_star": tau,
        "dee": None,
        "standard": standard,
        "calibrated": calibrated,
        "validation": {"nll_standard": temperature_nll(val_logits, splits.val.y, 1.0),
                       "nll_calibrated": temperature_nll(val_logits, splits.val.y, tau)},
        "num_members": len(as_members(model)),
        "num_bins": num_bins,
        "version": __version__,
        "config_echo": config_echo or {},
    }
    if splits.ood is not None:
        report["ood_entropy_mean"] = float(np.mean(predictive_entropy(
            np.exp(model_ensemble_logits(model, splits.ood.x)))))
    if dee_teachers is not None:
        rng = rng if rng is not None else np.random.default_rng(0)
        logits = lambda x: np.stack([m.logits(x) for m in dee_teachers])  # noqa: E731
        curve = ensemble_nll_curve(logits(splits.val.x), splits.val.y, logits(splits.test.x), splits.test.y,
                                   calibrated=True, rng=rng, subsets_per_size=subsets_per_size)
        report["dee"] = dee(calibrated["nll"], curve)
        report["calibrated"] = {**calibrated, "dee": report["dee"]}
        report["dee_curve"] = [{"size": s, "nll": v} for s, v in curve.points]
    return report


# ---------------------------------------------------------------------------
# desk-scale experiment preset


@dataclass(frozen=True)
class DeskSetup:
    """Settings for the small spiral experiments used by the acceptance suite."""

    K: int = 4
    n_per_class: int = 250
    noise: float = 0.01
    hidden: tuple[int, ...] = (64, 64)
    M: int = 4
    teacher: TrainConfig = field(default_factory=lambda: TrainConfig(
        base_lr=0.1, epochs=100, warmup_epochs=3, batch_size=32, weight_decay=0.0))
    student: TrainConfig = field(default_factory=lambda: TrainConfig(
        base_lr=0.02, epochs=100, warmup_epochs=3, batch_size=32, weight_decay=0.0))
    loss: LossConfig = field(default_factory=lambda: LossConfig(alpha=0.9, tau=1.0))
    ods_eta: float = 0.05
    ood_shift: float = 0.3

    @property
    def widths(self) -> list[int]:
        return [2, *self.hidden, self.K]


def desk_data(seed: int, setup: DeskSetup = DeskSetup()) -> DataSplits:
    splits = gen_spirals(setup.K, setup.n_per_class, setup.noise, seed)
    splits.ood = gen_ood_shift(splits, setup.ood_shift, seed)
    return splits


def desk_teachers(splits: DataSplits, seed: int, setup: DeskSetup = DeskSetup()) -> DeepEnsemble:
    teachers, _ = train_teachers(splits, setup.widths, setup.M, setup.teacher,
                                 [10 * seed + j for j in range(setup.M)])
    return teachers


def desk_students(teachers: DeepEnsemble, splits: DataSplits, seed: int,
                  setup: DeskSetup = DeskSetup()) -> dict[str, BatchEnsembleStudent]:
    """Vanilla-KD, ODS-distilled and label-only BatchEnsemble students sharing one initialization."""
    init = BatchEnsembleStudent(setup.widths, setup.M, seed=seed + 100)
    out = {}
    for name, pert in (("kd", PerturbationConfig("none")),
                       ("ods", PerturbationConfig("ods", eta=setup.ods_eta, tau=setup.loss.tau))):
        out[name], _ = distill(teachers, init, splits, setup.loss, pert, setup.student,
                               np.random.default_rng(seed + 200))
    out["scratch"], _ = train_student_scratch(init, splits, setup.student, np.random.default_rng(seed + 300))
    return out


def perturbed_mean_kld(members, x: np.ndarray, y: np.ndarray, cfg: PerturbationConfig,
                       rng: np.random.Generator, num_bins: int = 20) -> float:
    """mean-KLD of ``members`` on ``x`` after one perturbation draw."""
    members = as_members(members)
    xp = perturb_batch(x, y, members, cfg, rng).x
    return diversity_plot_from_probs(member_probs(members, xp), num_bins).mean_kld


def ensure_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path
