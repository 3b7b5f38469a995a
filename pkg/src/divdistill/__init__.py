"""Ensemble distillation with diversified input perturbations, on a small numpy autodiff core."""

__version__ = "0.1.0"
