"""Gradient Diversity Rating for neural-network ensembles.

The rating of an ensemble at an input is the fraction of unit directions that
lower every member's true-class confidence at once. This package computes it
exactly (one to three members) or by Monte Carlo, trains ensembles to lower it,
and measures how it tracks robustness to FGSM, PGD and momentum attacks.
"""

from .attacks import AttackConfig, AttackResult, fgsm, mi, pgd_linf, run_attack
from .estimator import GradientDiversityEnsemble
from .geometry import (
    GDRResult,
    GradientSet,
    RatingEstimate,
    RatingPolicy,
    gdr,
    r_monte_carlo,
    r_pair,
    r_single,
    r_triple,
    rating,
)
from .metrics import EvalReport, collaboration_ratio, consensus_accuracy, evaluate, fit_exponential
from .network import Ensemble, MlpModel, load_ensemble, save_ensemble
from .trainer import TrainConfig, train_ensemble

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "AttackResult", "fgsm", "mi", "pgd_linf", "run_attack",
    "GradientDiversityEnsemble",
    "GDRResult", "GradientSet", "RatingEstimate", "RatingPolicy", "gdr",
    "r_monte_carlo", "r_pair", "r_single", "r_triple", "rating",
    "EvalReport", "collaboration_ratio", "consensus_accuracy", "evaluate", "fit_exponential",
    "Ensemble", "MlpModel", "load_ensemble", "save_ensemble",
    "TrainConfig", "train_ensemble",
]
