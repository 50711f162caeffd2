"""Attack success, collaboration rating, consensus accuracy and trend fits."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attacks import AttackConfig, AttackResult, run_attack
from .network import Ensemble

REPORT_SCHEMA_VERSION = 1


class EmptyTestSetError(ValueError):
    pass


class UndefinedCollaborationRating(ZeroDivisionError):
    """Some member has zero attack success, so the rating's denominator vanishes."""

    def __init__(self, member: str, successes: dict):
        super().__init__(f"collaboration rating undefined: A({member}) = 0")
        self.member = member
        self.successes = successes


def all_correct_mask(ensemble: Ensemble, X, y) -> np.ndarray:
    return np.all(ensemble.predictions(X) == np.asarray(y).reshape(-1)[None, :], axis=0)


def filter_correct(ensemble: Ensemble, X, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Examples every member classifies correctly; returns ``(X_T, y_T, indices)``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if X.shape[0] == 0:
        raise EmptyTestSetError("test set is empty")
    idx = np.flatnonzero(all_correct_mask(ensemble, X, y))
    if idx.size == 0:
        raise EmptyTestSetError(
            "no example is classified correctly by every member; use a larger test set"
        )
    return X[idx], y[idx], idx


def consensus_accuracy(ensemble: Ensemble, X, y) -> float:
    """Fraction of examples on which every member outputs the true label."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] == 0:
        raise EmptyTestSetError("test set is empty")
    return float(np.mean(all_correct_mask(ensemble, X, y)))


def same_wrong_class(predictions: np.ndarray, y) -> np.ndarray:
    """Per example: every member predicts the same class and it is not ``y``."""
    predictions = np.atleast_2d(predictions)
    agree = np.all(predictions == predictions[:1], axis=0)
    return agree & (predictions[0] != np.asarray(y).reshape(-1))


def all_fooled(predictions: np.ndarray, y) -> np.ndarray:
    """Diagnostic only: every member wrong, not necessarily on the same class."""
    return np.all(np.atleast_2d(predictions) != np.asarray(y).reshape(-1)[None, :], axis=0)


def success_from_result(result: AttackResult) -> float:
    if len(result) == 0:
        raise EmptyTestSetError("attack result is empty")
    return float(np.mean(same_wrong_class(result.per_model_prediction, result.original_label)))


def adversarial_success(ensemble: Ensemble, X_T, y_T, config: AttackConfig) -> float:
    """Fraction of the (pre-filtered) inputs whose adversary drives all members to one wrong class."""
    if np.atleast_2d(X_T).shape[0] == 0:
        raise EmptyTestSetError("|T| = 0")
    return success_from_result(run_attack(ensemble, X_T, y_T, config))


def per_model_success(ensemble: Ensemble, X_T, y_T, config: AttackConfig) -> dict:
    """Success of the same attack aimed at each member alone."""
    return {
        name: adversarial_success(ensemble.subset([i]), X_T, y_T, config)
        for i, name in enumerate(ensemble.names)
    }


def collaboration_ratio(ensemble_success: float, member_successes: dict) -> float:
    """``A(E) / prod A(f)``; raises :class:`UndefinedCollaborationRating` on a zero factor."""
    for name, a in member_successes.items():
        if a == 0:
            raise UndefinedCollaborationRating(name, dict(member_successes))
    return ensemble_success / math.prod(member_successes.values())


def collaboration_rating(ensemble: Ensemble, X_T, y_T, config: AttackConfig) -> float:
    return collaboration_ratio(
        adversarial_success(ensemble, X_T, y_T, config),
        per_model_success(ensemble, X_T, y_T, config),
    )


def fit_exponential(points: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """Least-squares ``(a, b)`` for ``y = a * exp(b * x)`` on ``log y``."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
        raise ValueError("need at least two (x, y) points")
    x, yv = pts[:, 0], pts[:, 1]
    if np.any(yv <= 0):
        raise ValueError("exponential fit needs positive y values")
    if np.ptp(x) == 0:
        raise ValueError("exponential fit needs at least two distinct x values")
    A = np.column_stack([np.ones_like(x), x])
    (log_a, b), *_ = np.linalg.lstsq(A, np.log(yv), rcond=None)
    return float(np.exp(log_a)), float(b)


@dataclass
class EvalReport:
    ensemble_gdr: float
    per_model_success: dict
    ensemble_success: float
    collaboration_rating: float | None
    consensus_accuracy: float
    attack_config: dict
    filtered_count: int
    cr_undefined_reason: str | None = None
    all_fooled_any_class: float | None = None
    seeds: dict = field(default_factory=dict)
    config_hash: str = ""
    notes: str | None = None
    schema_version: int = REPORT_SCHEMA_VERSION

    def __post_init__(self):
        if self.per_model_success and self.ensemble_success > min(self.per_model_success.values()):
            # not a hard law: the ensemble and lone-member attacks differ
            self.notes = "ensemble success exceeds a member's lone success"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(
    ensemble: Ensemble,
    X,
    y,
    config: AttackConfig,
    ensemble_gdr: float = float("nan"),
    seeds: dict | None = None,
    config_hash: str = "",
) -> EvalReport:
    """Filter to all-correct inputs, attack the ensemble and each member, collect the report."""
    acc = consensus_accuracy(ensemble, X, y)
    X_T, y_T, _ = filter_correct(ensemble, X, y)
    result = run_attack(ensemble, X_T, y_T, config)
    a_ens = success_from_result(result)
    members = per_model_success(ensemble, X_T, y_T, config)
    try:
        cr, reason = collaboration_ratio(a_ens, members), None
    except UndefinedCollaborationRating as exc:
        cr, reason = None, str(exc)
    return EvalReport(
        ensemble_gdr=float(ensemble_gdr),
        per_model_success=members,
        ensemble_success=a_ens,
        collaboration_rating=cr,
        consensus_accuracy=acc,
        attack_config=config.to_dict(),
        filtered_count=int(X_T.shape[0]),
        cr_undefined_reason=reason,
        all_fooled_any_class=float(np.mean(all_fooled(result.per_model_prediction, y_T))),
        seeds=dict(seeds or {}),
        config_hash=config_hash,
    )


SWEEP_COLUMNS = [
    "schema_version", "ensemble", "gdr", "attack", "epsilon", "ensemble_success",
    "collaboration_rating", "cr_undefined_reason", "consensus_accuracy", "filtered_count",
]


def write_sweep_csv(path, rows: list[dict], member_count: int) -> Path:
    """One row per (ensemble, attack, epsilon) with ``member_<i>_success`` columns appended."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = SWEEP_COLUMNS + [f"member_{i}_success" for i in range(member_count)]
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({c: ("" if row.get(c) is None else row.get(c)) for c in cols})
    tmp.replace(path)
    return path


def sweep_row(name: str, report: EvalReport) -> dict:
    row = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "ensemble": name,
        "gdr": report.ensemble_gdr,
        "attack": report.attack_config["kind"],
        "epsilon": report.attack_config["epsilon"],
        "ensemble_success": report.ensemble_success,
        "collaboration_rating": report.collaboration_rating,
        "cr_undefined_reason": report.cr_undefined_reason,
        "consensus_accuracy": report.consensus_accuracy,
        "filtered_count": report.filtered_count,
    }
    for i, v in enumerate(report.per_model_success.values()):
        row[f"member_{i}_success"] = v
    return row


def config_digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]
