"""scikit-learn style classifier around a gradient-diversity-trained ensemble."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import geometry, metrics, network, trainer


class GradientDiversityEnsemble(ClassifierMixin, BaseEstimator):
    """Ensemble of MLPs trained jointly with a gradient-diversity penalty.

    Parameters mirror :class:`trainer.TrainConfig`; ``schedule`` is a preset
    name (``"desk"``, ``"paper"``, ``"desk-baseline"``, ...) or a list of
    ``(epochs, kind)`` phases. Inputs must lie in ``[0, 1]``.

    >>> clf = GradientDiversityEnsemble(hidden=(32,), schedule=[(2, "cosine_max_pairwise")])
    >>> clf.fit(X, y).predict(X)            # doctest: +SKIP
    >>> clf.gdr_score(X, y)                 # doctest: +SKIP
    """

    def __init__(
        self,
        n_members: int = 3,
        hidden=(256, 128),
        schedule="desk",
        beta: float = 0.5,
        learning_rate: float = 0.05,
        batch_size: int = 64,
        temperature: float = trainer.SMOOTH_MAX_TEMPERATURE,
        random_state: int = 0,
        shuffle_seed: int | None = None,
    ):
        self.n_members = n_members
        self.hidden = hidden
        self.schedule = schedule
        self.beta = beta
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.temperature = temperature
        self.random_state = random_state
        self.shuffle_seed = shuffle_seed

    def _train_config(self) -> trainer.TrainConfig:
        schedule = self.schedule
        if isinstance(schedule, str):
            if schedule not in trainer.PRESETS:
                raise ValueError(f"unknown schedule preset {schedule!r}")
            schedule = trainer.PRESETS[schedule]
        return trainer.TrainConfig(
            beta=self.beta,
            phase_schedule=list(schedule),
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            seed=self.random_state,
            shuffle_seed=self.shuffle_seed,
            n_members=self.n_members,
            hidden=tuple(self.hidden),
            temperature=self.temperature,
        )

    @staticmethod
    def _check_range(X: np.ndarray) -> None:
        if X.size and (X.min() < 0.0 or X.max() > 1.0):
            raise ValueError("inputs must lie in [0, 1]")

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self._check_range(X)
        self.label_encoder_ = LabelEncoder().fit(y)
        self.classes_ = self.label_encoder_.classes_
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        codes = self.label_encoder_.transform(y)
        self.ensemble_, self.train_log_ = trainer.train_ensemble(
            self._train_config(), X, codes, n_classes=self.classes_.size
        )
        self.n_features_in_ = X.shape[1]
        return self

    def _validated(self, X) -> np.ndarray:
        check_is_fitted(self, "ensemble_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        self._check_range(X)
        return X

    def _codes(self, y) -> np.ndarray:
        return self.label_encoder_.transform(np.asarray(y).reshape(-1))

    def predict_proba(self, X) -> np.ndarray:
        """Mean of the members' softmax outputs."""
        X = self._validated(X)
        return np.mean([network.confidences(m, X) for m in self.ensemble_.models], axis=0)

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def member_predictions(self, X) -> np.ndarray:
        """``(k, B)`` array of each member's predicted label."""
        X = self._validated(X)
        return self.classes_[self.ensemble_.predictions(X)]

    def input_gradients(self, X, y) -> np.ndarray:
        """``(B, k, n)`` true-class input-gradient directions."""
        X = self._validated(X)
        return self.ensemble_.input_gradients(X, self._codes(y))

    def gdr_result(self, X, y, method: str = "exact", samples: int = geometry.DEFAULT_MC_SAMPLES,
                   seed: int = 0, correct_only: bool = False) -> geometry.GDRResult:
        X = self._validated(X)
        policy = geometry.RatingPolicy(method, samples, seed)
        return geometry.gdr(self.ensemble_, X, self._codes(y), policy, correct_only)

    def gdr_score(self, X, y, **kwargs) -> float:
        """Mean gradient diversity rating on ``(X, y)``; lower means more diverse."""
        return self.gdr_result(X, y, **kwargs).gdr

    def consensus_score(self, X, y) -> float:
        """Fraction of inputs every member classifies correctly."""
        X = self._validated(X)
        return metrics.consensus_accuracy(self.ensemble_, X, self._codes(y))

    def save(self, directory):
        check_is_fitted(self, "ensemble_")
        return network.save_ensemble(self.ensemble_, directory)
