"""Joint ensemble training with an input-gradient diversity penalty.

The loss is ``image_loss + beta * gradient_loss`` where the gradient loss is a
function of the members' true-class input gradients. Differentiating it with
respect to the weights goes through the recorded backward pass (double
backprop).
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .geometry import RatingPolicy, gdr
from .network import Ensemble, MlpModel, _one_hot, forward_logits

logger = logging.getLogger(__name__)

GRAD_LOSS_KINDS = ("none", "cosine_max_pairwise", "angle_sum", "quad_triangle_area")
SMOOTH_MAX_TEMPERATURE = 50.0
ARCCOS_CLAMP = 1e-7
ZERO_NORM = 1e-12
TRAIN_LOG_SCHEMA_VERSION = 1

PRESETS = {
    "desk": [(3, "cosine_max_pairwise"), (3, "angle_sum")],
    "desk-baseline": [(6, "none")],
    "paper": [(15, "cosine_max_pairwise"), (15, "angle_sum")],
    "paper-baseline": [(30, "none")],
}


class TrainingDivergedError(FloatingPointError):
    """Raised when a loss turns non-finite; carries the last finite ensemble."""

    def __init__(self, message, ensemble: Ensemble | None, log: "TrainLog"):
        super().__init__(message)
        self.ensemble = ensemble
        self.log = log


@dataclass
class TrainConfig:
    beta: float = 0.5
    phase_schedule: list = field(default_factory=lambda: list(PRESETS["desk"]))
    learning_rate: float = 0.05
    batch_size: int = 64
    seed: int = 0
    shuffle_seed: int | None = None
    n_members: int = 3
    hidden: tuple = (256, 128)
    temperature: float = SMOOTH_MAX_TEMPERATURE
    gdr_sample: int = 200

    def __post_init__(self):
        self.phase_schedule = [(int(e), str(k)) for e, k in self.phase_schedule]
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1 or self.n_members < 1:
            raise ValueError("batch_size and n_members must be positive")
        for epochs, kind in self.phase_schedule:
            if epochs < 0:
                raise ValueError("phase epochs must be >= 0")
            if kind not in GRAD_LOSS_KINDS:
                raise ValueError(f"unknown gradient loss {kind!r}; expected one of {GRAD_LOSS_KINDS}")
        if self.epochs_total < 1:
            raise ValueError("schedule must contain at least one epoch")
        self.hidden = tuple(int(h) for h in self.hidden)

    @property
    def epochs_total(self) -> int:
        return sum(e for e, _ in self.phase_schedule)

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        return cls(phase_schedule=list(PRESETS[name]), **overrides)

    def kind_at(self, epoch: int) -> str:
        for epochs, kind in self.phase_schedule:
            if epoch < epochs:
                return kind
            epoch -= epochs
        raise IndexError(epoch)


class EnsembleTape:
    """One recorded graph holding an ensemble's parameters and a batch.

    ``params[i]`` are the leaf nodes of member ``i`` (``[W0, b0, W1, b1, ...]``).
    """

    def __init__(self, ensemble: Ensemble, X, y):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        if X.shape[1] != ensemble.n_inputs:
            raise ValueError(f"batch dimension {X.shape[1]} != model input {ensemble.n_inputs}")
        if X.shape[0] == 0 or X.shape[0] != y.shape[0]:
            raise ValueError("need a non-empty batch with one label per row")
        self.ensemble = ensemble
        self.graph = ad.Graph()
        self.X = self.graph.leaf(X)
        self.y = y
        self.onehot = _one_hot(y, X.shape[0], ensemble.n_classes)
        self.params = [[self.graph.leaf(p) for p in m.params] for m in ensemble.models]
        self.logits = [forward_logits(self.X, p) for p in self.params]
        self.ce = [ad.softmax_cross_entropy(z, self.onehot) for z in self.logits]
        self._input_grads = None
        self.zero_gradient_rows = 0

    @property
    def batch_size(self) -> int:
        return self.X.shape[0]

    def flat_params(self) -> list[ad.Node]:
        return [p for member in self.params for p in member]

    def input_gradients(self) -> list[ad.Node]:
        """Differentiable ``d log f^y / dx`` per member, each of shape ``(B, n)``.

        Same direction as the gradient of the confidence itself, which is all
        the cosine and angle losses depend on.
        """
        if self._input_grads is None:
            grads = []
            for ce in self.ce:
                (g,) = self.graph.gradient(ad.neg(ad.sum(ce)), [self.X], differentiable=True)
                grads.append(g)
            self._input_grads = grads
        return self._input_grads

    def _normalized(self):
        grads = self.input_gradients()
        norms = [ad.l2_norm(g, axis=1) for g in grads]
        masks = [(n.value >= ZERO_NORM).astype(np.float64) for n in norms]
        bad = int(np.sum([m == 0 for m in masks]))
        if bad:
            self.zero_gradient_rows = bad
            logger.warning("%d zero member gradient(s) in batch; their cosines count as 0", bad)
        return grads, norms, masks

    def pair_cosines(self) -> dict:
        """Cosine of every member pair, per row; rows with a zero gradient give 0."""
        grads, norms, masks = self._normalized()
        out = {}
        for i, j in itertools.combinations(range(len(grads)), 2):
            mask = masks[i] * masks[j]
            denom = ad.add(ad.mul(norms[i], norms[j]), 1.0 - mask)
            dot = ad.sum(ad.mul(grads[i], grads[j]), axis=1)
            out[i, j] = ad.mul(ad.div(dot, denom), mask)
        return out

    def pair_angles(self) -> dict:
        return {
            key: ad.arccos(ad.clamp(c, -1.0 + ARCCOS_CLAMP, 1.0 - ARCCOS_CLAMP))
            for key, c in self.pair_cosines().items()
        }


def _tape(ensemble_or_tape, X=None, y=None) -> EnsembleTape:
    if isinstance(ensemble_or_tape, EnsembleTape):
        return ensemble_or_tape
    return EnsembleTape(ensemble_or_tape, X, y)


def image_loss(ensemble_or_tape, X=None, y=None) -> ad.Node:
    """Cross-entropy averaged over members and batch rows."""
    t = _tape(ensemble_or_tape, X, y)
    total = t.ce[0].sum()
    for ce in t.ce[1:]:
        total = total + ce.sum()
    return total / float(len(t.ce) * t.batch_size)


def grad_loss_cosine(ensemble_or_tape, X=None, y=None, temperature: float = SMOOTH_MAX_TEMPERATURE) -> ad.Node:
    """Batch mean of a smooth maximum of the pairwise gradient cosines.

    The smooth maximum is ``m + log(mean(exp(tau * (c - m)))) / tau`` with the
    row maximum ``m`` held constant; it equals the hard maximum when all
    cosines agree and is never above it.
    """
    t = _tape(ensemble_or_tape, X, y)
    if len(t.ensemble) < 2:
        raise ValueError("cosine loss needs at least two members")
    cos = list(t.pair_cosines().values())
    m = np.max([c.value for c in cos], axis=0)
    acc = None
    for c in cos:
        e = ad.exp(ad.mul(ad.sub(c, m), temperature))
        acc = e if acc is None else ad.add(acc, e)
    smax = ad.add(ad.div(ad.log(ad.div(acc, float(len(cos)))), temperature), m)
    return ad.div(ad.sum(smax), float(t.batch_size))


def grad_loss_angle_sum(ensemble_or_tape, X=None, y=None) -> ad.Node:
    """Batch mean of minus the sum of pairwise gradient angles (three members only)."""
    t = _tape(ensemble_or_tape, X, y)
    if len(t.ensemble) != 3:
        raise ValueError(f"angle-sum loss is defined for 3 members, got {len(t.ensemble)}")
    angles = list(t.pair_angles().values())
    total = ad.add(ad.add(angles[0], angles[1]), angles[2])
    return ad.neg(ad.div(ad.sum(total), float(t.batch_size)))


def grad_loss_quad(ensemble_or_tape, X=None, y=None) -> ad.Node:
    """Batch mean of minus the four-member triangle-area sum (see ``quad_triangle_area_sum``)."""
    t = _tape(ensemble_or_tape, X, y)
    if len(t.ensemble) != 4:
        raise ValueError(f"quad loss is defined for 4 members, got {len(t.ensemble)}")
    ang = t.pair_angles()
    total = None
    for a, b, c in itertools.combinations(range(4), 3):
        s = ad.add(ad.add(ang[a, b], ang[a, c]), ang[b, c])
        term = ad.clamp(ad.sub(2.0 * math.pi, s), 0.0, 2.0 * math.pi)
        total = term if total is None else ad.add(total, term)
    # the arccos clamp keeps identical gradients a few 1e-3 short of 8pi
    if np.any(total.value >= 8.0 * math.pi - 1e-2):
        logger.warning("quad loss at its degenerate maximum (identical member gradients)")
    return ad.neg(ad.div(ad.sum(total), float(t.batch_size)))


GRAD_LOSSES: dict[str, Callable] = {
    "cosine_max_pairwise": grad_loss_cosine,
    "angle_sum": grad_loss_angle_sum,
    "quad_triangle_area": grad_loss_quad,
}


def gradient_loss(tape: EnsembleTape, kind: str, temperature: float = SMOOTH_MAX_TEMPERATURE) -> ad.Node:
    if kind == "cosine_max_pairwise":
        return grad_loss_cosine(tape, temperature=temperature)
    return GRAD_LOSSES[kind](tape)


def joint_loss(ensemble_or_tape, X=None, y=None, config: TrainConfig | None = None, kind: str | None = None):
    """``image_loss + beta * gradient_loss``; returns ``(total, image, gradient-or-None)``.

    With ``beta == 0`` or kind ``none`` the gradient-loss graph is never built.
    """
    t = _tape(ensemble_or_tape, X, y)
    config = config or TrainConfig()
    kind = kind or config.phase_schedule[0][1]
    img = image_loss(t)
    if config.beta == 0 or kind == "none":
        return img, img, None
    gl = gradient_loss(t, kind, config.temperature)
    return ad.add(img, ad.mul(gl, config.beta)), img, gl


def weight_gradients(tape: EnsembleTape, loss: ad.Node) -> list[list[np.ndarray]]:
    grads = tape.graph.gradient(loss, tape.flat_params())
    out, i = [], 0
    for member in tape.params:
        out.append(grads[i : i + len(member)])
        i += len(member)
    return out


@dataclass
class EpochRecord:
    epoch: int
    grad_loss_kind: str
    consensus_accuracy: float
    image_loss: float
    gradient_loss: float
    gdr_estimate: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, rec: EpochRecord) -> None:
        values = (rec.consensus_accuracy, rec.image_loss, rec.gradient_loss, rec.gdr_estimate)
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"non-finite train log entry {rec}")
        self.records.append(rec)

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        names = list(EpochRecord.__dataclass_fields__) + ["schema_version"]
        with tmp.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for r in self.records:
                w.writerow([*(asdict(r).values()), TRAIN_LOG_SCHEMA_VERSION])
        tmp.replace(path)
        return path


def initial_ensemble(n_inputs: int, n_classes: int, config: TrainConfig) -> Ensemble:
    dims = (n_inputs, *config.hidden, n_classes)
    models = [MlpModel.initialize(dims, np.random.default_rng([config.seed, i])) for i in range(config.n_members)]
    return Ensemble(models, [f"m{i}" for i in range(config.n_members)])


def consensus_accuracy_of(ensemble: Ensemble, X, y) -> float:
    return float(np.mean(np.all(ensemble.predictions(X) == np.asarray(y)[None, :], axis=0)))


def train_ensemble(
    config: TrainConfig,
    X,
    y,
    n_classes: int | None = None,
    ensemble: Ensemble | None = None,
    on_epoch: Callable | None = None,
) -> tuple[Ensemble, TrainLog]:
    """Train all members simultaneously with plain SGD on the joint loss.

    Deterministic given ``config.seed`` (initialization) and
    ``config.shuffle_seed`` (batch order, defaults to ``seed``).
    ``on_epoch(epoch, ensemble, record)`` runs after every epoch.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[0] != y.shape[0]:
        raise ValueError("need a non-empty 2-D X with one label per row")
    n_classes = int(n_classes if n_classes is not None else y.max() + 1)
    if ensemble is None:
        ensemble = initial_ensemble(X.shape[1], n_classes, config)
    for _, kind in config.phase_schedule:
        if kind == "angle_sum" and len(ensemble) != 3 or kind == "quad_triangle_area" and len(ensemble) != 4:
            raise ValueError(f"{kind} does not apply to a {len(ensemble)}-member ensemble")
        if kind == "cosine_max_pairwise" and len(ensemble) < 2:
            raise ValueError("cosine loss needs at least two members")

    shuffle_seed = config.seed if config.shuffle_seed is None else config.shuffle_seed
    rng = np.random.default_rng([shuffle_seed, 0x5EED])
    probe = np.sort(rng.permutation(X.shape[0])[: min(config.gdr_sample, X.shape[0])])
    params = [list(m.params) for m in ensemble.models]
    names = list(ensemble.names)
    log = TrainLog()

    for epoch in range(config.epochs_total):
        kind = config.kind_at(epoch)
        order = rng.permutation(X.shape[0])
        img_sum = grad_sum = 0.0
        batches = 0
        for start in range(0, X.shape[0], config.batch_size):
            idx = order[start : start + config.batch_size]
            current = Ensemble([m.with_params(p) for m, p in zip(ensemble.models, params)], names)
            try:
                tape = EnsembleTape(current, X[idx], y[idx])
                total, img, gl = joint_loss(tape, config=config, kind=kind)
                grads = weight_gradients(tape, total)
            except (ad.NonFiniteError, FloatingPointError) as exc:
                raise TrainingDivergedError(f"epoch {epoch}: {exc}", ensemble, log) from exc
            if not math.isfinite(total.item()):
                raise TrainingDivergedError(f"epoch {epoch}: non-finite loss", ensemble, log)
            for member, member_grads in zip(params, grads):
                for i, g in enumerate(member_grads):
                    member[i] = member[i] - config.learning_rate * g
            img_sum += img.item()
            grad_sum += gl.item() if gl is not None else 0.0
            batches += 1
        try:
            ensemble = Ensemble([m.with_params(p) for m, p in zip(ensemble.models, params)], names)
        except ValueError as exc:
            raise TrainingDivergedError(f"epoch {epoch}: {exc}", ensemble, log) from exc
        rec = EpochRecord(
            epoch=epoch,
            grad_loss_kind=kind,
            consensus_accuracy=consensus_accuracy_of(ensemble, X, y),
            image_loss=img_sum / batches,
            gradient_loss=grad_sum / batches,
            gdr_estimate=gdr(ensemble, X[probe], y[probe], RatingPolicy("exact", 2000, shuffle_seed)).gdr,
        )
        log.append(rec)
        logger.info(
            "epoch %d [%s] acc=%.4f image=%.4f grad=%.4f gdr=%.4f",
            epoch, kind, rec.consensus_accuracy, rec.image_loss, rec.gradient_loss, rec.gdr_estimate,
        )
        if on_epoch is not None:
            on_epoch(epoch, ensemble, rec)
    return ensemble, log
