"""White-box L-infinity attacks (FGSM, PGD, momentum iterative) on models and ensembles.

Ensembles are attacked through the mean of the members' cross-entropies. All
attacks are untargeted: they ascend the true-class loss.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .network import Ensemble, MlpModel, _one_hot, forward_logits

ATTACK_KINDS = ("fgsm", "pgd_linf", "mi")
BOX_TOL = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    """Attack family and budget.

    ``steps``/``step_size``/``momentum_decay`` default per family when left as
    ``None``: FGSM takes one step of size ``epsilon``; PGD takes 40 steps of
    ``epsilon / 10``; MI takes 10 steps of ``epsilon / 10`` with decay 1.0.
    """

    kind: str = "fgsm"
    epsilon: float = 0.1
    steps: int | None = None
    step_size: float | None = None
    momentum_decay: float | None = None
    random_start: bool = False
    seed: int = 0
    clip_min: float = 0.0
    clip_max: float = 1.0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack {self.kind!r}; expected one of {ATTACK_KINDS}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        defaults = {
            "fgsm": (1, self.epsilon, 0.0),
            "pgd_linf": (40, self.epsilon / 10, 0.0),
            "mi": (10, self.epsilon / 10, 1.0),
        }[self.kind]
        steps = 1 if self.kind == "fgsm" else (defaults[0] if self.steps is None else int(self.steps))
        step_size = defaults[1] if self.step_size is None else float(self.step_size)
        if self.kind == "fgsm":
            step_size = self.epsilon
        mu = defaults[2] if self.momentum_decay is None else float(self.momentum_decay)
        if steps < 1:
            raise ValueError("steps must be >= 1")
        if step_size < 0 or step_size > self.epsilon + BOX_TOL:
            raise ValueError("step_size must lie in [0, epsilon]")
        if mu < 0:
            raise ValueError("momentum_decay must be >= 0")
        if not self.clip_min < self.clip_max:
            raise ValueError("clip_min must be below clip_max")
        object.__setattr__(self, "steps", steps)
        object.__setattr__(self, "step_size", step_size)
        object.__setattr__(self, "momentum_decay", mu)

    def with_epsilon(self, epsilon: float) -> "AttackConfig":
        """Same family at a new budget, with family defaults re-derived."""
        return AttackConfig(self.kind, epsilon, random_start=self.random_start, seed=self.seed,
                            clip_min=self.clip_min, clip_max=self.clip_max)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttackResult:
    """Adversaries for a batch; ``per_model_prediction`` has shape ``(k, B)``."""

    adversary: np.ndarray
    perturbation_norm: np.ndarray
    per_model_prediction: np.ndarray
    original_label: np.ndarray
    config: AttackConfig = field(default=None)

    def __len__(self) -> int:
        return self.adversary.shape[0]

    def save(self, path) -> tuple[Path, Path]:
        """Raw little-endian float64 adversaries at ``path`` plus ``path.json`` sidecar."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(np.ascontiguousarray(self.adversary, dtype="<f8").tobytes())
        sidecar = path.with_name(path.name + ".json")
        sidecar.write_text(json.dumps({
            "shape": list(self.adversary.shape),
            "dtype": "<f8",
            "config": self.config.to_dict() if self.config else None,
            "per_model_prediction": self.per_model_prediction.tolist(),
            "original_label": self.original_label.tolist(),
            "perturbation_norm": self.perturbation_norm.tolist(),
        }, indent=1))
        return path, sidecar

    @classmethod
    def load(cls, path) -> "AttackResult":
        path = Path(path)
        meta = json.loads(path.with_name(path.name + ".json").read_text())
        adv = np.frombuffer(path.read_bytes(), dtype="<f8").reshape(meta["shape"]).astype(np.float64)
        return cls(
            adv,
            np.array(meta["perturbation_norm"]),
            np.array(meta["per_model_prediction"], dtype=np.int64),
            np.array(meta["original_label"], dtype=np.int64),
            AttackConfig(**meta["config"]) if meta["config"] else None,
        )


def _as_ensemble(target) -> Ensemble:
    if isinstance(target, MlpModel):
        return Ensemble([target])
    if isinstance(target, Ensemble):
        return target
    return Ensemble(list(target))


def ensemble_loss(target, X, y) -> ad.Node:
    """Mean over members of the summed per-row cross-entropy, recorded with ``X`` as a leaf.

    Returns the scalar node; the input leaf is ``node.graph.nodes[0]``.
    Rows are independent, so the gradient row ``b`` is the gradient of row
    ``b``'s mean member loss.
    """
    ens = _as_ensemble(target)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != ens.n_inputs:
        raise ValueError(f"input dimension {X.shape[1]} != {ens.n_inputs}")
    onehot = _one_hot(y, X.shape[0], ens.n_classes)
    g = ad.Graph()
    xn = g.leaf(X)
    total = None
    for m in ens.models:
        ce = ad.sum(ad.softmax_cross_entropy(forward_logits(xn, m.params), onehot))
        total = ce if total is None else ad.add(total, ce)
    return ad.div(total, float(len(ens)))


def loss_gradient(target, X, y) -> tuple[np.ndarray, np.ndarray]:
    """Per-row mean member cross-entropy and its gradient with respect to the input."""
    loss = ensemble_loss(target, X, y)
    xn = loss.graph.nodes[0]
    (grad,) = loss.graph.gradient(loss, [xn])
    ens = _as_ensemble(target)
    onehot = _one_hot(y, grad.shape[0], ens.n_classes)
    per_row = np.mean(
        [_row_cross_entropy(m, xn.value, onehot) for m in ens.models], axis=0
    )
    return per_row, grad


def _row_cross_entropy(model: MlpModel, X, onehot) -> np.ndarray:
    z = model.logits(X)
    m = z.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]
    return lse - (onehot * z).sum(axis=1)


def _project(x_adv, x0, cfg: AttackConfig) -> np.ndarray:
    x_adv = np.clip(x_adv, x0 - cfg.epsilon, x0 + cfg.epsilon)
    return np.clip(x_adv, cfg.clip_min, cfg.clip_max)


def _finish(ens: Ensemble, x_adv, x0, y, cfg) -> AttackResult:
    norms = np.abs(x_adv - x0).max(axis=1) if x0.shape[1] else np.zeros(x0.shape[0])
    return AttackResult(x_adv, norms, ens.predictions(x_adv), np.asarray(y, dtype=np.int64).reshape(-1), cfg)


def _prepare(target, X, y, cfg):
    ens = _as_ensemble(target)
    x0 = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if x0.shape[1] != ens.n_inputs:
        raise ValueError(f"input dimension {x0.shape[1]} != {ens.n_inputs}")
    if np.any(x0 < cfg.clip_min) or np.any(x0 > cfg.clip_max):
        raise ValueError("inputs must lie inside the clip range")
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (x0.shape[0],))
    return ens, x0, y


def _start(x0, cfg: AttackConfig) -> np.ndarray:
    if not cfg.random_start:
        return x0.copy()
    rng = np.random.default_rng(cfg.seed)
    return _project(x0 + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x0.shape), x0, cfg)


def fgsm(target, X, y, config: AttackConfig | None = None) -> AttackResult:
    """``x* = clip(x + eps * sign(grad_x loss))``."""
    cfg = config or AttackConfig("fgsm")
    if cfg.kind != "fgsm":
        cfg = replace(cfg, kind="fgsm", steps=None, step_size=None, momentum_decay=None)
    ens, x0, y = _prepare(target, X, y, cfg)
    _, grad = loss_gradient(ens, x0, y)
    x_adv = _project(x0 + cfg.epsilon * np.sign(grad), x0, cfg)
    return _finish(ens, x_adv, x0, y, cfg)


def pgd_linf(target, X, y, config: AttackConfig | None = None) -> AttackResult:
    """Iterated sign ascent projected onto the epsilon box intersected with the pixel range."""
    cfg = config or AttackConfig("pgd_linf")
    ens, x0, y = _prepare(target, X, y, cfg)
    x_adv = _start(x0, cfg)
    for _ in range(cfg.steps):
        _, grad = loss_gradient(ens, x_adv, y)
        x_adv = _project(x_adv + cfg.step_size * np.sign(grad), x0, cfg)
    return _finish(ens, x_adv, x0, y, cfg)


def mi(target, X, y, config: AttackConfig | None = None) -> AttackResult:
    """Momentum iterative: ``g <- mu * g + grad / ||grad||_1``; ``x <- proj(x + alpha * sign(g))``.

    Rows whose gradient is exactly zero skip the normalized term and move on
    momentum alone.
    """
    cfg = config or AttackConfig("mi")
    ens, x0, y = _prepare(target, X, y, cfg)
    x_adv = _start(x0, cfg)
    g = np.zeros_like(x0)
    for _ in range(cfg.steps):
        _, grad = loss_gradient(ens, x_adv, y)
        l1 = np.abs(grad).sum(axis=1, keepdims=True)
        step = np.divide(grad, l1, out=np.zeros_like(grad), where=l1 > 0)
        g = cfg.momentum_decay * g + step
        x_adv = _project(x_adv + cfg.step_size * np.sign(g), x0, cfg)
    return _finish(ens, x_adv, x0, y, cfg)


ATTACKS = {"fgsm": fgsm, "pgd_linf": pgd_linf, "mi": mi}


def run_attack(target, X, y, config: AttackConfig) -> AttackResult:
    return ATTACKS[config.kind](target, X, y, config)
