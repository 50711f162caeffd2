"""Fast self-check suite behind ``gdr verify``: oracles that need no data or network."""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attacks, autodiff as ad, data_io, geometry, network, trainer


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def _rel(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def check_closed_forms() -> str:
    e = np.eye(3)
    values = {
        "single": geometry.r_single(e[:1]).value,
        "orthogonal pair": geometry.r_pair(e[:2]).value,
        "anti-parallel pair": geometry.r_pair(np.stack([e[0], -e[0]])).value,
        "orthogonal triple": geometry.r_triple(e).value,
    }
    expected = {"single": 0.5, "orthogonal pair": 0.25, "anti-parallel pair": 0.0, "orthogonal triple": 0.125}
    bad = {k: v for k, v in values.items() if abs(v - expected[k]) > 1e-12}
    assert not bad, f"closed forms off: {bad}"
    return "4 analytic cases exact"


def check_closed_form_vs_monte_carlo(sets: int = 30, samples: int = 200_000) -> str:
    rng = np.random.default_rng(12345)
    misses = 0
    for t in range(sets):
        k = 2 + t % 2
        n = (3, 10, 50)[t % 3]
        g = rng.standard_normal((k, n))
        exact = geometry.r_pair(g) if k == 2 else geometry.r_triple(g)
        mc = geometry.r_monte_carlo(g, samples, seed=t)
        if abs(exact.value - mc.value) > 3 * max(mc.std_error, 1e-12):
            misses += 1
    assert misses <= 2, f"{misses}/{sets} sets outside 3 standard errors"
    return f"{sets - misses}/{sets} within 3 std errors"


def check_primitive_derivatives(h: float = 1e-5) -> str:
    rng = np.random.default_rng(7)
    unary = {
        "tanh": ad.tanh, "sigmoid": ad.sigmoid, "softplus": ad.softplus, "exp": ad.exp,
        "log": ad.log, "sqrt": ad.sqrt, "arccos": ad.arccos,
    }
    worst = 0.0
    for name, fn in unary.items():
        for _ in range(10):
            if name in ("log", "sqrt"):
                x0 = rng.uniform(0.1, 2.0)
            elif name == "arccos":
                x0 = rng.uniform(-0.95, 0.95)
            else:
                x0 = rng.uniform(-2.0, 2.0)
            g = ad.Graph()
            x = g.leaf(x0)
            (d,) = g.gradient(fn(x), [x])
            fd = (fn(ad.Graph().leaf(x0 + h)).item() - fn(ad.Graph().leaf(x0 - h)).item()) / (2 * h)
            worst = max(worst, abs(d - fd) / max(abs(fd), 1e-8))
    assert worst < 1e-6, f"worst relative error {worst:.2e}"
    return f"worst relative error {worst:.1e}"


def check_second_derivative() -> str:
    g = ad.Graph()
    x = g.leaf(2.0)
    (dx,) = g.gradient(x * x * x, [x], differentiable=True)
    (d2,) = g.gradient(dx, [x])
    assert abs(d2 - 12.0) < 1e-9, f"d2(x^3)/dx2 at 2 = {d2}"
    return "d2(x^3)/dx2 = 12"


def check_input_gradient() -> str:
    rng = np.random.default_rng(3)
    model = network.MlpModel.initialize((6, 5, 4), rng)
    x = rng.uniform(0, 1, 6)
    grad = network.input_gradient(model, x, 2)
    h = 1e-5
    fd = np.array([
        (network.confidences(model, x + h * e)[2] - network.confidences(model, x - h * e)[2]) / (2 * h)
        for e in np.eye(6)
    ])
    err = _rel(grad, fd)
    assert err < 1e-6, f"relative error {err:.2e}"
    return f"relative error {err:.1e}"


def check_double_backprop(h: float = 1e-4) -> str:
    rng = np.random.default_rng(11)
    ens = network.Ensemble([network.MlpModel.initialize((8, 6, 3), rng) for _ in range(3)])
    X = rng.uniform(0, 1, (4, 8))
    y = rng.integers(0, 3, 4)
    worst = 0.0
    for fn in (trainer.grad_loss_cosine, trainer.grad_loss_angle_sum):
        tape = trainer.EnsembleTape(ens, X, y)
        grads = trainer.weight_gradients(tape, fn(tape))
        analytic, numeric = [], []
        for mi, model in enumerate(ens.models):
            for pi, p in enumerate(model.params):
                analytic.append(grads[mi][pi].ravel())
                fd = np.empty(p.size)
                for j in range(p.size):
                    vals = []
                    for s in (1.0, -1.0):
                        q = [a.copy() for a in model.params]
                        q[pi].flat[j] += s * h
                        members = list(ens.models)
                        members[mi] = model.with_params(q)
                        vals.append(fn(network.Ensemble(members), X, y).item())
                    fd[j] = (vals[0] - vals[1]) / (2 * h)
                numeric.append(fd)
        worst = max(worst, _rel(np.concatenate(analytic), np.concatenate(numeric)))
    assert worst < 1e-3, f"relative L2 error {worst:.2e}"
    return f"relative L2 error {worst:.1e}"


def check_attack_constraints() -> str:
    rng = np.random.default_rng(5)
    ens = network.Ensemble([network.MlpModel.initialize((20, 16, 4), rng) for _ in range(3)])
    X = rng.uniform(0, 1, (50, 20))
    y = rng.integers(0, 4, 50)
    for kind in attacks.ATTACK_KINDS:
        cfg = attacks.AttackConfig(kind, 0.2)
        res = attacks.run_attack(ens, X, y, cfg)
        assert np.all(np.abs(res.adversary - X) <= 0.2 + 1e-12), f"{kind} left the epsilon box"
        assert res.adversary.min() >= 0.0 and res.adversary.max() <= 1.0, f"{kind} left [0, 1]"
    return "fgsm, pgd_linf, mi inside box and pixel range"


def check_serialization() -> str:
    model = network.MlpModel.initialize((7, 5, 3), 1)
    back = network.deserialize(network.serialize(model))
    assert back.equals(model), "round trip changed parameters"
    return "bit-exact round trip"


def check_idx_round_trip() -> str:
    ds = data_io.synthetic_blobs(16, 3, 5, 0.1, 0)
    with tempfile.TemporaryDirectory() as tmp:
        img, lab = Path(tmp) / "img", Path(tmp) / "lab"
        data_io.write_idx(ds, img, lab)
        back = data_io.load_idx(img, lab, n_classes=3)
    assert np.all(back.y == ds.y), "labels changed"
    err = float(np.abs(back.X - ds.X).max())
    assert err <= 1 / 510 + 1e-12, f"pixel error {err}"
    return f"max pixel error {err:.2e}"


CHECKS = [
    ("closed forms", check_closed_forms),
    ("closed form vs Monte Carlo", check_closed_form_vs_monte_carlo),
    ("primitive first derivatives", check_primitive_derivatives),
    ("second derivative", check_second_derivative),
    ("input gradient vs finite differences", check_input_gradient),
    ("double backprop weight gradients", check_double_backprop),
    ("attack constraints", check_attack_constraints),
    ("model serialization", check_serialization),
    ("IDX round trip", check_idx_round_trip),
]


def run_checks(checks=None) -> list[CheckResult]:
    results = []
    for name, fn in checks or CHECKS:
        start = time.perf_counter()
        try:
            detail, ok = fn(), True
        except Exception as exc:  # a failing check must not stop the table
            detail, ok = f"{type(exc).__name__}: {exc}", False
        results.append(CheckResult(name, ok, detail, time.perf_counter() - start))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check'.ljust(width)}  status  time(s)  detail"]
    for r in results:
        lines.append(f"{r.name.ljust(width)}  {'PASS' if r.passed else 'FAIL'}    {r.seconds:7.2f}  {r.detail}")
    return "\n".join(lines)
