import math

import numpy as np
import pytest

from gradient_diversity import attacks
from gradient_diversity.attacks import AttackConfig, AttackResult
from gradient_diversity.metrics import success_from_result
from gradient_diversity.network import Ensemble, MlpModel


@pytest.fixture
def random_setup(rng):
    ens = Ensemble([MlpModel.initialize((12, 10, 4), s) for s in range(3)])
    X = rng.uniform(0, 1, (40, 12))
    y = rng.integers(0, 4, 40)
    return ens, X, y


def test_config_defaults_per_family():
    assert AttackConfig("fgsm", 0.3, steps=9).steps == 1
    assert AttackConfig("fgsm", 0.3).step_size == 0.3
    pgd = AttackConfig("pgd_linf", 0.1)
    assert (pgd.steps, pgd.step_size, pgd.random_start) == (40, pytest.approx(0.01), False)
    m = AttackConfig("mi", 0.2)
    assert (m.steps, m.step_size, m.momentum_decay) == (10, pytest.approx(0.02), 1.0)
    assert AttackConfig("pgd_linf", 0.1).with_epsilon(0.3).step_size == pytest.approx(0.03)


@pytest.mark.parametrize("kwargs", [
    {"kind": "cw"}, {"epsilon": -0.1}, {"kind": "pgd_linf", "steps": 0},
    {"kind": "pgd_linf", "epsilon": 0.1, "step_size": 0.2}, {"kind": "mi", "momentum_decay": -1},
    {"clip_min": 1.0, "clip_max": 0.0},
])
def test_config_rejects(kwargs):
    with pytest.raises(ValueError):
        AttackConfig(**kwargs)


def test_ensemble_loss_identities(rng):
    m = MlpModel.initialize((5, 4, 3), 0)
    X = rng.uniform(0, 1, (6, 5))
    y = rng.integers(0, 3, 6)
    single = attacks.ensemble_loss(m, X, y).item()
    assert attacks.ensemble_loss(Ensemble([m, m]), X, y).item() == pytest.approx(single, rel=1e-14)
    uniform = MlpModel.zeros((5, 10))
    per_row, _ = attacks.loss_gradient(uniform, X, np.zeros(6, int))
    np.testing.assert_allclose(per_row, math.log(10), rtol=1e-14)
    with pytest.raises(ValueError):
        attacks.ensemble_loss(m, X[:, :4], y)


@pytest.mark.parametrize("kind", attacks.ATTACK_KINDS)
@pytest.mark.parametrize("eps", [0.0, 0.1, 0.3])
def test_box_and_pixel_constraints(random_setup, kind, eps):
    ens, X, y = random_setup
    res = attacks.run_attack(ens, X, y, AttackConfig(kind, eps, random_start=kind == "pgd_linf", seed=3))
    assert np.all(np.abs(res.adversary - X).max(axis=1) <= eps + 1e-12)
    assert np.all(res.perturbation_norm <= eps + 1e-12)
    assert res.adversary.min() >= 0 and res.adversary.max() <= 1
    assert res.per_model_prediction.shape == (3, 40)


@pytest.mark.parametrize("kind", attacks.ATTACK_KINDS)
def test_zero_budget_changes_nothing(random_setup, kind):
    ens, X, y = random_setup
    res = attacks.run_attack(ens, X, y, AttackConfig(kind, 0.0))
    np.testing.assert_array_equal(res.adversary, X)
    np.testing.assert_array_equal(res.per_model_prediction, ens.predictions(X))


def test_fgsm_increases_loss_for_small_epsilon(random_setup):
    ens, X, y = random_setup
    before, _ = attacks.loss_gradient(ens, X, y)
    res = attacks.fgsm(ens, X, y, AttackConfig("fgsm", 0.01))
    after, _ = attacks.loss_gradient(ens, res.adversary, y)
    assert np.mean(after >= before) >= 0.95


def test_one_step_pgd_and_mi_collapse_to_fgsm(random_setup):
    ens, X, y = random_setup
    X = np.clip(X, 0.2, 0.8)  # keep the pixel clip inactive
    f = attacks.fgsm(ens, X, y, AttackConfig("fgsm", 0.1)).adversary
    p = attacks.pgd_linf(ens, X, y, AttackConfig("pgd_linf", 0.1, steps=1, step_size=0.1)).adversary
    m = attacks.mi(ens, X, y, AttackConfig("mi", 0.1, steps=1, step_size=0.1, momentum_decay=0.0)).adversary
    np.testing.assert_array_equal(p, f)
    np.testing.assert_array_equal(m, f)


def test_mi_survives_zero_gradient():
    flat = MlpModel.zeros((4, 3))
    X = np.full((2, 4), 0.5)
    res = attacks.mi(flat, X, [0, 1], AttackConfig("mi", 0.1))
    np.testing.assert_array_equal(res.adversary, X)


@pytest.mark.parametrize("kind", attacks.ATTACK_KINDS)
def test_deterministic(random_setup, kind):
    ens, X, y = random_setup
    cfg = AttackConfig(kind, 0.2, random_start=True, seed=11)
    a = attacks.run_attack(ens, X, y, cfg).adversary
    b = attacks.run_attack(ens, X, y, cfg).adversary
    assert a.tobytes() == b.tobytes()


def test_inputs_outside_clip_range_rejected(random_setup):
    ens, X, y = random_setup
    with pytest.raises(ValueError):
        attacks.fgsm(ens, X + 2.0, y)


def test_result_save_and_load(tmp_path, random_setup):
    ens, X, y = random_setup
    res = attacks.pgd_linf(ens, X, y, AttackConfig("pgd_linf", 0.1, steps=3))
    raw, sidecar = res.save(tmp_path / "adv.f8")
    assert raw.stat().st_size == X.size * 8 and sidecar.exists()
    back = AttackResult.load(raw)
    assert back.adversary.tobytes() == res.adversary.tobytes()
    assert back.config == res.config
    np.testing.assert_array_equal(back.per_model_prediction, res.per_model_prediction)


def test_trained_ensemble_success_orderings(trained_small):
    ens, ds = trained_small
    ok = np.all(ens.predictions(ds.X) == ds.y, axis=0)
    X, y = ds.X[ok][:120], ds.y[ok][:120]
    succ = {}
    for kind in attacks.ATTACK_KINDS:
        for eps in (0.1, 0.2, 0.3):
            succ[kind, eps] = success_from_result(attacks.run_attack(ens, X, y, AttackConfig(kind, eps)))
    assert succ["fgsm", 0.1] <= succ["fgsm", 0.2] <= succ["fgsm", 0.3]
    for eps in (0.1, 0.2, 0.3):
        assert succ["pgd_linf", eps] >= succ["fgsm", eps]
    assert succ["pgd_linf", 0.3] > 0
