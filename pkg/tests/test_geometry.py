import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from gradient_diversity import geometry as geo
from gradient_diversity.network import Ensemble, MlpModel

E = np.eye(784)


def tetrahedron():
    return np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float) / math.sqrt(3)


# ---- closed forms

def test_single_gradient_rates_one_half():
    assert geo.r_single(E[:1]).value == 0.5
    assert geo.r_single([[3.0, -2.0]]).std_error == 0.0
    with pytest.raises(geo.DegenerateGradientError):
        geo.r_single(np.zeros((1, 4)))


@pytest.mark.parametrize("g, expected", [
    ([[1.0, 2.0], [2.0, 4.0]], 0.5),
    ([[1.0, 0.0], [0.0, 5.0]], 0.25),
    ([[1.0, 1.0], [-2.0, -2.0]], 0.0),
])
def test_pair_examples(g, expected):
    assert geo.r_pair(g).value == pytest.approx(expected, abs=1e-15)


def test_pair_rejects_zero_and_wrong_size():
    with pytest.raises(geo.DegenerateGradientError):
        geo.r_pair([[1.0, 0.0], [0.0, 0.0]])
    with pytest.raises(ValueError):
        geo.r_pair(np.eye(3))


def test_triple_examples():
    assert geo.r_triple(np.eye(3)).value == pytest.approx(0.125, abs=1e-15)
    assert geo.r_triple(E[:3]).value == pytest.approx(0.125, abs=1e-15)
    ang = 2 * math.pi / 3 * np.arange(3)
    coplanar = np.stack([np.cos(ang), np.sin(ang), np.zeros(3)], axis=1)
    assert geo.r_triple(coplanar).value == pytest.approx(0.0, abs=1e-12)
    assert geo.r_triple(np.ones((3, 5))).value == 0.5
    with pytest.raises(geo.DegenerateGradientError):
        geo.r_triple(np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 0]]))


def test_triple_tetrahedron_face_and_empty_cone():
    # a regular-tetrahedron triple has angle sum 3 acos(-1/3) < 2pi: a small nonempty cone
    t = geo.r_triple(tetrahedron()[:3]).value
    assert t == pytest.approx((2 * math.pi - 3 * math.acos(-1 / 3)) / (4 * math.pi), rel=1e-12)
    # three pairwise angles never sum past 2pi; the clamp only absorbs rounding
    rng = np.random.default_rng(0)
    for _ in range(200):
        u = rng.standard_normal((3, 4))
        angles = geo.pairwise_angles(u / np.linalg.norm(u, axis=1)[:, None])
        assert angles[np.triu_indices(3, 1)].sum() <= 2 * math.pi + 1e-12


def test_quad_objective_values():
    assert geo.quad_triangle_area_sum(np.eye(4)) == pytest.approx(2 * math.pi, rel=1e-12)
    assert geo.quad_triangle_area_sum(np.ones((4, 6))) == pytest.approx(8 * math.pi, rel=1e-12)
    # each regular-tetrahedron triple has angle sum 3 acos(-1/3) ~ 5.73 < 2pi, so terms are positive
    per_term = 2 * math.pi - 3 * math.acos(-1 / 3)
    assert geo.quad_triangle_area_sum(tetrahedron()) == pytest.approx(4 * per_term, rel=1e-12)
    with pytest.raises(geo.DegenerateGradientError):
        geo.quad_triangle_area_sum(np.vstack([np.eye(4)[:3], np.zeros(4)]))


def test_tetrahedron_cone_is_empty_under_monte_carlo():
    # four normals positively spanning R^3: no direction is negative on all of them
    est = geo.r_monte_carlo(tetrahedron(), 10**6, seed=0)
    assert est.value == 0.0


# ---- sampling

def test_sample_unit_sphere_properties():
    v = geo.sample_unit_sphere(2, 10**5, 1)
    np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0, atol=1e-12)
    assert abs(np.mean(v[:, 0] > 0) - 0.5) <= 0.005
    w = geo.sample_unit_sphere(784, 10**5 // 5, 2)
    assert np.linalg.norm(w.mean(axis=0)) < 0.01 * math.sqrt(5) * 1.5
    np.testing.assert_array_equal(geo.sample_unit_sphere(5, 100, 3), geo.sample_unit_sphere(5, 100, 3))
    with pytest.raises(ValueError):
        geo.sample_unit_sphere(0, 10, 0)


@pytest.mark.slow
def test_sample_unit_sphere_mean_in_784_dimensions():
    w = geo.sample_unit_sphere(784, 10**5, 2)
    assert np.linalg.norm(w.mean(axis=0)) < 0.01


# ---- Monte Carlo

def test_monte_carlo_examples():
    one = geo.r_monte_carlo(E[:1], 10**6, seed=4)
    assert abs(one.value - 0.5) <= 0.0015
    two = geo.r_monte_carlo(E[:2], 10**6, seed=5)
    assert abs(two.value - 0.25) <= 0.0013
    assert two.std_error == pytest.approx(math.sqrt(two.value * (1 - two.value) / 10**6))
    assert two.sample_count == 10**6


def test_monte_carlo_full_space_path_agrees():
    g = np.random.default_rng(0).standard_normal((3, 12))
    exact = geo.r_triple(g).value
    full = geo.r_monte_carlo(g, 200_000, seed=1, projected=False)
    assert abs(full.value - exact) <= 3 * full.std_error


def test_monte_carlo_zero_gradient_rules():
    est = geo.r_monte_carlo(np.array([[1.0, 0.0], [0.0, 0.0]]), 1000, seed=0)
    assert est.value == 0.0 and est.zero_gradients == 1
    with pytest.raises(geo.DegenerateGradientError):
        geo.r_monte_carlo(np.zeros((2, 3)), 100)
    with pytest.raises(ValueError):
        geo.r_monte_carlo(np.eye(2), 0)


def test_monte_carlo_is_deterministic_for_a_seed():
    g = np.random.default_rng(9).standard_normal((4, 30))
    assert geo.r_monte_carlo(g, 5000, seed=3) == geo.r_monte_carlo(g, 5000, seed=3)


def test_closed_forms_agree_with_monte_carlo_on_100_random_sets():
    rng = np.random.default_rng(2024)
    misses = 0
    for t in range(100):
        k = 2 + t % 2
        g = rng.standard_normal((k, (3, 10, 784)[t % 3]))
        exact = geo.r_pair(g) if k == 2 else geo.r_triple(g)
        mc = geo.r_monte_carlo(g, 100_000, seed=t)
        misses += abs(exact.value - mc.value) > 3 * mc.std_error
    assert misses <= 2


gradient_sets = st.integers(1, 3).flatmap(
    lambda k: st.integers(k, 12).flatmap(
        lambda n: arrays(np.float64, (k, n), elements=st.floats(-10, 10, allow_nan=False))
    )
)


@settings(max_examples=60, deadline=None)
@given(gradient_sets, st.integers(0, 2**31))
def test_property_range_and_agreement(g, seed):
    gs = geo.GradientSet(g)
    if gs.zero_mask.any() or (gs.k == 3 and not gs.linearly_independent(1e-3)):
        return
    exact = geo.rating(gs)
    assert 0.0 <= exact.value <= 0.5
    mc = geo.r_monte_carlo(gs, 40_000, seed)
    assert 0.0 <= mc.value <= 0.5
    assert abs(exact.value - mc.value) <= 4.5 * max(mc.std_error, 1 / 40_000)


@settings(max_examples=40, deadline=None)
@given(gradient_sets, st.lists(st.floats(1e-3, 1e3), min_size=3, max_size=3), st.integers(0, 1000))
def test_property_scale_invariance(g, scales, seed):
    gs = geo.GradientSet(g)
    if np.any(gs.norms < 1e-6):
        return
    scaled = g * np.asarray(scales[: gs.k])[:, None]
    assert geo.rating(scaled).value == pytest.approx(geo.rating(g).value, abs=1e-12)
    assert geo.r_monte_carlo(scaled, 2000, seed).value == geo.r_monte_carlo(g, 2000, seed).value


@settings(max_examples=40, deadline=None)
@given(gradient_sets, st.randoms(use_true_random=False))
def test_property_permutation_invariance_of_closed_forms(g, rnd):
    gs = geo.GradientSet(g)
    if gs.zero_mask.any():
        return
    order = list(range(gs.k))
    rnd.shuffle(order)
    if gs.k == 3:
        assert geo.r_triple(g[order]).value == pytest.approx(geo.r_triple(g).value, abs=1e-14)
    elif gs.k == 2:
        assert geo.r_pair(g[order]).value == pytest.approx(geo.r_pair(g).value, abs=1e-15)


def test_permutation_invariance_of_monte_carlo_within_error():
    g = np.random.default_rng(1).standard_normal((5, 20))
    a = geo.r_monte_carlo(g, 200_000, 7)
    b = geo.r_monte_carlo(g[::-1], 200_000, 7)
    assert abs(a.value - b.value) <= 3 * math.hypot(a.std_error, b.std_error)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 6), st.integers(1, 15), st.integers(0, 10**6))
def test_property_monotone_when_adding_a_gradient(k, n, seed):
    g = np.random.default_rng(seed).standard_normal((k, n))
    before = geo.r_monte_carlo(g[:-1], 3001, seed)
    after = geo.r_monte_carlo(g, 3001, seed)
    assert after.value <= before.value


# ---- dispatch and test-set average

def test_rating_dispatch():
    assert geo.rating(np.ones((2, 3))).value == 0.5
    assert geo.rating(np.ones((2, 3))).method == "exact"
    assert geo.rating(np.eye(5), geo.RatingPolicy(samples=1000)).method == "monte_carlo"
    dependent = np.array([[1.0, 0, 0], [0, 1.0, 0], [1.0, 1.0, 0]])
    assert geo.rating(dependent, geo.RatingPolicy(samples=1000)).method == "monte_carlo"
    assert geo.rating(np.eye(3), geo.RatingPolicy("monte_carlo", 1000)).method == "monte_carlo"
    with pytest.raises(ValueError):
        geo.RatingPolicy("taylor")


def test_gdr_of_one_model_and_of_copies_is_one_half(rng):
    m = MlpModel.initialize((10, 8, 4), 0)
    X = rng.uniform(0, 1, (25, 10))
    y = rng.integers(0, 4, 25)
    assert geo.gdr(Ensemble([m]), X, y).gdr == 0.5
    res = geo.gdr(Ensemble([m, m, m]), X, y)
    assert res.gdr == 0.5 and len(res.ratings) == 25


def test_gdr_correct_only_and_errors(rng):
    a, b = MlpModel.initialize((10, 8, 4), 0), MlpModel.initialize((10, 8, 4), 1)
    ens = Ensemble([a, a, b])
    X = rng.uniform(0, 1, (40, 10))
    y = ens.predictions(X)[0]
    res = geo.gdr(ens, X, y, correct_only=True)
    assert set(res.indices) == set(np.flatnonzero((ens.predictions(X) == y).all(axis=0)))
    with pytest.raises(ValueError):
        geo.gdr(ens, X[:0], y[:0])


def test_gdr_seeds_per_example_independent_of_order(rng):
    ens = Ensemble([MlpModel.initialize((6, 5, 3), s) for s in range(4)])
    X = rng.uniform(0, 1, (6, 6))
    y = rng.integers(0, 3, 6)
    full = geo.gdr(ens, X, y, geo.RatingPolicy(samples=500, seed=3))
    assert geo.gdr(ens, X, y, geo.RatingPolicy(samples=500, seed=3)).values.tolist() == full.values.tolist()


def test_ratings_csv_round_trip(tmp_path, rng):
    ratings = [geo.RatingEstimate(0.25), geo.r_monte_carlo(rng.standard_normal((4, 6)), 999, 1)]
    path = geo.write_ratings_csv(tmp_path / "r.csv", ratings, [5, 9])
    header = path.read_text().splitlines()[0]
    assert header == "example_index,rating,std_error,sample_count,schema_version"
    back = geo.read_ratings_csv(path)
    assert [r.value for r in back] == [r.value for r in ratings]
    assert back[1].sample_count == 1000  # odd requests round up to whole antithetic pairs


def test_rating_estimate_validation():
    with pytest.raises(ValueError):
        geo.RatingEstimate(0.6)
    with pytest.raises(ValueError):
        geo.RatingEstimate(0.1, float("nan"))
