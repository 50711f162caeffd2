"""Solid-angle rating of an ensemble's gradient cone and its test-set average.

For gradients ``g_1..g_k`` at an input ``x`` the rating is the fraction of unit
directions ``v`` with ``v . g_i < 0`` for every ``i``. Closed forms exist for
``k <= 3``; larger sets are estimated by Monte Carlo.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

ZERO_NORM = 1e-12
DEPENDENCE_TOL = 1e-8
DEFAULT_MC_SAMPLES = 20_000
CSV_SCHEMA_VERSION = 1


class DegenerateGradientError(ValueError):
    """A closed form was asked to rate a zero or linearly dependent gradient set."""


@dataclass(frozen=True)
class GradientSet:
    """The ``k`` input gradients of an ensemble at one input, as rows of ``grads``."""

    grads: np.ndarray

    def __post_init__(self):
        g = np.array(self.grads, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        if g.ndim != 2 or g.shape[0] < 1 or g.shape[1] < 1:
            raise ValueError(f"expected a (k, n) array of gradients, got shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise ValueError("gradients must be finite")
        g.flags.writeable = False
        object.__setattr__(self, "grads", g)

    @property
    def k(self) -> int:
        return self.grads.shape[0]

    @property
    def n(self) -> int:
        return self.grads.shape[1]

    @property
    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.grads, axis=1)

    @property
    def zero_mask(self) -> np.ndarray:
        return self.norms < ZERO_NORM

    def unit(self) -> np.ndarray:
        """Unit-normalized gradients; raises if any member is numerically zero."""
        if self.zero_mask.any():
            raise DegenerateGradientError(
                f"zero gradient at member(s) {np.flatnonzero(self.zero_mask).tolist()}"
            )
        return self.grads / self.norms[:, None]

    def linearly_independent(self, tol: float = DEPENDENCE_TOL) -> bool:
        if self.zero_mask.any() or self.k > self.n:
            return False
        s = np.linalg.svd(self.unit(), compute_uv=False)
        return bool(s[-1] > tol)


@dataclass(frozen=True)
class RatingEstimate:
    value: float
    std_error: float = 0.0
    sample_count: int = 0
    method: str = "exact"
    zero_gradients: int = 0

    def __post_init__(self):
        if not (0.0 <= self.value <= 0.5 + 1e-15):
            raise ValueError(f"rating {self.value} outside [0, 0.5]")
        if not (math.isfinite(self.std_error) and self.std_error >= 0):
            raise ValueError("std_error must be finite and non-negative")


def _as_set(g) -> GradientSet:
    return g if isinstance(g, GradientSet) else GradientSet(g)


def _require_k(g: GradientSet, k: int) -> None:
    if g.k != k:
        raise ValueError(f"expected {k} gradients, got {g.k}")


def pairwise_angles(unit: np.ndarray) -> np.ndarray:
    """Matrix of angles between unit rows.

    Uses ``2 atan2(|u - v|, |u + v|)``, which stays accurate near 0 and pi
    where ``arccos`` of a rounded dot product does not.
    """
    diff = np.linalg.norm(unit[:, None, :] - unit[None, :, :], axis=-1)
    summ = np.linalg.norm(unit[:, None, :] + unit[None, :, :], axis=-1)
    ang = 2.0 * np.arctan2(diff, summ)
    np.fill_diagonal(ang, 0.0)
    return ang


def _excess(ang: np.ndarray, i: int, j: int, l: int) -> float:
    """Area of the spherical triangle polar to gradients i, j, l (``2pi`` minus angle sum)."""
    return 2.0 * math.pi - (ang[i, j] + ang[i, l] + ang[j, l])


def r_single(g) -> RatingEstimate:
    g = _as_set(g)
    _require_k(g, 1)
    g.unit()
    return RatingEstimate(0.5)


def r_pair(g) -> RatingEstimate:
    """``(pi - angle(g1, g2)) / 2pi``."""
    g = _as_set(g)
    _require_k(g, 2)
    ang = pairwise_angles(g.unit())
    return RatingEstimate(float(np.clip((math.pi - ang[0, 1]) / (2.0 * math.pi), 0.0, 0.5)))


def r_triple(g) -> RatingEstimate:
    """``max(0, 2pi - (t12 + t13 + t23)) / 4pi``.

    The polar cone of three independent vectors meets the 2-sphere of their
    span in a triangle whose angles are ``pi - t_ij``; Girard gives its area.
    The expression stays correct in the coplanar limit (a lune, or empty once
    the angles sum to ``2pi``), but :func:`rating` still routes dependent sets
    to Monte Carlo.
    """
    g = _as_set(g)
    _require_k(g, 3)
    ang = pairwise_angles(g.unit())
    area = max(0.0, _excess(ang, 0, 1, 2))
    return RatingEstimate(float(min(area / (4.0 * math.pi), 0.5)))


def quad_triangle_area_sum(g) -> float:
    """Sum over the four 3-subsets of the polar-triangle area, each clamped to ``[0, 2pi]``.

    A quantity to maximize when training four-member ensembles, not a rating:
    four mutually orthogonal gradients give ``2pi``; four identical ones give
    the degenerate ``8pi``. Zero gradients are rejected.
    """
    g = _as_set(g)
    _require_k(g, 4)
    ang = pairwise_angles(g.unit())
    return float(
        sum(
            min(max(_excess(ang, *subset), 0.0), 2.0 * math.pi)
            for subset in itertools.combinations(range(4), 3)
        )
    )


def sample_unit_sphere(n: int, count: int, seed) -> np.ndarray:
    """``count`` i.i.d. uniform points on the unit sphere in ``R^n`` (normalized Gaussians)."""
    if n < 1 or count < 1:
        raise ValueError("need n >= 1 and count >= 1")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((count, n))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    # a Gaussian draw of exact zero norm has probability zero; redraw defensively
    while np.any(norms == 0):
        bad = norms[:, 0] == 0
        v[bad] = rng.standard_normal((int(bad.sum()), n))
        norms = np.linalg.norm(v, axis=1, keepdims=True)
    return v / norms


def _span_coordinates(g: GradientSet) -> np.ndarray:
    """Coordinates ``R`` (k x k) of the unit gradients in an orthonormal basis of their span.

    The basis comes from a QR factorization in member order, so the first ``j``
    basis vectors depend only on the first ``j`` gradients.
    """
    safe = np.where(g.zero_mask[:, None], 0.0, g.grads / np.maximum(g.norms, ZERO_NORM)[:, None])
    if g.k <= g.n:
        _, r = np.linalg.qr(safe.T, mode="reduced")
        return r
    return safe.T


def _antithetic(z: np.ndarray, samples: int) -> np.ndarray:
    return np.concatenate([z, -z])[:samples]


def _coordinate_stream(seed, column: int, samples: int) -> np.ndarray:
    return np.random.default_rng([int(seed), column]).standard_normal(samples)


def r_monte_carlo(g, samples: int = DEFAULT_MC_SAMPLES, seed=0, projected: bool = True) -> RatingEstimate:
    """Fraction of uniform random directions that project negatively onto every gradient.

    The dot products ``v . g_i`` of an isotropic Gaussian ``v`` only depend on
    its component inside ``span(g_1..g_k)``, so by default the directions are
    drawn directly as standard normal coordinates in that span (exact in
    distribution, cost independent of ``n``). Directions come in antithetic
    pairs ``(v, -v)``; a pointed cone never holds both, so the estimate stays
    in ``[0, 0.5]``; an odd ``samples`` is rounded up to keep the pairs whole.
    Coordinate ``j`` comes from its
    own seeded stream, so appending a gradient keeps the earlier constraints
    on the same samples and the hit set can only shrink.

    ``projected=False`` draws full ``n``-dimensional unit vectors with
    :func:`sample_unit_sphere` instead.

    A zero gradient is a constraint no direction satisfies (``v . 0 < 0`` is
    false), so any zero member makes the estimate 0.
    """
    g = _as_set(g)
    if samples < 1:
        raise ValueError("samples must be positive")
    zeros = int(g.zero_mask.sum())
    if zeros == g.k:
        raise DegenerateGradientError("all gradients are zero")
    if zeros:
        logger.debug("%d zero gradient(s): rating is 0 under the strict inequality", zeros)

    # an odd request is rounded up so every direction has its antithetic twin
    samples += samples % 2
    half = samples // 2
    if projected:
        coords = _span_coordinates(g)
        z = [_antithetic(_coordinate_stream(seed, j, half), samples) for j in range(coords.shape[0])]
        hits = np.ones(samples, dtype=bool)
        proj = np.empty(samples)
        for i in range(g.k):
            proj[:] = 0.0
            # fixed summation order over nonzero coordinates keeps the nesting exact
            for j in np.flatnonzero(coords[:, i]):
                proj += z[j] * coords[j, i]
            hits &= proj < 0.0
        count = int(hits.sum())
    else:
        count = 0
        chunk = max(1, min(half, 1_000_000 // max(g.n, 1)))
        rng = np.random.default_rng(seed)
        done = 0
        while done < half:
            m = min(chunk, half - done)
            v = sample_unit_sphere(g.n, m, rng)
            dots = v @ g.grads.T
            count += int(np.all(dots < 0.0, axis=1).sum()) + int(np.all(dots > 0.0, axis=1).sum())
            done += m

    p = count / samples
    return RatingEstimate(
        value=p,
        std_error=math.sqrt(p * (1.0 - p) / samples),
        sample_count=samples,
        method="monte_carlo",
        zero_gradients=zeros,
    )


@dataclass(frozen=True)
class RatingPolicy:
    """How to rate a gradient set.

    ``method="exact"`` uses the closed forms for ``k <= 3`` (falling back to
    Monte Carlo for zero or dependent gradients and for ``k >= 4``);
    ``method="monte_carlo"`` always samples.
    """

    method: str = "exact"
    samples: int = DEFAULT_MC_SAMPLES
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("exact", "monte_carlo"):
            raise ValueError(f"unknown rating method {self.method!r}")
        if self.samples < 1:
            raise ValueError("samples must be positive")


def rating(g, policy: RatingPolicy | None = None, seed=None) -> RatingEstimate:
    g = _as_set(g)
    policy = policy or RatingPolicy()
    seed = policy.seed if seed is None else seed
    if policy.method == "exact" and g.k <= 3 and not g.zero_mask.any():
        if g.k == 1:
            return r_single(g)
        if g.k == 2:
            return r_pair(g)
        if g.linearly_independent():
            return r_triple(g)
    return r_monte_carlo(g, policy.samples, seed)


@dataclass
class GDRResult:
    gdr: float
    ratings: list = field(repr=False)
    indices: np.ndarray = field(repr=False)
    zero_gradient_examples: int = 0

    @property
    def values(self) -> np.ndarray:
        return np.array([r.value for r in self.ratings])

    def histogram(self, bins: int = 20, range_=(0.0, 0.5)):
        return np.histogram(self.values, bins=bins, range=range_)

    def mass_below(self, threshold: float) -> float:
        return float(np.mean(self.values < threshold))


def gdr(ensemble, X, y, policy: RatingPolicy | None = None, correct_only: bool = False) -> GDRResult:
    """Mean rating over a test set, with gradients of each member's true-class confidence.

    Example ``i`` is rated with Monte Carlo seed ``policy.seed ^ i`` so results do
    not depend on evaluation order. ``correct_only`` restricts the average to
    inputs every member classifies correctly.
    """
    policy = policy or RatingPolicy()
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if X.shape[0] == 0:
        raise ValueError("GDR needs a non-empty test set")
    if X.shape[0] != y.shape[0]:
        raise ValueError("X and y lengths differ")
    indices = np.arange(X.shape[0])
    if correct_only:
        keep = np.all(ensemble.predictions(X) == y[None, :], axis=0)
        indices = indices[keep]
        if indices.size == 0:
            raise ValueError("no test example is classified correctly by every member")
    grads = ensemble.input_gradients(X[indices], y[indices])
    ratings = []
    zero_examples = 0
    for i, G in zip(indices, grads):
        gs = GradientSet(G)
        zero_examples += bool(gs.zero_mask.any())
        ratings.append(rating(gs, policy, seed=policy.seed ^ int(i)))
    if zero_examples:
        logger.warning("%d example(s) had a zero member gradient", zero_examples)
    return GDRResult(float(np.mean([r.value for r in ratings])), ratings, indices, zero_examples)


def write_ratings_csv(path, result_or_ratings, indices: Sequence[int] | None = None) -> Path:
    """Columns: example_index, rating, std_error, sample_count, schema_version."""
    if isinstance(result_or_ratings, GDRResult):
        ratings, indices = result_or_ratings.ratings, result_or_ratings.indices
    else:
        ratings = list(result_or_ratings)
        indices = range(len(ratings)) if indices is None else indices
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["example_index", "rating", "std_error", "sample_count", "schema_version"])
        for i, r in zip(indices, ratings):
            w.writerow([int(i), repr(r.value), repr(r.std_error), r.sample_count, CSV_SCHEMA_VERSION])
    tmp.replace(path)
    return path


def read_ratings_csv(path) -> list[RatingEstimate]:
    with Path(path).open(newline="") as fh:
        return [
            RatingEstimate(float(row["rating"]), float(row["std_error"]), int(row["sample_count"]),
                           "exact" if int(row["sample_count"]) == 0 else "monte_carlo")
            for row in csv.DictReader(fh)
        ]
