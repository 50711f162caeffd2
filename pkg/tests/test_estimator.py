import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from gradient_diversity import GradientDiversityEnsemble, network


@pytest.fixture(scope="module")
def fitted(small_blobs):
    y = np.array(["cat", "dog", "eel"])[small_blobs.y]
    clf = GradientDiversityEnsemble(hidden=(8,), schedule=[(2, "cosine_max_pairwise")],
                                    learning_rate=0.5, batch_size=16, random_state=1)
    return clf.fit(small_blobs.X, y), small_blobs.X, y


def test_params_and_clone():
    clf = GradientDiversityEnsemble(n_members=4, schedule="desk-baseline", beta=0.0)
    params = clf.get_params()
    assert params["n_members"] == 4 and params["schedule"] == "desk-baseline"
    twin = clone(clf)
    assert twin.get_params() == params and not hasattr(twin, "ensemble_")
    assert clf.set_params(beta=0.3).beta == 0.3


def test_fit_predict_with_string_labels(fitted):
    clf, X, y = fitted
    assert set(clf.classes_) == {"cat", "dog", "eel"}
    proba = clf.predict_proba(X)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert set(clf.predict(X)) <= set(clf.classes_)
    assert clf.score(X, y) > 0.5
    assert clf.member_predictions(X).shape == (3, len(X))
    assert clf.input_gradients(X[:4], y[:4]).shape == (4, 3, X.shape[1])
    assert 0 <= clf.gdr_score(X[:20], y[:20]) <= 0.5
    assert 0 <= clf.consensus_score(X, y) <= 1
    assert len(clf.train_log_) == 2


def test_fit_is_reproducible(fitted, small_blobs):
    clf, X, y = fitted
    again = clone(clf).fit(X, y)
    assert all(a.equals(b) for a, b in zip(clf.ensemble_, again.ensemble_))


def test_validation(fitted, tmp_path):
    clf, X, y = fitted
    with pytest.raises(NotFittedError):
        GradientDiversityEnsemble().predict(X)
    with pytest.raises(ValueError):
        clf.predict(X[:, :5])
    with pytest.raises(ValueError):
        clf.predict(X + 2.0)
    with pytest.raises(ValueError):
        GradientDiversityEnsemble(schedule="nope").fit(X, y)
    with pytest.raises(ValueError):
        GradientDiversityEnsemble().fit(X, np.zeros(len(X)))
    saved = network.load_ensemble(clf.save(tmp_path / "ens"))
    assert all(a.equals(b) for a, b in zip(saved, clf.ensemble_))
