import numpy as np
import pytest
from sklearn.base import clone
from sklearn.datasets import make_blobs
from sklearn.exceptions import NotFittedError
from sklearn.model_selection import cross_val_score
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from syncswitch import SyncSwitchClassifier


@pytest.fixture(scope="module")
def blobs():
    X, y = make_blobs(n_samples=400, centers=3, n_features=5, cluster_std=2.0, random_state=0)
    return X, y


FAST = dict(epochs=5, n_workers=2, random_state=0)


def test_fit_predict_scores_well(blobs):
    X, y = blobs
    clf = SyncSwitchClassifier(**FAST).fit(X, y)
    assert clf.score(X, y) > 0.9
    assert clf.trace_.status == "completed" and clf.trace_.num_switches == 1
    assert clf.n_features_in_ == 5 and list(clf.classes_) == [0, 1, 2]
    proba = clf.predict_proba(X[:10])
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert np.array_equal(proba.argmax(axis=1), np.searchsorted(clf.classes_, clf.predict(X[:10])))


def test_string_labels_round_trip(blobs):
    X, y = blobs
    names = np.array(["ant", "bee", "cat"])[y]
    clf = SyncSwitchClassifier(**FAST).fit(X, names)
    assert set(clf.predict(X)) <= {"ant", "bee", "cat"}


def test_random_state_reproducible(blobs):
    X, y = blobs
    a = SyncSwitchClassifier(**FAST).fit(X, y)
    b = SyncSwitchClassifier(**FAST).fit(X, y)
    assert np.array_equal(a.params_, b.params_)


def test_params_and_clone():
    clf = SyncSwitchClassifier(n_workers=3, bsp_fraction=0.5)
    params = clf.get_params()
    assert params["n_workers"] == 3 and params["bsp_fraction"] == 0.5
    other = clone(clf).set_params(bsp_fraction=1.0)
    assert other.bsp_fraction == 1.0 and clf.bsp_fraction == 0.5


def test_bsp_only_and_asp_only(blobs):
    X, y = blobs
    for f, switches in ((1.0, 0), (0.0, 0)):
        clf = SyncSwitchClassifier(bsp_fraction=f, **FAST).fit(X, y)
        assert clf.trace_.num_switches == switches


def test_sklearn_integration(blobs):
    X, y = blobs
    pipe = make_pipeline(StandardScaler(), SyncSwitchClassifier(**FAST))
    scores = cross_val_score(pipe, X, y, cv=3)
    assert scores.mean() > 0.85


def test_unfitted_and_shape_errors(blobs):
    X, y = blobs
    with pytest.raises(NotFittedError):
        SyncSwitchClassifier().predict(X)
    clf = SyncSwitchClassifier(**FAST).fit(X, y)
    with pytest.raises(ValueError):
        clf.predict(X[:, :3])


@pytest.mark.parametrize(
    "kwargs",
    [dict(n_workers=0), dict(bsp_fraction=1.5), dict(batch_size=0), dict(learning_rate=0.0),
     dict(validation_fraction=1.0), dict(straggler_policy="panic")],
)
def test_invalid_hyperparameters(blobs, kwargs):
    X, y = blobs
    with pytest.raises(ValueError):
        SyncSwitchClassifier(**kwargs).fit(X, y)


def test_input_validation(blobs):
    X, y = blobs
    with pytest.raises(ValueError):
        SyncSwitchClassifier(**FAST).fit(X, np.zeros(len(y)))
    bad = X.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        SyncSwitchClassifier(**FAST).fit(bad, y)
    with pytest.raises(ValueError):
        SyncSwitchClassifier(**FAST).fit(X, y[:-1])
    with pytest.raises(ValueError):
        SyncSwitchClassifier(**FAST).fit(X, y + 0.5)


def test_divergence_raises(blobs):
    X, y = blobs
    with pytest.raises(ArithmeticError):
        SyncSwitchClassifier(learning_rate=1e307, **FAST).fit(X, y)
