import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cida.datasets import gen_circle
from cida.estimator import CIDAClassifier


@pytest.fixture(scope="module")
def circle():
    d = gen_circle(0, 20)
    y = np.where(d.is_source, d.y, -1)
    return d, y


def test_get_params_and_clone():
    est = CIDAClassifier(method="pcida", iterations=5)
    params = est.get_params()
    assert params["method"] == "pcida" and params["iterations"] == 5
    assert clone(est).get_params() == params


def test_fit_predict_shapes(circle):
    d, y = circle
    est = CIDAClassifier(iterations=50).fit(d.x, y, d.u[:, 0])
    assert est.predict(d.x, d.u).shape == (len(d),)
    proba = est.predict_proba(d.x, d.u)
    assert np.allclose(proba.sum(axis=1), 1.0, atol=1e-12)
    assert est.transform(d.x, d.u).shape == (len(d), 20)
    assert 0.0 <= est.score(d.x, d.y, d.u) <= 1.0
    assert len(est.history_) == 0


def test_string_labels_round_trip():
    d = gen_circle(1, 10)
    labels = np.array(["inside", "outside"], dtype=object)[d.y]
    y = np.where(d.is_source, labels, -1).astype(object)
    est = CIDAClassifier(iterations=20).fit(d.x, y, d.u)
    assert set(est.predict(d.x, d.u)) <= {"inside", "outside"}


def test_deterministic(circle):
    d, y = circle
    a = CIDAClassifier(iterations=30, random_state=3).fit(d.x, y, d.u).transform(d.x, d.u)
    b = CIDAClassifier(iterations=30, random_state=3).fit(d.x, y, d.u).transform(d.x, d.u)
    assert np.array_equal(a, b)


def test_validation(circle):
    d, y = circle
    with pytest.raises(NotFittedError):
        CIDAClassifier().predict(d.x, d.u)
    with pytest.raises(ValueError):
        CIDAClassifier(iterations=1).fit(d.x, y)
    with pytest.raises(ValueError):
        CIDAClassifier(iterations=1).fit(d.x, y, d.u[:-1])
    with pytest.raises(ValueError):
        CIDAClassifier(method="nope").fit(d.x, y, d.u)
    with pytest.raises(ValueError):
        CIDAClassifier(iterations=1).fit(d.x, np.full(len(d), -1), d.u)
    bad = d.x.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        CIDAClassifier(iterations=1).fit(bad, y, d.u)
    est = CIDAClassifier(iterations=1).fit(d.x, y, d.u)
    with pytest.raises(ValueError):
        est.predict(np.zeros((3, 5)), np.zeros(3))
