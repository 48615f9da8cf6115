import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from compose_retrieval.estimator import ComposedImageRetriever
from compose_retrieval.experiments import build_data

from tiny import tiny_config

SMALL = dict(n_global=2, n_local=2, dim=8, num_tokens=2, hidden=16, epochs=3, batch_size=8)


@pytest.fixture(scope="module")
def arrays():
    data = build_data(tiny_config())
    G = data.world.payloads

    def xy(triplets):
        X = np.hstack([G[[t.reference_id for t in triplets]], np.stack([t.text for t in triplets])])
        return X, G[[t.target_id for t in triplets]]

    return (*xy(data.train), *xy(data.test), G)


@pytest.fixture(scope="module")
def fitted(arrays):
    X, y, *_ = arrays
    return ComposedImageRetriever(**SMALL).fit(X, y)


def test_params_round_trip():
    est = ComposedImageRetriever(**SMALL, tau=0.05)
    params = est.get_params()
    assert params["tau"] == 0.05 and params["n_local"] == 2
    twin = clone(est)
    assert twin.get_params() == params
    assert est.set_params(mu=0.0).mu == 0.0


def test_unfitted_raises(arrays):
    X, *_ = arrays
    with pytest.raises(NotFittedError):
        ComposedImageRetriever().transform(X)


def test_transform_is_unit_norm(fitted, arrays):
    _, _, Xt, _, _ = arrays
    Z = fitted.transform(Xt)
    assert Z.shape == (len(Xt), SMALL["dim"])
    np.testing.assert_allclose(np.linalg.norm(Z, axis=1), 1.0, atol=1e-5)


def test_fitted_attributes(fitted, arrays):
    X, y, *_ = arrays
    assert fitted.n_features_in_ == X.shape[1]
    assert fitted.image_dim_ == y.shape[1]
    assert fitted.n_iter_ == SMALL["epochs"] * (len(X) // SMALL["batch_size"])
    assert len(fitted.gallery_) == len(np.unique(y, axis=0))


def test_predict_returns_gallery_rows(fitted, arrays):
    _, _, Xt, _, G = arrays
    pred = fitted.predict(Xt, gallery=G)
    assert pred.shape == (len(Xt), G.shape[1])
    idx = fitted.kneighbors(Xt, gallery=G, n_neighbors=1)[:, 0]
    np.testing.assert_array_equal(pred, G[idx])


def test_kneighbors_ranks_by_score(fitted, arrays):
    _, _, Xt, _, G = arrays
    dist, idx = fitted.kneighbors(Xt, gallery=G, n_neighbors=5, return_distance=True)
    assert idx.shape == (len(Xt), 5)
    assert np.all(np.diff(dist, axis=1) >= 0)
    scores = fitted.transform(Xt) @ fitted.embed_images(G).T
    np.testing.assert_allclose(1.0 - dist[:, 0], scores.max(axis=1), atol=1e-6)


def test_score_matches_recall_at_1(fitted, arrays):
    _, _, Xt, yt, G = arrays
    idx = fitted.kneighbors(Xt, gallery=G, n_neighbors=1)[:, 0]
    expected = np.mean(np.all(G[idx] == yt, axis=1))
    assert fitted.score(Xt, yt, gallery=G) == pytest.approx(expected)
    assert 0.0 <= expected <= 1.0


def test_width_checks(fitted, arrays):
    _, _, Xt, _, G = arrays
    with pytest.raises(ValueError, match="features"):
        fitted.transform(Xt[:, :-1])
    with pytest.raises(ValueError, match="features"):
        fitted.embed_images(G[:, :-1])


def test_rejects_missing_text_columns(arrays):
    _, y, *_ = arrays
    with pytest.raises(ValueError, match="text column"):
        ComposedImageRetriever(**SMALL).fit(y, y)


def test_same_seed_same_model(arrays):
    X, y, Xt, *_ = arrays
    a = ComposedImageRetriever(**{**SMALL, "epochs": 1}).fit(X, y)
    b = ComposedImageRetriever(**{**SMALL, "epochs": 1}).fit(X, y)
    np.testing.assert_array_equal(a.transform(Xt), b.transform(Xt))
