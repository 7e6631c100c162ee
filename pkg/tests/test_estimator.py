"""Scikit-learn adapter behavior and API compliance."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cnct.estimator import ConvNetClassifier

TINY = {
    "input_shape": [8, 8, 1],
    "nodes": [
        {"name": "stem", "op": "conv",
         "attrs": {"out_channels": 4, "kernel": 3, "stride": 2}},
        {"name": "act", "op": "relu"},
        {"name": "head", "op": "softmax_head"},
    ],
    "output": "head",
}


def brightness_data(n_per_class=20, resolution=8, seed=0, noise=0.05):
    rng = np.random.default_rng(seed)
    X, y = [], []
    for c in range(3):
        for _ in range(n_per_class):
            img = 0.2 + 0.3 * c + rng.uniform(-noise, noise,
                                              size=(resolution, resolution))
            X.append(np.clip(img, 0, 1).astype(np.float32))
            y.append(c)
    return np.stack(X), np.array(y)


def small_estimator(**kwargs):
    base = dict(architecture=TINY, epochs=5, learning_rate=0.05,
                batch_size=6, seed=0)
    base.update(kwargs)
    return ConvNetClassifier(**base)


class TestSklearnCompliance:
    def test_get_params_lists_every_constructor_argument(self):
        params = ConvNetClassifier().get_params()
        for name in ("architecture", "epochs", "learning_rate", "momentum",
                     "batch_size", "validation_fraction", "augment", "seed"):
            assert name in params

    def test_clone_preserves_params(self):
        est = small_estimator(epochs=3, learning_rate=0.01)
        cloned = clone(est)
        assert cloned.get_params() == est.get_params()

    def test_set_params_roundtrip(self):
        est = ConvNetClassifier()
        est.set_params(epochs=2, seed=7)
        assert est.epochs == 2
        assert est.seed == 7

    def test_predict_before_fit_raises(self):
        X, _ = brightness_data(2)
        with pytest.raises(NotFittedError):
            small_estimator().predict(X)


class TestFitPredict:
    def test_learns_brightness_classes(self):
        X, y = brightness_data()
        est = small_estimator().fit(X, y)
        assert est.score(X, y) >= 0.9

    def test_predict_proba_rows_sum_to_one(self):
        X, y = brightness_data(8)
        est = small_estimator(epochs=2).fit(X, y)
        probs = est.predict_proba(X[:5])
        assert probs.shape == (5, 3)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-5)

    def test_flattened_rows_accepted(self):
        X, y = brightness_data(8)
        flat = X.reshape(len(X), -1)
        est = small_estimator(epochs=2).fit(flat, y)
        assert est.n_features_in_ == 64
        preds = est.predict(flat[:6])
        assert preds.shape == (6,)

    def test_other_resolution_adapts_the_network(self):
        rng = np.random.default_rng(3)
        X, y = [], []
        for c in range(3):
            for _ in range(8):
                img = 0.2 + 0.3 * c + rng.uniform(-0.05, 0.05, size=(10, 10))
                X.append(np.clip(img, 0, 1).astype(np.float32))
                y.append(c)
        est = small_estimator(epochs=2).fit(np.stack(X), np.array(y))
        assert est.graph_.input_shape[:2] == (10, 10)

    def test_same_seed_is_bitwise_reproducible(self):
        X, y = brightness_data(8)
        a = small_estimator(epochs=2).fit(X, y).predict_proba(X)
        b = small_estimator(epochs=2).fit(X, y).predict_proba(X)
        assert a.tobytes() == b.tobytes()

    def test_predictions_are_class_labels(self):
        X, y = brightness_data()
        est = small_estimator().fit(X, y)
        assert set(np.unique(est.predict(X))) <= {0, 1, 2}


class TestFitValidation:
    def test_requires_all_three_classes(self):
        X, y = brightness_data(8)
        keep = y != 2
        with pytest.raises(ValueError, match="three-way"):
            small_estimator().fit(X[keep], y[keep])

    def test_rejects_extra_classes(self):
        X, y = brightness_data(8)
        y = y.copy()
        y[0] = 3
        with pytest.raises(ValueError):
            small_estimator().fit(X, y)

    def test_rejects_mismatched_lengths(self):
        X, y = brightness_data(8)
        with pytest.raises(ValueError):
            small_estimator().fit(X, y[:-1])

    def test_rejects_bad_validation_fraction(self):
        X, y = brightness_data(8)
        with pytest.raises(ValueError):
            small_estimator(validation_fraction=1.5).fit(X, y)

    def test_rejects_tiny_classes(self):
        X, y = brightness_data(1)
        with pytest.raises(ValueError, match="too few"):
            small_estimator().fit(X, y)
