"""Scikit-learn adapter around the training loop.

ConvNetClassifier gives the toolkit a familiar fit/predict surface for
in-memory arrays. It is a thin veneer: heavy lifting stays in train()
and predict_probs(), and everything the estimator can do the CLI can do
on manifests. Input X may be (n, h, w) images or flattened (n, h*w)
rows, matching how sklearn utilities pass data around.
"""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data.imaging import AugmentationConfig
from .data.manifest import ClassLabel, ImageRecord
from .graph import predict_probs, reshape_input
from .training import TrainConfig, images_to_batch, train
from .zoo import resolve_architecture


class ConvNetClassifier(ClassifierMixin, BaseEstimator):
    """Three-class image classifier with the published training recipe.

    Parameters mirror TrainConfig; architecture accepts a bundled name,
    a config path, or a config dict. A validation_fraction of the
    training data is held out per class to select the best epoch.
    """

    def __init__(self, architecture="covidnet-ct-mini", epochs=17,
                 learning_rate=5e-3, momentum=0.9, batch_size=8,
                 validation_fraction=0.2, augment=False, seed=0):
        self.architecture = architecture
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.validation_fraction = validation_fraction
        self.augment = augment
        self.seed = seed

    def _as_images(self, X, graph):
        X = np.asarray(X, dtype=np.float32)
        h, w, _ = graph.input_shape
        if X.ndim == 2:
            if X.shape[1] != h * w:
                raise ValueError(
                    f"flattened input has {X.shape[1]} features; the "
                    f"architecture expects {h}x{w}={h * w}")
            return X.reshape(-1, h, w)
        if X.ndim == 3:
            return X
        raise ValueError(f"X must be (n, h, w) images or (n, h*w) rows, got "
                         f"shape {X.shape}")

    def _resolve(self, X):
        graph = resolve_architecture(self.architecture)
        X = np.asarray(X, dtype=np.float32)
        if X.ndim == 3 and X.shape[1:] != tuple(graph.input_shape[:2]):
            graph = reshape_input(graph, X.shape[1], X.shape[2])
        return graph

    def fit(self, X, y):
        """Train on images X with integer labels y (exactly classes 0..2)."""
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != len(X):
            raise ValueError("y must be one label per image")
        classes = np.unique(y)
        if not np.array_equal(classes, [0, 1, 2]):
            raise ValueError(
                f"this classifier is three-way; y must contain exactly the "
                f"classes 0, 1, 2, got {classes.tolist()}")
        if not 0 < self.validation_fraction < 1:
            raise ValueError(
                f"validation_fraction must be in (0, 1), got "
                f"{self.validation_fraction}")

        graph = self._resolve(X)
        if np.asarray(X).ndim == 2:
            self.n_features_in_ = np.asarray(X).shape[1]
        images = self._as_images(X, graph)

        rng = np.random.default_rng(self.seed)
        records = []
        store = {}
        for c in (0, 1, 2):
            idx = np.flatnonzero(y == c)
            idx = idx[rng.permutation(len(idx))]
            n_val = max(1, int(round(self.validation_fraction * len(idx))))
            if n_val >= len(idx):
                raise ValueError(
                    f"class {c} has too few samples ({len(idx)}) for a "
                    f"validation holdout")
            for pos, i in enumerate(idx):
                key = str(i)
                store[key] = images[i]
                records.append(ImageRecord(
                    filepath=key, patient_id=key, label=ClassLabel(c),
                    split="val" if pos < n_val else "train"))

        augmentation = AugmentationConfig() if self.augment \
            else AugmentationConfig.disabled()
        config = TrainConfig(learning_rate=self.learning_rate,
                             momentum=self.momentum, epochs=self.epochs,
                             batch_size=self.batch_size, seed=self.seed,
                             augmentation=augmentation)
        result = train(graph, records, config,
                       loader=lambda rec: store[rec.filepath])

        self.classes_ = classes
        self.graph_ = graph
        self.weights_ = result.weights
        self.train_result_ = result
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "weights_")
        images = self._as_images(X, self.graph_)
        x = images_to_batch(list(images), self.graph_.input_shape[2])
        return predict_probs(self.graph_, self.weights_, x)

    def predict(self, X):
        probs = self.predict_proba(X)
        return self.classes_[np.argmax(probs, axis=1)]
