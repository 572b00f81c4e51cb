"""scikit-learn style wrapper around training and embedding."""
from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .config import RunConfig
from .evaluation import distance_matrix
from .training import embed, fit_arrays


class DpaReIdentifier(BaseEstimator, TransformerMixin):
    """Train a re-identification backbone on images and map images to embeddings.

    ``X`` is either N×3×H×W or flat N×(3·H·W) with square images. ``y`` holds
    arbitrary identity labels. ``transform`` returns eval-mode embeddings and
    ``predict`` returns the label of the nearest training embedding.
    """

    def __init__(self, epochs=10, P=4, K=4, optimizer="sgd", base_lr=1e-2, warmup_epochs=2,
                 attention="dpa", stage_channels=(16, 32, 64, 128), metric="euclidean", seed=7):
        self.epochs = epochs
        self.P = P
        self.K = K
        self.optimizer = optimizer
        self.base_lr = base_lr
        self.warmup_epochs = warmup_epochs
        self.attention = attention
        self.stage_channels = stage_channels
        self.metric = metric
        self.seed = seed

    def _images(self, X, fitting=False):
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.ndim == 2:
            side = int(round(np.sqrt(X.shape[1] / 3)))
            if 3 * side * side != X.shape[1]:
                raise ValueError(f"cannot reshape {X.shape[1]} features into a square 3-channel image")
            X = X.reshape(len(X), 3, side, side)
        if X.ndim != 4 or X.shape[1] != 3:
            raise ValueError(f"expected N×3×H×W images, got shape {X.shape}")
        if not fitting and tuple(X.shape[2:]) != self.input_size_:
            raise ValueError(f"fitted on {self.input_size_} images, got {tuple(X.shape[2:])}")
        return X

    def _config(self, input_size) -> RunConfig:
        cfg = RunConfig(optimizer=self.optimizer, base_lr=self.base_lr, epochs=self.epochs,
                        warmup_epochs=self.warmup_epochs, P=self.P, K=self.K, seed=self.seed,
                        metric=self.metric)
        cfg.backbone = replace(cfg.backbone, attention=self.attention,
                               stage_channels=tuple(self.stage_channels), input_size=input_size)
        return cfg

    def fit(self, X, y):
        arr = np.asarray(X, dtype=np.float64)
        _, y = check_X_y(arr.reshape(len(arr), -1), y, dtype=np.float64)
        X = self._images(arr, fitting=True)
        self.classes_, codes = np.unique(y, return_inverse=True)
        self.input_size_ = tuple(X.shape[2:])
        cfg = self._config(self.input_size_)
        self.model_, self.history_ = fit_arrays(cfg, X, codes, num_classes=len(self.classes_))
        self.train_embeddings_ = embed(self.model_, X)
        self.train_codes_ = codes
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return embed(self.model_, self._images(X))

    def predict(self, X):
        dist = distance_matrix(self.transform(X), self.train_embeddings_, self.metric)
        return self.classes_[self.train_codes_[np.argmin(dist.values, axis=1)]]
