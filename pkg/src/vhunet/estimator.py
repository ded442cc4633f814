"""Estimator-style front end: fit on (corrupted, clean) image pairs, then
transform new corrupted images into corrected ones."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import DataError
from .losses import LossConfig
from .model import VhuNet, VhuNetConfig
from .training import Sample, TrainConfig, train_model


def _check_images(X, name: str) -> np.ndarray:
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 3:
        raise DataError(f"{name} must be a [n_images, height, width] array, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr


class BiasFieldCorrector(TransformerMixin, BaseEstimator):
    """Removes smooth multiplicative intensity distortions from images.

    fit(X, y) trains the network on corrupted images X against clean targets
    y; transform(X) multiplies each image by its estimated scalar field and
    returns it on the original intensity scale. predict_field(X) exposes the
    fields themselves.

    Parameters mirror the training CLI: an architecture preset plus the
    optimizer and loss weights. Image extents must be powers of two.
    """

    def __init__(self, preset="desk", epochs=60, batch_size=5, lr=1e-3,
                 weight_decay=0.01, delta=1e-5, kl_weight=0.01,
                 smooth_weight=0.1, xi=0.1, seed=0):
        self.preset = preset
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.delta = delta
        self.kl_weight = kl_weight
        self.smooth_weight = smooth_weight
        self.xi = xi
        self.seed = seed

    def fit(self, X, y):
        X = _check_images(X, "X")
        y = _check_images(y, "y")
        if X.shape != y.shape:
            raise DataError(f"X shape {X.shape} does not match y shape {y.shape}")

        config = VhuNetConfig.preset(self.preset)
        config.height, config.width = int(X.shape[1]), int(X.shape[2])
        config.xi = float(self.xi)
        config.validate()
        self.model_ = VhuNet(config, seed=int(self.seed))

        # the validation metric correlates estimated fields with the true
        # ones, which pairs of images determine up to the additive noise
        samples = []
        for i in range(X.shape[0]):
            clean = y[i][None, :, :]
            corrupted = X[i][None, :, :]
            bias = np.where(np.abs(clean) > 1e-9, corrupted / np.where(clean == 0, 1.0, clean), 1.0)
            samples.append(Sample(name=f"sample{i:05d}", clean=clean,
                                  bias=bias, corrupted=corrupted))

        train_cfg = TrainConfig(epochs=int(self.epochs), batch_size=int(self.batch_size),
                                lr=float(self.lr), weight_decay=float(self.weight_decay),
                                seed=int(self.seed))
        loss_cfg = LossConfig(delta=float(self.delta), kl_weight=float(self.kl_weight),
                              smooth_weight=float(self.smooth_weight))
        self.train_result_ = train_model(self.model_, samples, train_cfg, loss_cfg)
        self.n_images_fit_ = X.shape[0]
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = _check_images(X, "X")
        out = np.empty_like(X)
        for i in range(X.shape[0]):
            corrected, _ = self.model_.correct(X[i][None, :, :])
            out[i] = corrected.data[0]
        return out

    def predict_field(self, X):
        check_is_fitted(self, "model_")
        X = _check_images(X, "X")
        out = np.empty_like(X)
        for i in range(X.shape[0]):
            _, field = self.model_.correct(X[i][None, :, :])
            out[i] = field.data[0]
        return out
