"""scikit-learn style wrappers.

``GENetClassifier`` trains a backbone with GE units on uint8 image arrays;
``GatherExcite`` applies a parameter-free GE unit to float feature maps.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .config import parse_arch
from .data import Dataset, channel_stats
from .exceptions import ConfigurationError, DimensionError
from .ge import ExtentSpec, GEUnitConfig, ge_unit_forward
from .models import GEPlacement
from .tensor import Tensor, no_grad
from .training import TrainConfig, predict_logits, seeded_model, train


def check_images(X, dtype=np.uint8):
    """Validate an ``(N, 3, H, W)`` image batch."""
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=None)
    if X.ndim != 4:
        raise DimensionError(f"expected images of shape (N, C, H, W), got {X.shape}")
    if dtype is np.uint8 and X.dtype != np.uint8:
        if X.min() < 0 or X.max() > 255:
            raise ConfigurationError("images must be uint8 or lie in [0, 255]")
        X = np.rint(X).astype(np.uint8)
    return X


def check_feature_maps(X):
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=(np.float32, np.float64))
    if X.ndim != 4:
        raise DimensionError(f"expected feature maps (N, C, H, W), got {X.shape}")
    return X


class GENetClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier: a residual backbone with GE units trained by SGD.

    Parameters mirror the run config: ``arch`` is an architecture name
    (``resnet110``, ``wrn-16-8``, ...), ``ge`` a placement string
    (``theta-minus:global:all``) or ``"none"``.
    """

    def __init__(self, arch="resnet110", ge="theta-minus:global:all", width_divisor=1, epochs=2,
                 batch_size=128, lr=0.1, momentum=0.9, weight_decay=1e-4, schedule="fixed", seed=0):
        self.arch = arch
        self.ge = ge
        self.width_divisor = width_divisor
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.seed = seed

    def _arch(self, num_classes):
        arch = parse_arch(self.arch, num_classes, self.width_divisor)
        if arch.height != 32:
            raise ConfigurationError(f"{self.arch} is not a 32x32 architecture")
        return arch

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, ensure_2d=False, dtype=None)
        X = check_images(X)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ConfigurationError("need at least two classes")
        arch = self._arch(len(self.classes_))
        if X.shape[1:] != arch.input_shape:
            raise DimensionError(f"images {X.shape[1:]} do not match {arch.input_shape}")
        self.mean_, self.std_ = channel_stats(X)
        ds = Dataset(X, codes.astype(np.int64), "train", "cifar10", self.mean_, self.std_,
                     classes=len(self.classes_))
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, momentum=self.momentum,
                          weight_decay=self.weight_decay, seed=self.seed, schedule=self.schedule)
        self.model_ = seeded_model(arch, GEPlacement.parse(self.ge), self.seed)
        _, self.history_ = train(self.model_, ds, cfg)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X)
        ds = Dataset(X, np.zeros(len(X), np.int64), "test", classes=len(self.classes_))
        return predict_logits(self.model_, ds, mean=self.mean_, std=self.std_)

    def predict_proba(self, X):
        z = self.decision_function(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


class GatherExcite(TransformerMixin, BaseEstimator):
    """Parameter-free GE (pooling gather, sigmoid excite) as a transformer on ``(N, C, H, W)`` maps."""

    def __init__(self, extent="global", pool="avg"):
        self.extent = extent
        self.pool = pool

    def _config(self, shape):
        if isinstance(self.extent, ExtentSpec):
            ext = self.extent
        elif isinstance(self.extent, (int, np.integer)):
            ext = ExtentSpec.Ratio(int(self.extent))
        else:
            ext = ExtentSpec.parse(str(self.extent))
        return GEUnitConfig.theta_minus(ext, pool=self.pool, channels=shape[1], height=shape[2], width=shape[3])

    def fit(self, X, y=None):
        X = check_feature_maps(X)
        self._config(X.shape)
        self.n_channels_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_channels_")
        X = check_feature_maps(X)
        if X.shape[1] != self.n_channels_:
            raise DimensionError(f"fitted on {self.n_channels_} channels, got {X.shape[1]}")
        with no_grad():
            return ge_unit_forward(Tensor(X, dtype=X.dtype), self._config(X.shape)).data


__all__ = ["GENetClassifier", "GatherExcite", "check_images", "check_feature_maps"]
