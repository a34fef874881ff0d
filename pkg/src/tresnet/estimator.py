"""scikit-learn style wrappers around the inference engine.

There is no training loop: ``fit`` builds (or loads) a network and checks the
inputs, it does not learn from ``y``.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted
from threadpoolctl import threadpool_limits

from .bench import default_threads
from .errors import ValidationError
from .layers import fast_gap
from .model import INPUT_DIVISOR, VARIANTS, Model, build, forward, forward_features, get_config
from .tensor import softmax
from .weights import load_weights


def check_images(X, channels: int = 3) -> np.ndarray:
    """Validate an NCHW image batch and return it as contiguous float32."""
    try:
        X = np.asarray(X, dtype=np.float32)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"images must be numeric: {exc}") from exc
    if X.ndim != 4:
        raise ValidationError(f"expected an (N, {channels}, H, W) array, got shape {X.shape}")
    if X.shape[0] < 1:
        raise ValidationError("empty batch")
    if X.shape[1] != channels:
        raise ValidationError(f"expected {channels} channels on axis 1, got {X.shape[1]}")
    if X.shape[2] % INPUT_DIVISOR or X.shape[3] % INPUT_DIVISOR or min(X.shape[2:]) < INPUT_DIVISOR:
        raise ValidationError(f"height and width must be positive multiples of {INPUT_DIVISOR}, got {X.shape[2:]}")
    if not np.isfinite(X).all():
        raise ValidationError("images contain NaN or inf")
    return np.ascontiguousarray(X)


def check_labels(y, n_samples: int, num_classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n_samples,):
        raise ValidationError(f"y must have shape ({n_samples},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer) or y.min() < 0 or y.max() >= num_classes:
        raise ValidationError(f"labels must be integers in [0, {num_classes})")
    return y


class _EngineMixin:
    def _make_model(self) -> Model:
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        cfg = get_config(self.variant, self.num_classes)
        if self.weights is not None:
            return load_weights(cfg, self.weights)
        return build(cfg, self.init_seed)

    def _batched(self, X, fn):
        X = check_images(X)
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        with threadpool_limits(limits=self.threads or default_threads()):
            return np.concatenate([fn(X[i:i + self.batch_size]) for i in range(0, len(X), self.batch_size)])


class TResNetClassifier(_EngineMixin, ClassifierMixin, BaseEstimator):
    """Image classifier over (N, 3, H, W) arrays scaled to [0, 1]."""

    def __init__(self, variant: str = "m", weights: Optional[str] = None, num_classes: Optional[int] = None,
                 init_seed: int = 0, batch_size: int = 8, threads: Optional[int] = None):
        self.variant = variant
        self.weights = weights
        self.num_classes = num_classes
        self.init_seed = init_seed
        self.batch_size = batch_size
        self.threads = threads

    def fit(self, X, y=None):
        X = check_images(X)
        self.model_ = self._make_model()
        n = self.model_.config.num_classes
        if y is not None:
            check_labels(y, len(X), n)
        self.classes_ = np.arange(n)
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self._batched(X, lambda b: forward(self.model_, b))

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X), axis=1)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


class TResNetFeatures(_EngineMixin, TransformerMixin, BaseEstimator):
    """Pooled backbone features, shape (N, final width)."""

    def __init__(self, variant: str = "m", weights: Optional[str] = None, num_classes: Optional[int] = None,
                 init_seed: int = 0, batch_size: int = 8, threads: Optional[int] = None):
        self.variant = variant
        self.weights = weights
        self.num_classes = num_classes
        self.init_seed = init_seed
        self.batch_size = batch_size
        self.threads = threads

    def fit(self, X, y=None):
        check_images(X)
        self.model_ = self._make_model()
        self.n_features_out_ = self.model_.config.stages[-1].out_channels
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self._batched(X, lambda b: fast_gap(forward_features(self.model_, b), flatten=True))
