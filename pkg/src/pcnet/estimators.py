"""Scikit-learn style estimators wrapping the engine.

``ConvNetClassifier`` is the plain feedforward baseline;
``PredictiveCodingClassifier`` adds the generative feedback stage and
iterative inference, and doubles as a transformer whose ``transform``
returns the input reconstruction after the recurrence (a learned denoiser).
Both follow sklearn conventions: constructor arguments are stored verbatim,
fitted state lives in trailing-underscore attributes, and ``get_params`` /
``set_params`` come from ``BaseEstimator``.
"""

from __future__ import annotations

import os

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import ops
from .builder import NetworkSpec, build_network, parse_config
from .data import Dataset
from .dynamics import run_dynamics
from .train import TrainOpts, train_backbone, train_feedback
from .validation import check_images, check_labels


def _resolve_spec(config) -> NetworkSpec:
    if isinstance(config, NetworkSpec):
        return config
    if isinstance(config, str) and ("\n" in config or "=" in config):
        return parse_config(config)
    if isinstance(config, (str, os.PathLike)):
        with open(config, "r", encoding="utf-8") as f:
            return parse_config(f.read())
    raise TypeError(f"config must be a NetworkSpec, TOML text, or path, got {type(config)}")


class ConvNetClassifier(ClassifierMixin, BaseEstimator):
    """Feedforward convolutional classifier trained with SGD + momentum.

    Parameters mirror the training options; ``config`` is a NetworkSpec,
    TOML text, or a path to a TOML file.
    """

    def __init__(self, config, *, epochs=10, batch_size=64, learning_rate=0.05,
                 momentum=0.9, seed=0, shuffle=True):
        self.config = config
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.seed = seed
        self.shuffle = shuffle

    def _opts(self) -> TrainOpts:
        return TrainOpts(
            epochs=self.epochs, batch_size=self.batch_size,
            learning_rate=self.learning_rate, momentum=self.momentum,
            seed=self.seed, shuffle=self.shuffle,
        )

    def fit(self, X, y):
        spec = _resolve_spec(self.config)
        X = check_images(X, spec.backbone.input_size)
        y = check_labels(y, len(X), spec.backbone.class_count)
        dataset = Dataset(X, y, spec.backbone.class_count)
        weights, log = train_backbone(spec, dataset, self._opts())
        self.spec_ = spec
        self.weights_ = weights
        self.network_ = build_network(spec, weights)
        self.history_ = log
        self.classes_ = np.arange(spec.backbone.class_count)
        self.n_features_in_ = int(np.prod(spec.backbone.input_size))
        return self

    def _check_fitted(self):
        if not hasattr(self, "network_"):
            raise NotFittedError("fit this estimator before calling predict/transform")

    def decision_function(self, X):
        self._check_fitted()
        X = check_images(X, self.spec_.backbone.input_size)
        return self.network_.forward_backbone(X)

    def predict_proba(self, X):
        return ops.softmax(self.decision_function(X))

    def predict(self, X):
        return self.decision_function(X).argmax(axis=1)


class PredictiveCodingClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Classifier with generative feedback and iterative error correction.

    ``fit`` trains the feedforward backbone (unless pre-trained weights are
    supplied), freezes it, and trains the feedback decoders on the one-step
    reconstruction objective over the same clean images.  Prediction runs
    the recurrence for ``timesteps`` updates and reads the head at the final
    step; ``transform`` returns the input reconstruction instead, which acts
    as a learned denoiser.
    """

    def __init__(self, config, *, timesteps=8, epochs=10, feedback_epochs=5,
                 batch_size=64, learning_rate=0.05, feedback_learning_rate=1e-4,
                 momentum=0.9, seed=0, shuffle=True, backbone_weights=None):
        self.config = config
        self.timesteps = timesteps
        self.epochs = epochs
        self.feedback_epochs = feedback_epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.feedback_learning_rate = feedback_learning_rate
        self.momentum = momentum
        self.seed = seed
        self.shuffle = shuffle
        self.backbone_weights = backbone_weights

    def fit(self, X, y):
        spec = _resolve_spec(self.config)
        X = check_images(X, spec.backbone.input_size)
        y = check_labels(y, len(X), spec.backbone.class_count)
        dataset = Dataset(X, y, spec.backbone.class_count)
        if self.backbone_weights is not None:
            weights = dict(self.backbone_weights)
            self.backbone_history_ = []
        else:
            weights, self.backbone_history_ = train_backbone(
                spec, dataset,
                TrainOpts(epochs=self.epochs, batch_size=self.batch_size,
                          learning_rate=self.learning_rate, momentum=self.momentum,
                          seed=self.seed, shuffle=self.shuffle),
            )
        network = build_network(spec, weights)
        _, self.feedback_history_ = train_feedback(
            network, dataset,
            TrainOpts(epochs=self.feedback_epochs, batch_size=self.batch_size,
                      learning_rate=self.feedback_learning_rate, momentum=self.momentum,
                      seed=self.seed + 1, shuffle=self.shuffle),
        )
        self.spec_ = spec
        self.network_ = network
        self.classes_ = np.arange(spec.backbone.class_count)
        self.n_features_in_ = int(np.prod(spec.backbone.input_size))
        return self

    def _check_fitted(self):
        if not hasattr(self, "network_"):
            raise NotFittedError("fit this estimator before calling predict/transform")

    def predict_timesteps(self, X):
        """Logits at every timestep, shaped (T+1, N, classes)."""
        self._check_fitted()
        X = check_images(X, self.spec_.backbone.input_size)
        outs = run_dynamics(self.network_, X, self.timesteps)
        return np.stack([o.logits for o in outs])

    def decision_function(self, X):
        return self.predict_timesteps(X)[-1]

    def predict_proba(self, X):
        return ops.softmax(self.decision_function(X))

    def predict(self, X):
        return self.decision_function(X).argmax(axis=1)

    def transform(self, X):
        """Input reconstructions after the recurrence (same shape as X)."""
        self._check_fitted()
        X = check_images(X, self.spec_.backbone.input_size)
        outs = run_dynamics(self.network_, X, self.timesteps)
        return outs[-1].d0

    def reconstruction_errors(self, X):
        """Per-timestep, per-layer mean reconstruction errors, (T+1, depth)."""
        self._check_fitted()
        X = check_images(X, self.spec_.backbone.input_size)
        outs = run_dynamics(self.network_, X, self.timesteps)
        return np.stack([o.eps.mean(axis=1) for o in outs])
