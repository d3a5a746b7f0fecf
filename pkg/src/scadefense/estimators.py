"""scikit-learn style wrapper around a defended target classifier."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted

from .attacks import ThreatModel, leak
from .defenses import ArchitectureConfig, DefenseSpec, build
from .nn import Model, TrainConfig, fit
from .tensor import make_rng


def _as_images(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        side = int(round(np.sqrt(X.shape[1])))
        if side * side != X.shape[1]:
            raise ValueError(f"flat inputs need a square pixel count, got {X.shape[1]}")
        X = X.reshape(len(X), 1, side, side)
    elif X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (N, C, H, W), got {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("inputs contain NaN or inf")
    return X


class TargetClassifier(BaseEstimator, ClassifierMixin):
    """A defended image classifier.

    ``defense`` is a defense id such as ``"none"``, ``"laplace_noise(0.5)"`` or
    ``"sca(0.5)"``. Noise defenses perturb the tapped activation on every
    prediction, drawing from a stream seeded by ``random_state``.

    Examples
    --------
    >>> clf = TargetClassifier("none", n_linear=1, epochs=5)  # doctest: +SKIP
    >>> clf.fit(images, labels).score(images, labels)  # doctest: +SKIP
    """

    def __init__(self, defense="none", threat_model="end_to_end", hidden_width=256, n_linear=None, n_atoms=8,
                 kernel_size=5, tau=1000.0, lca_iterations=500, lca_step=1.0, epochs=10, batch_size=32,
                 learning_rate=0.01, dict_epochs=1, lca_backprop=False, random_state=0):
        self.defense = defense
        self.threat_model = threat_model
        self.hidden_width = hidden_width
        self.n_linear = n_linear
        self.n_atoms = n_atoms
        self.kernel_size = kernel_size
        self.tau = tau
        self.lca_iterations = lca_iterations
        self.lca_step = lca_step
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.dict_epochs = dict_epochs
        self.lca_backprop = lca_backprop
        self.random_state = random_state

    def fit(self, X, y):
        X = _as_images(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} images but {len(y)} labels")
        self.classes_ = unique_labels(y)
        labels = np.searchsorted(self.classes_, y)
        arch = ArchitectureConfig(self.hidden_width, self.n_linear, self.n_atoms, self.kernel_size, 1, self.tau,
                                  self.lca_iterations, self.lca_step, self.random_state)
        train = TrainConfig(self.epochs, self.batch_size, self.learning_rate, self.lca_backprop, None, self.dict_epochs)
        spec, train, self.transform_ = build(DefenseSpec.parse(self.defense, self.threat_model),
                                             (X.shape[1:], len(self.classes_)), arch, train)
        self.model_ = fit(Model(spec), (X, labels), train, make_rng(self.random_state, 1))
        self.threat_ = ThreatModel.for_spec(self.threat_model, spec)
        return self

    def _hooks(self):
        return {self.threat_.tap_label: self.transform_.hook(make_rng(self.random_state, 4))}

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict_output(_as_images(X), self._hooks())

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def leak(self, X):
        """Activations an attacker observes at the threat-model tap."""
        check_is_fitted(self, "model_")
        return leak(self.model_, _as_images(X), self.threat_.tap_label, self.transform_, make_rng(self.random_state, 5))
