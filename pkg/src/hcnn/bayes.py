"""Two-class Gaussian model of pixel intensity with a shared variance.

With equal class variances the crack posterior is a logistic function of a
feature that is *linear* in the intensity::

    P(crack | x) = sigmoid(w * x + w0)
    w  = (mu1 - mu0) / sigma2
    w0 = (mu0**2 - mu1**2) / (2 * sigma2) + ln(prior1 / prior0)

This module fits that model, exposes the weights, and offers it as a
pixel-wise baseline detector.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DegenerateFitError, FitError


@dataclass(frozen=True)
class GaussianCrackModel:
    mu0: float
    mu1: float
    sigma2: float
    prior0: float
    prior1: float

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError(f"sigma2 must be positive, got {self.sigma2}")
        if not (0 < self.prior0 < 1 and 0 < self.prior1 < 1):
            raise ValueError("priors must lie in (0, 1)")
        if abs(self.prior0 + self.prior1 - 1.0) > 1e-12:
            raise ValueError(f"priors sum to {self.prior0 + self.prior1}, not 1")

    def to_text(self) -> str:
        """Plain-text record ``mu0 mu1 sigma2 prior0 prior1``."""
        return " ".join(repr(float(v)) for v in
                        (self.mu0, self.mu1, self.sigma2, self.prior0, self.prior1)) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "GaussianCrackModel":
        fields = text.split()
        if len(fields) != 5:
            raise ValueError(f"expected 5 fields, got {len(fields)}")
        mu0, mu1, sigma2, prior0, prior1 = (float(f) for f in fields)
        return cls(mu0, mu1, sigma2, prior0, prior1)


def fit(intensities, mask) -> GaussianCrackModel:
    """Maximum-likelihood fit: class means, pooled variance (denominator N), class fractions."""
    x = np.asarray(intensities, dtype=np.float64).ravel()
    y = np.asarray(mask).ravel()
    if x.shape != y.shape:
        raise FitError(f"{x.size} intensities but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise FitError("labels must be binary")
    crack = x[y == 1]
    background = x[y == 0]
    if crack.size == 0 or background.size == 0:
        raise FitError("both classes need at least one pixel")
    mu1 = float(crack.mean())
    mu0 = float(background.mean())
    sigma2 = float((((crack - mu1) ** 2).sum() + ((background - mu0) ** 2).sum()) / x.size)
    prior1 = crack.size / x.size
    if sigma2 <= 0:
        raise DegenerateFitError("pooled variance is zero")
    return GaussianCrackModel(mu0, mu1, sigma2, 1.0 - prior1, prior1)


def linear_weights(model: GaussianCrackModel) -> tuple[float, float]:
    w = (model.mu1 - model.mu0) / model.sigma2
    w0 = (model.mu0 ** 2 - model.mu1 ** 2) / (2 * model.sigma2) + math.log(model.prior1 / model.prior0)
    return w, w0


def log_odds(x, model: GaussianCrackModel):
    """``ln[P(x|crack) P(crack) / (P(x|background) P(background))]`` in closed form."""
    w, w0 = linear_weights(model)
    return w * np.asarray(x, dtype=np.float64) + w0


def posterior(x, model: GaussianCrackModel):
    """``P(crack | x)``."""
    return expit(log_odds(x, model))


def detect(image, model: GaussianCrackModel, threshold: float = 0.5) -> np.ndarray:
    """Pixel-wise baseline mask ``posterior(x) > threshold``."""
    return (posterior(image, model) > threshold).astype(np.uint8)


class GaussianCrackClassifier(ClassifierMixin, BaseEstimator):
    """Estimator wrapper: ``X`` is a column of intensities, ``y`` binary labels."""

    def __init__(self, threshold=0.5):
        self.threshold = threshold

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            if X.shape[1] != 1:
                raise ValueError(f"expected a single intensity feature, got {X.shape[1]}")
            X = X[:, 0]
        self.model_ = fit(X, y)
        self.coef_, self.intercept_ = linear_weights(self.model_)
        self.classes_ = np.array([0, 1])
        return self

    def _column(self, X):
        check_is_fitted(self, "model_")
        X = np.asarray(X, dtype=np.float64)
        return X[:, 0] if X.ndim == 2 else X

    def decision_function(self, X):
        return log_odds(self._column(X), self.model_)

    def predict_proba(self, X):
        p1 = posterior(self._column(X), self.model_)
        return np.stack([1.0 - p1, p1], axis=1)

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] > self.threshold).astype(int)
