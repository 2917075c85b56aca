"""Closed-form per-pixel baselines: persistence, linear trend, linear
trend plus an annual harmonic.

Regressions are fit once on the chronological training epochs and
extrapolated to held-out epochs; nothing downstream of the split is
touched during fitting.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.exceptions import NotFittedError

from .features import SplitSpec, harmonic_design
from .raster import DisplacementCube


def persistence_forecast(values: np.ndarray, target_epochs) -> np.ndarray:
    """Predict each target epoch as the previous epoch's map."""
    values = np.asarray(values, dtype=np.float64)
    idx = np.asarray(target_epochs, dtype=np.int64)
    if idx.size and (idx.min() < 1 or idx.max() >= values.shape[0]):
        raise ValueError(
            f"target epochs must lie in [1, {values.shape[0]}), got "
            f"[{idx.min()}, {idx.max()}]"
        )
    return values[idx - 1].copy()


def _fit_pixel_maps(values, epoch_days, train_count, degree, annual, min_train):
    T, H, W = values.shape
    if train_count < min_train:
        raise ValueError(
            f"need at least {min_train} training epochs, got {train_count}"
        )
    if not train_count < T:
        raise ValueError(
            f"training epochs must leave a held-out tail, got "
            f"train_count={train_count} for T={T}"
        )
    design = harmonic_design(epoch_days, degree=degree, annual=annual)
    X = design[:train_count]
    flat = values[:train_count].reshape(train_count, H * W)
    coef, _, rank, _ = np.linalg.lstsq(X, flat, rcond=None)
    if rank < X.shape[1]:
        raise ValueError(
            f"rank-deficient design ({rank} < {X.shape[1]}); "
            "training epochs span too little time"
        )
    return design, coef.reshape(X.shape[1], H, W)


def fit_predict_linear(values, epoch_days, train_count, target_epochs):
    """Per-pixel OLS of displacement on [1, t_yr], evaluated at the
    target epochs. Returns (predictions, coefficient maps)."""
    values = np.asarray(values, dtype=np.float64)
    design, coefs = _fit_pixel_maps(
        values, epoch_days, train_count, degree=1, annual=False, min_train=3
    )
    idx = np.asarray(target_epochs, dtype=np.int64)
    preds = np.tensordot(design[idx], coefs, axes=(1, 0))
    return preds, coefs


def fit_predict_seasonal(values, epoch_days, train_count, target_epochs):
    """Per-pixel OLS on [1, t_yr, sin(wt), cos(wt)] with the annual
    angular frequency; evaluated at the target epochs."""
    values = np.asarray(values, dtype=np.float64)
    design, coefs = _fit_pixel_maps(
        values, epoch_days, train_count, degree=1, annual=True, min_train=5
    )
    idx = np.asarray(target_epochs, dtype=np.int64)
    preds = np.tensordot(design[idx], coefs, axes=(1, 0))
    return preds, coefs


class _CubeBaseline(BaseEstimator, RegressorMixin):
    """Shared fit/predict plumbing over a DisplacementCube."""

    def __init__(self, train_fraction: float = 0.8):
        self.train_fraction = train_fraction

    def _check_fitted(self):
        if not hasattr(self, "target_epochs_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet")

    def fit(self, X: DisplacementCube, y=None):
        split = SplitSpec(self.train_fraction)
        self.train_count_ = split.train_epoch_count(X.values.shape[0])
        self.target_epochs_ = np.arange(self.train_count_, X.values.shape[0])
        self._fit_cube(X)
        return self

    def predict(self, X=None) -> np.ndarray:
        """Predictions in mm at the held-out epochs (or X, an array of
        epoch indices into the fitted cube's calendar)."""
        self._check_fitted()
        epochs = self.target_epochs_ if X is None else np.asarray(X, dtype=np.int64)
        return self._predict_epochs(epochs)


class PersistenceForecaster(_CubeBaseline):
    """Repeats the previous epoch's displacement map."""

    def _fit_cube(self, X):
        self.values_ = np.asarray(X.values, dtype=np.float64).copy()

    def _predict_epochs(self, epochs):
        return persistence_forecast(self.values_, epochs)


class LinearTrendForecaster(_CubeBaseline):
    """Per-pixel intercept + velocity extrapolation."""

    def _fit_cube(self, X):
        self.design_, self.coef_ = _fit_pixel_maps(
            np.asarray(X.values, dtype=np.float64),
            X.calendar.epoch_days,
            self.train_count_,
            degree=1,
            annual=False,
            min_train=3,
        )

    def _predict_epochs(self, epochs):
        return np.tensordot(self.design_[epochs], self.coef_, axes=(1, 0))


class SeasonalTrendForecaster(_CubeBaseline):
    """Per-pixel trend plus annual sine/cosine extrapolation."""

    def _fit_cube(self, X):
        self.design_, self.coef_ = _fit_pixel_maps(
            np.asarray(X.values, dtype=np.float64),
            X.calendar.epoch_days,
            self.train_count_,
            degree=1,
            annual=True,
            min_train=5,
        )

    def _predict_epochs(self, epochs):
        return np.tensordot(self.design_[epochs], self.coef_, axes=(1, 0))
