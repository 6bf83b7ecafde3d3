"""scikit-learn style wrapper around the effective-permittivity table."""
from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .effective import TableMode, build_effective_table


class EffectivePermittivityRegressor(RegressorMixin, BaseEstimator):
    """Map inclusion radius to the isotropic effective permittivity.

    ``fit`` solves the cell problems on ``n_radii`` equally spaced radii
    spanning the radii in ``X`` (one column); ``y`` is accepted for pipeline
    compatibility and ignored, since the map comes from the cell problems.
    ``predict`` interpolates the resulting table.
    """

    def __init__(self, eps_e=1.0, eps_i=math.inf, mode="LIMIT_CONSTRAINT", target_h=0.02, n_radii=9, n_jobs=None):
        self.eps_e = eps_e
        self.eps_i = eps_i
        self.mode = mode
        self.target_h = target_h
        self.n_radii = n_radii
        self.n_jobs = n_jobs

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_samples=2)
        if X.shape[1] != 1:
            raise ValueError(f"expected one feature (the radius), got {X.shape[1]}")
        lo, hi = float(X.min()), float(X.max())
        if not hi > lo:
            raise ValueError("training radii must span a non-empty interval")
        if self.n_radii < 5:
            raise ValueError("n_radii must be at least 5")
        executor = None
        if self.n_jobs and self.n_jobs > 1:
            from concurrent.futures import ThreadPoolExecutor

            executor = ThreadPoolExecutor(self.n_jobs)
        try:
            self.table_ = build_effective_table(
                np.linspace(lo, hi, self.n_radii),
                eps_e=self.eps_e,
                mode=TableMode(self.mode),
                eps_i=self.eps_i,
                target_h=self.target_h,
                executor=executor,
            )
        finally:
            if executor:
                executor.shutdown()
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "table_")
        X = check_array(X)
        if X.shape[1] != 1:
            raise ValueError(f"expected one feature (the radius), got {X.shape[1]}")
        return np.asarray(self.table_.eps_at(X[:, 0]), dtype=float)
