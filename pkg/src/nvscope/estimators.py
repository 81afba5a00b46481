"""scikit-learn style wrappers around the spectrum analysis.

``X`` is the frequency axis in MHz (1-D or a single column) and ``y`` the
detector signal in mV, so the estimators slot into ordinary sklearn tooling
(``clone``, ``get_params``, grid searches over detection settings).
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .analysis import (
    AnalysisOptions,
    DoubleLorentzianModel,
    analyze_arrays,
    detect_dips_arrays,
    fit_arrays,
    initial_model,
)
from .controller import estimate_baseline
from .physics import NvParameters
from .validation import check_frequencies, check_sweep_arrays


class DoubleLorentzianRegressor(RegressorMixin, BaseEstimator):
    """Two-dip Lorentzian least-squares fit.

    Parameters
    ----------
    init : DoubleLorentzianModel, optional
        Starting point. When omitted, dips are detected on the data and
        seeded with ``init_width_mhz``.
    max_iter, ftol, xtol, damping
        Levenberg-Marquardt controls.
    """

    def __init__(
        self,
        init: DoubleLorentzianModel | None = None,
        init_width_mhz: float = 10.0,
        max_iter: int = 200,
        ftol: float = 1e-9,
        xtol: float = 1e-10,
        damping: float = 1e-3,
    ):
        self.init = init
        self.init_width_mhz = init_width_mhz
        self.max_iter = max_iter
        self.ftol = ftol
        self.xtol = xtol
        self.damping = damping

    def fit(self, X, y):
        f, s = check_sweep_arrays(X, y, min_points=9)
        init = self.init
        if init is None:
            plateau = estimate_baseline(s)
            candidates = detect_dips_arrays(f, s)
            init = initial_model(f, s, candidates, self.init_width_mhz, plateau=plateau)
        self.result_ = fit_arrays(
            f, s, init, max_iter=self.max_iter, ftol=self.ftol, xtol=self.xtol, damping=self.damping
        )
        self.model_ = self.result_.model
        self.n_iter_ = self.result_.iterations
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_(check_frequencies(X))


class BaselineAdjuster(TransformerMixin, BaseEstimator):
    """Row-wise plateau subtraction for spectra sampled on a common grid.

    Each row of ``X`` is one spectrum's signal; the median of its top
    ``margin_fraction`` values is subtracted (or the row is flipped to
    positive depths with ``positive_depth``).
    """

    def __init__(self, margin_fraction: float = 0.2, positive_depth: bool = False):
        self.margin_fraction = margin_fraction
        self.positive_depth = positive_depth

    def fit(self, X, y=None):
        X = check_array(X)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} points per spectrum, got {X.shape[1]}")
        if X.shape[1] < 10:
            raise ValueError("baseline adjustment needs at least 10 points")
        base = np.array([estimate_baseline(row, self.margin_fraction) for row in X])
        self.baselines_ = base
        out = X - base[:, None]
        return -out if self.positive_depth else out


class OdmrMagnetometer(RegressorMixin, BaseEstimator):
    """Axial field from one ODMR sweep.

    ``fit`` runs baseline, dip detection, the double-Lorentzian fit and the
    splitting inversion; ``field_`` then holds the estimate and ``predict``
    returns the fitted spectrum on the raw millivolt scale.
    """

    def __init__(
        self,
        d_mhz: float = 2870.0,
        e_mhz: float = 0.0,
        gamma_mhz_per_mt: float = 28.0,
        margin_fraction: float = 0.2,
        min_prominence_mv: float | None = None,
        min_separation_mhz: float = 20.0,
        init_width_mhz: float = 10.0,
        max_iter: int = 200,
    ):
        self.d_mhz = d_mhz
        self.e_mhz = e_mhz
        self.gamma_mhz_per_mt = gamma_mhz_per_mt
        self.margin_fraction = margin_fraction
        self.min_prominence_mv = min_prominence_mv
        self.min_separation_mhz = min_separation_mhz
        self.init_width_mhz = init_width_mhz
        self.max_iter = max_iter

    def fit(self, X, y):
        f, s = check_sweep_arrays(X, y, min_points=10)
        params = NvParameters(d_mhz=self.d_mhz, e_mhz=self.e_mhz, gamma_mhz_per_mt=self.gamma_mhz_per_mt)
        options = AnalysisOptions(
            margin_fraction=self.margin_fraction,
            min_prominence_mv=self.min_prominence_mv,
            min_separation_mhz=self.min_separation_mhz,
            init_width_mhz=self.init_width_mhz,
            max_iter=self.max_iter,
        )
        report = analyze_arrays(f, s, params, options)
        self.report_ = report
        self.field_ = report.field
        self.fit_result_ = report.fit
        self.baseline_mv_ = report.baseline_mv
        self.candidates_ = list(report.candidates)
        self.b_parallel_mt_ = report.field.b_parallel_mt
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_result_")
        return self.fit_result_.model(check_frequencies(X)) + self.baseline_mv_
