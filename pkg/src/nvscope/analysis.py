"""Dip detection, double-Lorentzian least squares and field estimation."""
from __future__ import annotations

import json
import math
import dataclasses
from dataclasses import asdict, dataclass
from importlib import resources
from typing import Optional, Sequence

import numpy as np
from scipy.signal import find_peaks

from .controller import TooFewPoints, estimate_baseline
from .physics import NvParameters, ResonancePair, invert_splitting
from .spectrum import Spectrum
from .validation import check_sweep_arrays

PARAM_NAMES = ("b0", "a1", "a2", "c1", "c2", "w1", "w2")
N_PARAMS = len(PARAM_NAMES)
MIN_WIDTH_MHZ = 1e-3
REPORT_SCHEMA_VERSION = 1


class AnalysisError(Exception):
    """Failure of one pipeline stage; ``report`` holds whatever was computed."""

    def __init__(self, stage: str, cause: Exception, report: Optional["Report"] = None):
        super().__init__(f"{stage}: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
        self.report = report


class NoDipsFound(ValueError):
    pass


class SingularNormalEquations(np.linalg.LinAlgError):
    pass


class NotConverged(RuntimeError):
    def __init__(self, message: str, result: "FitResult"):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class DoubleLorentzianModel:
    """``b0 - sum a_i w_i^2 / ((f - c_i)^2 + w_i^2)``."""

    b0: float
    a1: float
    a2: float
    c1: float
    c2: float
    w1: float
    w2: float

    def check(self) -> None:
        if not all(math.isfinite(v) for v in self.to_array()):
            raise ValueError("model parameters must be finite")
        if self.w1 <= 0 or self.w2 <= 0:
            raise ValueError("widths must be positive")
        if self.a1 < 0 or self.a2 < 0:
            raise ValueError("amplitudes must be non-negative")

    def to_array(self) -> np.ndarray:
        return np.array([self.b0, self.a1, self.a2, self.c1, self.c2, self.w1, self.w2], dtype=float)

    @classmethod
    def from_array(cls, theta: Sequence[float]) -> "DoubleLorentzianModel":
        return cls(*(float(v) for v in theta))

    def canonical(self) -> "DoubleLorentzianModel":
        if self.c1 <= self.c2:
            return self
        return DoubleLorentzianModel(self.b0, self.a2, self.a1, self.c2, self.c1, self.w2, self.w1)

    def __call__(self, f_mhz) -> np.ndarray:
        return model_values(self.to_array(), np.asarray(f_mhz, dtype=float))

    def jacobian(self, f_mhz) -> np.ndarray:
        return model_jacobian(self.to_array(), np.asarray(f_mhz, dtype=float))


def model_values(theta: np.ndarray, f: np.ndarray) -> np.ndarray:
    b0, a1, a2, c1, c2, w1, w2 = theta
    return b0 - a1 * w1**2 / ((f - c1) ** 2 + w1**2) - a2 * w2**2 / ((f - c2) ** 2 + w2**2)


def model_jacobian(theta: np.ndarray, f: np.ndarray) -> np.ndarray:
    """d model / d theta, shape (n_points, 7), columns in ``PARAM_NAMES`` order."""
    _, a1, a2, c1, c2, w1, w2 = theta
    jac = np.empty((f.size, N_PARAMS))
    jac[:, 0] = 1.0
    for k, (a, c, w) in enumerate(((a1, c1, w1), (a2, c2, w2))):
        x = f - c
        den = x * x + w * w
        jac[:, 1 + k] = -(w * w) / den
        jac[:, 3 + k] = -a * w * w * 2.0 * x / den**2
        jac[:, 5 + k] = -a * 2.0 * w * x * x / den**2
    return jac


@dataclass(frozen=True)
class FitResult:
    model: DoubleLorentzianModel
    rss: float
    iterations: int
    converged: bool
    variances: tuple[float, ...]
    covariance: np.ndarray = dataclasses.field(repr=False, compare=False)
    gradient_norm: float = 0.0
    n_points: int = 0

    @property
    def sigmas(self) -> dict[str, float]:
        return {name: math.sqrt(max(v, 0.0)) for name, v in zip(PARAM_NAMES, self.variances)}


@dataclass(frozen=True)
class FieldEstimate:
    b_parallel_mt: float
    d_est_mhz: float
    splitting_mhz: float
    clamped: bool
    sigma_b_mt: float


RANK_TOL = 1e-8


def _project(theta: np.ndarray) -> np.ndarray:
    theta = theta.copy()
    theta[1:3] = np.maximum(theta[1:3], 0.0)
    theta[5:7] = np.maximum(np.abs(theta[5:7]), MIN_WIDTH_MHZ)
    return theta


def single_values(theta: np.ndarray, f: np.ndarray) -> np.ndarray:
    b0, a, c, w = theta
    return b0 - a * w**2 / ((f - c) ** 2 + w**2)


def single_jacobian(theta: np.ndarray, f: np.ndarray) -> np.ndarray:
    _, a, c, w = theta
    x = f - c
    den = x * x + w * w
    return np.column_stack(
        [np.ones_like(f), -(w * w) / den, -a * w * w * 2.0 * x / den**2, -a * 2.0 * w * x * x / den**2]
    )


def _project_single(theta: np.ndarray) -> np.ndarray:
    theta = theta.copy()
    theta[1] = max(theta[1], 0.0)
    theta[3] = max(abs(theta[3]), MIN_WIDTH_MHZ)
    return theta


def levenberg_marquardt(
    f: np.ndarray,
    y: np.ndarray,
    theta0: np.ndarray,
    max_iter: int = 200,
    ftol: float = 1e-9,
    xtol: float = 1e-10,
    damping: float = 1e-3,
    gtol: float = 1e-6,
    values=model_values,
    jacobian=model_jacobian,
    project=_project,
    names: Sequence[str] = PARAM_NAMES,
):
    """Damped Gauss-Newton minimisation of ``sum (y - values(theta, f))**2``.

    Marquardt scaling (damping times diag(J^T J)); damping drops tenfold on
    an accepted step and grows tenfold on a rejected one. ``project`` keeps
    amplitudes non-negative and widths positive after every step. A fit only
    counts as converged once the RSS gradient norm is below
    ``gtol * (1 + rss)``.

    Returns ``(theta, rss, iterations, converged, jac)``.
    """
    tiny = np.finfo(float).tiny
    theta = project(np.asarray(theta0, dtype=float))
    r = y - values(theta, f)
    rss = float(r @ r)
    lam = damping
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        jac = jacobian(theta, f)
        grad = jac.T @ r
        normal = jac.T @ jac
        diag = np.diag(normal).copy()
        if np.any(diag <= tiny) or not np.all(np.isfinite(normal)):
            dead = ", ".join(n for n, d in zip(names, diag) if not d > tiny)
            raise SingularNormalEquations(f"normal equations are singular: {dead} do not affect the model")
        if 2.0 * np.linalg.norm(grad) < gtol * (1.0 + rss):
            converged = True
            break
        accepted = False
        while lam < 1e16:
            try:
                step = np.linalg.solve(normal + lam * np.diag(diag), grad)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = project(theta + step)
            r_trial = y - values(trial, f)
            rss_trial = float(r_trial @ r_trial)
            if rss_trial <= rss:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            # no descent at any damping: stationary up to rounding
            converged = 2.0 * np.linalg.norm(grad) < gtol * (1.0 + rss)
            break
        moved = trial - theta
        decrease = (rss - rss_trial) / rss if rss > 0 else 0.0
        theta, r, rss = trial, r_trial, rss_trial
        lam = max(lam / 10.0, 1e-12)
        small_step = np.linalg.norm(moved) < xtol * (np.linalg.norm(theta) + xtol)
        if rss == 0.0 or decrease < ftol or small_step:
            grad_norm = 2.0 * np.linalg.norm(jacobian(theta, f).T @ r)
            if grad_norm < gtol * (1.0 + rss):
                converged = True
                break
    jac = jacobian(theta, f)
    norms = np.linalg.norm(jac, axis=0)
    if np.any(norms < RANK_TOL * norms.max()):
        # e.g. amplitudes driven to zero on featureless data
        dead = ", ".join(n for n, c in zip(names, norms) if c < RANK_TOL * norms.max())
        raise SingularNormalEquations(f"normal equations are singular at the optimum: {dead} do not affect the model")
    return theta, rss, iterations, converged, jac


def _covariance(jac: np.ndarray, rss: float) -> np.ndarray:
    dof = max(jac.shape[0] - N_PARAMS, 1)
    normal = jac.T @ jac
    try:
        inv = np.linalg.inv(normal)
        if not np.all(np.isfinite(inv)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        inv = np.linalg.pinv(normal)
    return inv * (rss / dof)


def fit_arrays(
    f_mhz,
    signal_mv,
    init: DoubleLorentzianModel,
    max_iter: int = 200,
    ftol: float = 1e-9,
    xtol: float = 1e-10,
    damping: float = 1e-3,
) -> FitResult:
    f, y = check_sweep_arrays(f_mhz, signal_mv, min_points=N_PARAMS + 2)
    init.check()
    theta, rss, iterations, converged, jac = levenberg_marquardt(
        f, y, init.to_array(), max_iter=max_iter, ftol=ftol, xtol=xtol, damping=damping
    )
    cov = _covariance(jac, rss)
    model = DoubleLorentzianModel.from_array(theta)
    if model.c1 > model.c2:
        order = [0, 2, 1, 4, 3, 6, 5]
        model = model.canonical()
        cov = cov[np.ix_(order, order)]
    grad_norm = float(2.0 * np.linalg.norm(model.jacobian(f).T @ (y - model(f))))
    result = FitResult(
        model=model,
        rss=rss,
        iterations=iterations,
        converged=converged,
        variances=tuple(float(v) for v in np.diag(cov)),
        covariance=cov,
        gradient_norm=grad_norm,
        n_points=f.size,
    )
    if not converged:
        raise NotConverged(f"no convergence after {iterations} iterations (rss={rss:.6g})", result)
    return result


def fit_merged_arrays(
    f_mhz,
    signal_mv,
    b0: float,
    depth: float,
    center: float,
    width: float,
    max_iter: int = 200,
) -> FitResult:
    """Fit both transitions as one coincident Lorentzian (zero splitting).

    The result is expressed as a :class:`DoubleLorentzianModel` with equal
    halves. The two centre variances are kept but decorrelated, so the
    splitting inherits an uncertainty of sqrt(2) times the centre's.
    """
    f, y = check_sweep_arrays(f_mhz, signal_mv, min_points=N_PARAMS + 2)
    theta, rss, iterations, converged, jac = levenberg_marquardt(
        f,
        y,
        np.array([b0, depth, center, width], dtype=float),
        max_iter=max_iter,
        values=single_values,
        jacobian=single_jacobian,
        project=_project_single,
        names=("b0", "a", "c", "w"),
    )
    dof = max(f.size - 4, 1)
    normal = jac.T @ jac
    cov4 = (np.linalg.pinv(normal) if np.linalg.cond(normal) > 1e14 else np.linalg.inv(normal)) * (rss / dof)
    lift = np.zeros((N_PARAMS, 4))
    lift[0, 0] = 1.0
    lift[1, 1] = lift[2, 1] = 0.5
    lift[3, 2] = lift[4, 2] = 1.0
    lift[5, 3] = lift[6, 3] = 1.0
    cov = lift @ cov4 @ lift.T
    cov[3, 4] = cov[4, 3] = 0.0
    b0, a, c, w = theta
    model = DoubleLorentzianModel(b0, a / 2, a / 2, c, c, w, w)
    result = FitResult(
        model=model,
        rss=rss,
        iterations=iterations,
        converged=converged,
        variances=tuple(float(v) for v in np.diag(cov)),
        covariance=cov,
        gradient_norm=float(2.0 * np.linalg.norm(jac.T @ (y - single_values(theta, f)))),
        n_points=f.size,
    )
    if not converged:
        raise NotConverged(f"no convergence after {iterations} iterations (rss={rss:.6g})", result)
    return result


def bic(rss: float, n_points: int, n_params: int) -> float:
    """Bayesian information criterion for Gaussian residuals."""
    return n_points * math.log(max(rss, 1e-300) / n_points) + n_params * math.log(n_points)


def fit_double_lorentzian(spec: Spectrum, init: DoubleLorentzianModel, **options) -> FitResult:
    """Least-squares fit of the raw (unsmoothed) spectrum points."""
    return fit_arrays(spec.frequencies, spec.signals, init, **options)


def estimate_field(fit: FitResult, params: NvParameters) -> FieldEstimate:
    if not fit.converged:
        raise ValueError("field estimation needs a converged fit")
    m = fit.model
    b, d_est, clamped = invert_splitting(params, ResonancePair(m.c1, m.c2))
    splitting = m.c2 - m.c1
    cov = fit.covariance
    var_split = max(cov[3, 3] + cov[4, 4] - 2.0 * cov[3, 4], 0.0)
    sigma_half = 0.5 * math.sqrt(var_split)
    half = 0.5 * splitting
    e, gamma = params.e_mhz, params.gamma_mhz_per_mt
    root = math.sqrt(max(half * half - e * e, 0.0))
    if clamped or root == 0.0:
        # derivative diverges at the clamp; report the upward excursion instead
        sigma_b = math.sqrt(max((half + sigma_half) ** 2 - e * e, 0.0)) / gamma
        if e == 0.0:
            sigma_b = sigma_half / gamma
    else:
        sigma_b = half / (gamma * root) * sigma_half
    return FieldEstimate(float(b), float(d_est), float(splitting), bool(clamped), float(sigma_b))


# -- dip detection ------------------------------------------------------------


def moving_average(values: np.ndarray, window: int = 5) -> np.ndarray:
    """Centred moving average; edges are padded with the end values."""
    half = window // 2
    padded = np.pad(values, half, mode="edge")
    return np.convolve(padded, np.ones(window) / window, mode="valid")


def noise_level(values: np.ndarray) -> float:
    """Robust per-point noise from the MAD of first differences."""
    diffs = np.diff(values)
    if diffs.size == 0:
        return 0.0
    mad = np.median(np.abs(diffs - np.median(diffs)))
    return float(mad / 0.6745 / math.sqrt(2.0))


def detect_dips_arrays(
    f_mhz,
    signal_mv,
    min_prominence_mv: Optional[float] = None,
    min_separation_mhz: float = 20.0,
    max_dips: int = 2,
    min_relative_prominence: float = 0.25,
) -> list[float]:
    f, y = check_sweep_arrays(f_mhz, signal_mv, min_points=10)
    smooth = moving_average(y, 5)
    if min_prominence_mv is None:
        min_prominence_mv = max(1.0, 5.0 * noise_level(y))
    idx, props = find_peaks(-smooth, prominence=min_prominence_mv)
    if idx.size == 0:
        raise NoDipsFound(f"no dip with prominence >= {min_prominence_mv:.3g} mV")
    order = np.argsort(-props["prominences"], kind="stable")
    strongest = props["prominences"][order[0]]
    chosen: list[int] = []
    for j in order:
        if len(chosen) == max_dips:
            break
        if props["prominences"][j] < min_relative_prominence * strongest:
            break
        if all(abs(f[idx[j]] - f[idx[k]]) >= min_separation_mhz for k in chosen):
            chosen.append(j)
    return sorted(float(f[idx[j]]) for j in chosen)


def detect_dips(
    spec: Spectrum,
    min_prominence_mv: Optional[float] = None,
    min_separation_mhz: float = 20.0,
) -> list[float]:
    """Up to two dip centres (MHz, ascending) from a smoothed copy of the spectrum."""
    return detect_dips_arrays(spec.frequencies, spec.signals, min_prominence_mv, min_separation_mhz)


def initial_model(
    f: np.ndarray,
    y: np.ndarray,
    candidates: Sequence[float],
    width_mhz: float = 10.0,
    plateau: Optional[float] = None,
) -> DoubleLorentzianModel:
    """Starting point for the fit from detected dip centres.

    A single candidate (merged dips) is split into two centres one
    ``width_mhz`` apart, each taking half the depth.
    """
    if plateau is None:
        plateau = estimate_baseline(y)
    smooth = moving_average(y, 5)

    def depth_at(c):
        return max(plateau - float(np.interp(c, f, smooth)), 1e-3)

    if len(candidates) >= 2:
        c1, c2 = candidates[0], candidates[1]
        a1, a2 = depth_at(c1), depth_at(c2)
    else:
        (c,) = candidates
        c1, c2 = c - width_mhz / 2, c + width_mhz / 2
        a1 = a2 = depth_at(c) / 2
    return DoubleLorentzianModel(plateau, a1, a2, c1, c2, width_mhz, width_mhz)


# -- pipeline -----------------------------------------------------------------


@dataclass(frozen=True)
class AnalysisOptions:
    margin_fraction: float = 0.2
    min_prominence_mv: Optional[float] = None
    min_separation_mhz: float = 20.0
    init_width_mhz: float = 10.0
    max_iter: int = 200


@dataclass
class Report:
    meta: dict
    fit: Optional[FitResult] = None
    field: Optional[FieldEstimate] = None
    frequencies: list = dataclasses.field(default_factory=list)
    residuals: list = dataclasses.field(default_factory=list)
    baseline_mv: Optional[float] = None
    candidates: list = dataclasses.field(default_factory=list)
    fit_model: str = "double"
    error: Optional[dict] = None

    def to_dict(self) -> dict:
        fit = {"params": None, "rss": None, "iterations": 0, "converged": False, "sigma": None}
        if self.fit is not None:
            fit = {
                "params": {k: float(v) for k, v in asdict(self.fit.model).items()},
                "rss": float(self.fit.rss),
                "iterations": int(self.fit.iterations),
                "converged": bool(self.fit.converged),
                "sigma": self.fit.sigmas,
                "model": self.fit_model,
            }
        fld = None
        if self.field is not None:
            fld = {
                "b_mt": self.field.b_parallel_mt,
                "d_mhz": self.field.d_est_mhz,
                "splitting_mhz": self.field.splitting_mhz,
                "clamped": self.field.clamped,
                "sigma_b_mt": self.field.sigma_b_mt,
            }
        out = {
            "schema_version": REPORT_SCHEMA_VERSION,
            "meta": self.meta,
            "baseline_mv": self.baseline_mv,
            "candidates_mhz": list(self.candidates),
            "fit": fit,
            "field": fld,
            "frequencies_mhz": [float(v) for v in self.frequencies],
            "residuals": [float(v) for v in self.residuals],
        }
        if self.error is not None:
            out["error"] = self.error
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def summary(self) -> str:
        if self.field is None:
            return "no field estimate"
        return (
            f"B∥ = {self.field.b_parallel_mt:.3f} mT ± {self.field.sigma_b_mt:.3f} "
            f"(splitting {self.field.splitting_mhz:.1f} MHz)"
        )


def report_schema() -> dict:
    text = resources.files("nvscope").joinpath("report.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def _meta_dict(spec: Spectrum) -> dict:
    plan = spec.meta.plan
    return {
        "source": spec.meta.source,
        "timestamp": spec.meta.timestamp,
        "device": spec.meta.device,
        "baseline_applied": spec.meta.baseline_applied,
        "n_points": len(spec),
        "plan": asdict(plan),
    }


def _fit_merged_case(f, y, init: DoubleLorentzianModel, options: AnalysisOptions):
    """One visible dip: keep the split model only if BIC prefers it."""
    center = 0.5 * (init.c1 + init.c2)
    merged = fit_merged_arrays(
        f, y, init.b0, init.a1 + init.a2, center, options.init_width_mhz, max_iter=options.max_iter
    )
    try:
        split = fit_arrays(f, y, init, max_iter=options.max_iter)
    except (NotConverged, np.linalg.LinAlgError):
        return merged, "merged"
    if bic(split.rss, f.size, N_PARAMS) < bic(merged.rss, f.size, 4):
        return split, "double"
    return merged, "merged"


def analyze(
    spec: Spectrum,
    params: Optional[NvParameters] = None,
    options: Optional[AnalysisOptions] = None,
) -> Report:
    """Baseline, detect, seed, fit and invert one spectrum.

    Raises :class:`AnalysisError` naming the failing stage; its ``report``
    carries the partial results.
    """
    report = Report(meta=_meta_dict(spec), frequencies=list(spec.frequencies))
    if not spec.meta.baseline_applied and len(spec) < 10:
        exc = TooFewPoints(f"baseline adjustment needs at least 10 points, got {len(spec)}")
        report.error = {"stage": "baseline", "type": type(exc).__name__, "message": str(exc)}
        raise AnalysisError("baseline", exc, report)
    return analyze_arrays(
        spec.frequencies,
        spec.signals,
        params,
        options,
        baseline_applied=spec.meta.baseline_applied,
        report=report,
    )


def analyze_arrays(
    f_mhz,
    signal_mv,
    params: Optional[NvParameters] = None,
    options: Optional[AnalysisOptions] = None,
    baseline_applied: bool = False,
    report: Optional[Report] = None,
) -> Report:
    params = params if params is not None else NvParameters()
    options = options if options is not None else AnalysisOptions()
    if report is None:
        report = Report(meta={}, frequencies=list(np.asarray(f_mhz, dtype=float)))

    def fail(stage, exc):
        report.error = {"stage": stage, "type": type(exc).__name__, "message": str(exc)}
        return AnalysisError(stage, exc, report)

    try:
        f, raw = check_sweep_arrays(f_mhz, signal_mv, min_points=10)
        if baseline_applied:
            report.baseline_mv = 0.0
            y = raw
        else:
            report.baseline_mv = estimate_baseline(raw, options.margin_fraction)
            y = raw - report.baseline_mv
    except ValueError as exc:
        raise fail("baseline", exc) from exc

    try:
        report.candidates = detect_dips_arrays(f, y, options.min_prominence_mv, options.min_separation_mhz)
    except ValueError as exc:
        raise fail("detect", exc) from exc

    init = initial_model(f, y, report.candidates, options.init_width_mhz, plateau=0.0)
    try:
        if len(report.candidates) == 1:
            report.fit, report.fit_model = _fit_merged_case(f, y, init, options)
        else:
            report.fit = fit_arrays(f, y, init, max_iter=options.max_iter)
    except NotConverged as exc:
        report.fit = exc.result
        report.residuals = list(y - exc.result.model(f))
        raise fail("fit", exc) from exc
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise fail("fit", exc) from exc
    report.residuals = list(y - report.fit.model(f))

    try:
        report.field = estimate_field(report.fit, params)
    except ValueError as exc:
        raise fail("estimate", exc) from exc
    return report
