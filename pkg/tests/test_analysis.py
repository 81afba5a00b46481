import json
import re

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import curve_fit

from nvscope.analysis import (
    AnalysisError,
    DoubleLorentzianModel,
    FitResult,
    NoDipsFound,
    SingularNormalEquations,
    NotConverged,
    analyze,
    detect_dips,
    estimate_field,
    fit_arrays,
    fit_double_lorentzian,
    model_jacobian,
    model_values,
    report_schema,
)
from nvscope.controller import baseline_adjust, dumps_spectrum, loads_spectrum
from nvscope.physics import MagneticField, NvParameters, synthesize_spectrum
from nvscope.spectrum import Spectrum, SweepPlan

from conftest import simulate

TRUTH = DoubleLorentzianModel(0.0, 30.0, 30.0, 2660.0, 3080.0, 10.0, 10.0)
F = SweepPlan().frequencies_mhz()


def central_difference(theta, f, h=1e-6):
    jac = np.empty((f.size, theta.size))
    for k in range(theta.size):
        step = h * max(1.0, abs(theta[k]))
        up, dn = theta.copy(), theta.copy()
        up[k] += step
        dn[k] -= step
        jac[:, k] = (model_values(up, f) - model_values(dn, f)) / (2 * step)
    return jac


def test_jacobian_against_finite_difference(rng):
    for _ in range(20):
        theta = np.array([
            rng.uniform(-5, 5), rng.uniform(1, 50), rng.uniform(1, 50),
            rng.uniform(2620, 2860), rng.uniform(2880, 3120), rng.uniform(2, 30), rng.uniform(2, 30),
        ])
        num = central_difference(theta, F)
        ana = model_jacobian(theta, F)
        scale = np.maximum(np.abs(num), 1e-3)
        assert np.max(np.abs(ana - num) / scale) < 1e-5


def test_zero_residual_fixed_point():
    y = TRUTH(F)
    res = fit_arrays(F, y, TRUTH)
    assert res.converged
    assert abs(res.model.c1 - 2660) < 1e-6 and abs(res.model.c2 - 3080) < 1e-6
    assert res.rss < 1e-12


@pytest.mark.parametrize("d1, d2", [(15, -15), (-15, 15), (15, 15), (-15, -15)])
def test_perturbed_centres_recover(d1, d2):
    y = TRUTH(F)
    init = DoubleLorentzianModel(0.0, 25.0, 25.0, 2660 + d1, 3080 + d2, 10.0, 10.0)
    res = fit_arrays(F, y, init)
    assert abs(res.model.c1 - 2660) < 1e-4 and abs(res.model.c2 - 3080) < 1e-4


def test_canonical_swap():
    y = TRUTH(F)
    init = DoubleLorentzianModel(0.0, 25.0, 25.0, 3075.0, 2665.0, 10.0, 10.0)
    res = fit_arrays(F, y, init)
    assert res.model.c1 < res.model.c2
    assert res.model.c1 == pytest.approx(2660, abs=1e-4)


def test_constant_spectrum_singular():
    with pytest.raises(SingularNormalEquations):
        fit_arrays(F, np.zeros_like(F), TRUTH)


def test_not_converged_carries_result():
    rng = np.random.default_rng(0)
    y = TRUTH(F) + rng.normal(0, 1, F.size)
    with pytest.raises(NotConverged) as info:
        fit_arrays(F, y, DoubleLorentzianModel(0.0, 25.0, 25.0, 2650, 3090, 10.0, 10.0), max_iter=1)
    assert isinstance(info.value.result, FitResult)
    assert not info.value.result.converged


def test_agrees_with_scipy(rng):
    y = TRUTH(F) + rng.normal(0, 1.0, F.size)
    init = DoubleLorentzianModel(0.0, 25.0, 25.0, 2655.0, 3085.0, 12.0, 12.0)
    ours = fit_arrays(F, y, init)
    popt, pcov = curve_fit(
        lambda f, *t: model_values(np.array(t), f), F, y, p0=init.to_array(),
        jac=lambda f, *t: model_jacobian(np.array(t), f),
    )
    assert np.allclose(ours.model.to_array(), popt, rtol=1e-6, atol=1e-6)
    # curve_fit scales by N - 7 as well
    assert np.allclose(np.sqrt(ours.variances), np.sqrt(np.diag(pcov)), rtol=1e-3)


def test_too_few_points_rejected():
    with pytest.raises(ValueError):
        fit_arrays(F[:8], TRUTH(F[:8]), TRUTH)


def _fit_with_centres(c1, c2, cov=None):
    cov = np.eye(7) * 0.01 if cov is None else cov
    model = DoubleLorentzianModel(0.0, 30.0, 30.0, c1, c2, 10.0, 10.0)
    return FitResult(model, 1.0, 5, True, tuple(np.diag(cov)), cov, 0.0, 129)


@pytest.mark.parametrize("c1, c2, b", [(2842, 2898, 1.0), (2660, 3080, 7.5), (2870, 2870, 0.0)])
def test_estimate_field_examples(c1, c2, b):
    est = estimate_field(_fit_with_centres(c1, c2), NvParameters())
    assert est.b_parallel_mt == pytest.approx(b, abs=1e-9)
    assert np.isfinite(est.sigma_b_mt)


def test_delta_method_sigma():
    # independent centre errors of 1 MHz: sigma_split = sqrt(2), dB/dsplit = 1/(2 gamma) at E = 0
    cov = np.eye(7)
    est = estimate_field(_fit_with_centres(2660, 3080, cov), NvParameters())
    assert est.sigma_b_mt == pytest.approx(np.sqrt(2) / 56, rel=1e-9)


def test_estimate_requires_convergence():
    fit = _fit_with_centres(2660, 3080)
    fit = FitResult(fit.model, fit.rss, fit.iterations, False, fit.variances, fit.covariance)
    with pytest.raises(ValueError):
        estimate_field(fit, NvParameters())


def _noiseless(b):
    return synthesize_spectrum(NvParameters(), MagneticField.axial(b), SweepPlan())


def test_detect_two_dips():
    c = detect_dips(_noiseless(7.5))
    assert len(c) == 2
    assert abs(c[0] - 2660) <= 4 and abs(c[1] - 3080) <= 4


def test_detect_merged_dip():
    c = detect_dips(_noiseless(0.0))
    assert len(c) == 1 and abs(c[0] - 2870) <= 4


def test_detect_flat():
    plan = SweepPlan()
    with pytest.raises(NoDipsFound):
        detect_dips(Spectrum.from_arrays(plan, np.full(plan.n_points, 200.0)))


def test_end_to_end_field():
    report = analyze(simulate(7.5, seed=3))
    assert abs(report.field.b_parallel_mt - 7.5) < 0.2
    assert report.fit.converged
    assert report.fit_model == "double"


def test_end_to_end_zero_field():
    report = analyze(simulate(0.0, seed=3))
    assert report.field.clamped or report.field.b_parallel_mt < 0.2


def test_adjusted_input_accepted():
    spec = baseline_adjust(simulate(5.0, seed=1))
    report = analyze(spec)
    assert report.baseline_mv == 0.0
    assert abs(report.field.b_parallel_mt - 5.0) < 0.2


def test_report_deterministic_from_csv():
    text = dumps_spectrum(simulate(7.5, seed=8))
    a = analyze(loads_spectrum(text)).to_json()
    b = analyze(loads_spectrum(text)).to_json()
    assert a == b


def test_report_matches_schema():
    schema = report_schema()
    report = analyze(simulate(7.5, seed=1)).to_dict()
    jsonschema.validate(report, schema)
    assert set(report["fit"]["params"]) == {"b0", "a1", "a2", "c1", "c2", "w1", "w2"}
    assert len(report["residuals"]) == len(report["frequencies_mhz"]) == 129


def test_failure_report_stage_and_schema():
    plan = SweepPlan()
    with pytest.raises(AnalysisError) as info:
        analyze(Spectrum.from_arrays(plan, np.full(plan.n_points, 200.0)))
    assert info.value.stage == "detect"
    data = info.value.report.to_dict()
    jsonschema.validate(data, report_schema())
    assert data["fit"]["converged"] is False
    assert data["error"]["stage"] == "detect"


def test_summary_line():
    line = analyze(simulate(7.5, seed=1)).summary()
    assert re.fullmatch(r"B∥ = \d+\.\d{3} mT ± \d+\.\d{3} \(splitting \d+\.\d MHz\)", line)
    assert "splitting 420" in line


def test_consistency_as_noise_vanishes():
    errors = []
    for sigma in (2.0, 1.0, 0.5, 0.0):
        errs = [abs(analyze(simulate(7.5, seed=s, noise_mv=sigma)).field.b_parallel_mt - 7.5) for s in range(20)]
        errors.append(np.mean(errs))
    assert all(a >= b for a, b in zip(errors, errors[1:]))
    assert errors[-1] < 1e-3


# both dips at least two linewidths inside the 2614-3126 MHz sweep
@settings(max_examples=25, deadline=None)
@given(b=st.floats(1.0, 8.4), seed=st.integers(0, 2**16))
def test_field_recovery_property(b, seed):
    report = analyze(simulate(b, seed=seed))
    assert abs(report.field.b_parallel_mt - b) < 0.2
