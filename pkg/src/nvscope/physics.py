"""NV ground-state spin model.

Frequencies are in MHz and fields in mT throughout; the gyromagnetic ratio
is carried as MHz/mT (28.0 MHz/mT is 28 GHz/T).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .spectrum import Spectrum, SweepPlan

MAX_FIELD_MT = 100.0


@dataclass(frozen=True)
class NvParameters:
    d_mhz: float = 2870.0
    e_mhz: float = 0.0
    gamma_mhz_per_mt: float = 28.0
    linewidth_mhz: float = 10.0
    contrast: float = 0.15
    baseline_mv: float = 200.0

    def __post_init__(self):
        checks = [
            (self.d_mhz > 0, "d_mhz must be positive"),
            (self.e_mhz >= 0, "e_mhz must be non-negative"),
            (self.gamma_mhz_per_mt > 0, "gamma_mhz_per_mt must be positive"),
            (self.linewidth_mhz > 0, "linewidth_mhz must be positive"),
            (0 < self.contrast < 1, "contrast must lie in (0, 1)"),
            (self.baseline_mv > 0, "baseline_mv must be positive"),
        ]
        for ok, message in checks:
            if not ok:
                raise ValueError(message)


@dataclass(frozen=True)
class MagneticField:
    """Field in the NV frame; z is the NV symmetry axis."""

    bx_mt: float = 0.0
    by_mt: float = 0.0
    bz_mt: float = 0.0

    def __post_init__(self):
        comps = (self.bx_mt, self.by_mt, self.bz_mt)
        if not all(math.isfinite(c) for c in comps):
            raise ValueError("field components must be finite")
        if math.hypot(*comps) >= MAX_FIELD_MT:
            raise ValueError(f"|B| must stay below {MAX_FIELD_MT} mT")

    @classmethod
    def axial(cls, b_mt: float) -> "MagneticField":
        return cls(0.0, 0.0, b_mt)

    @property
    def b_parallel(self) -> float:
        return self.bz_mt

    def as_array(self) -> np.ndarray:
        return np.array([self.bx_mt, self.by_mt, self.bz_mt])


class SpinOperators(NamedTuple):
    sx: np.ndarray
    sy: np.ndarray
    sz: np.ndarray


class ResonancePair(NamedTuple):
    nu_minus_mhz: float
    nu_plus_mhz: float

    @property
    def splitting_mhz(self) -> float:
        return self.nu_plus_mhz - self.nu_minus_mhz


class SplittingInversion(NamedTuple):
    b_parallel_mt: float
    d_est_mhz: float
    clamped: bool


def spin_operators() -> SpinOperators:
    """Spin-1 matrices in the (|+1>, |0>, |-1>) basis."""
    s = 1 / math.sqrt(2)
    sx = s * np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=complex)
    sy = s * np.array([[0, -1j, 0], [1j, 0, -1j], [0, 1j, 0]], dtype=complex)
    sz = np.diag([1.0, 0.0, -1.0]).astype(complex)
    return SpinOperators(sx, sy, sz)


def resonance_pair(params: NvParameters, b_parallel_mt: float) -> ResonancePair:
    """Closed-form transition pair D -/+ sqrt(E^2 + (gamma B)^2), axial fields only."""
    if not math.isfinite(b_parallel_mt):
        raise ValueError("b_parallel_mt must be finite")
    half = math.hypot(params.e_mhz, params.gamma_mhz_per_mt * abs(b_parallel_mt))
    return ResonancePair(params.d_mhz - half, params.d_mhz + half)


def hamiltonian(params: NvParameters, field: MagneticField) -> np.ndarray:
    sx, sy, sz = spin_operators()
    b = params.gamma_mhz_per_mt * field.as_array()
    return (
        params.d_mhz * sz @ sz
        + params.e_mhz * (sy @ sy - sx @ sx)
        + b[0] * sx
        + b[1] * sy
        + b[2] * sz
    )


def hamiltonian_resonances(params: NvParameters, field: MagneticField) -> ResonancePair:
    """Transition frequencies from a full diagonalisation of the spin Hamiltonian.

    Eigenvalues are sorted ascending and both transitions are measured from
    the lowest level, so an exact degeneracy yields ``nu_minus == nu_plus``.
    Transverse components are honoured here, unlike :func:`resonance_pair`.
    """
    h = hamiltonian(params, field)
    if not np.all(np.isfinite(h)):
        raise ValueError("invalid field: non-finite Hamiltonian")
    levels = np.sort(np.linalg.eigvalsh(h))
    return ResonancePair(float(levels[1] - levels[0]), float(levels[2] - levels[0]))


def invert_splitting(params: NvParameters, pair: ResonancePair) -> SplittingInversion:
    d_est = 0.5 * (pair.nu_plus_mhz + pair.nu_minus_mhz)
    half = 0.5 * (pair.nu_plus_mhz - pair.nu_minus_mhz)
    clamped = half < params.e_mhz
    b = math.sqrt(max(0.0, half * half - params.e_mhz**2)) / params.gamma_mhz_per_mt
    return SplittingInversion(b, d_est, clamped)


def lorentzian(f, center, hwhm):
    """Unit-height Lorentzian with half-width ``hwhm``."""
    return hwhm**2 / ((np.asarray(f) - center) ** 2 + hwhm**2)


def odmr_signal(params: NvParameters, field: MagneticField, f_mhz) -> np.ndarray:
    """Noise-free fluorescence level (mV) at the given microwave frequencies."""
    nu_minus, nu_plus = hamiltonian_resonances(params, field)
    w = params.linewidth_mhz
    dips = lorentzian(f_mhz, nu_minus, w) + lorentzian(f_mhz, nu_plus, w)
    return params.baseline_mv * (1.0 - params.contrast * dips)


def synthesize_spectrum(
    params: NvParameters,
    field: MagneticField,
    plan: SweepPlan,
    noise_sigma_mv: float = 0.0,
    seed: int = 0,
) -> Spectrum:
    """Two-dip ODMR spectrum with Gaussian noise reduced by ``sqrt(plan.n_avg)``."""
    if noise_sigma_mv < 0:
        raise ValueError("noise_sigma_mv must be non-negative")
    if plan.n_points < 1:
        raise ValueError("plan has no points")
    f = plan.frequencies_mhz()
    signal = odmr_signal(params, field, f)
    if noise_sigma_mv > 0:
        rng = np.random.default_rng(seed)
        signal = signal + rng.normal(0.0, noise_sigma_mv / math.sqrt(plan.n_avg), size=f.size)
    return Spectrum.from_arrays(plan, signal, source="simulated")
