"""Sweep plans and spectra shared by the simulator, controller and analysis."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

MAX_POINTS = 65535
SIMULATED_TIMESTAMP = "1970-01-01T00:00:00+00:00"


class InvariantViolation(ValueError):
    pass


def mhz_to_khz(value_mhz: float) -> int:
    khz = round(value_mhz * 1000)
    if not math.isclose(khz, value_mhz * 1000, rel_tol=0, abs_tol=1e-6):
        raise InvariantViolation(f"{value_mhz} MHz is not a whole number of kHz")
    return int(khz)


def format_mhz(khz: int) -> str:
    """Exact decimal MHz rendering of an integer kHz value."""
    sign = "-" if khz < 0 else ""
    whole, frac = divmod(abs(khz), 1000)
    if frac == 0:
        return f"{sign}{whole}"
    return f"{sign}{whole}.{frac:03d}".rstrip("0")


@dataclass(frozen=True)
class SweepPlan:
    """Inclusive frequency sweep on a kHz grid.

    ``start_mhz``, ``stop_mhz`` and ``step_mhz`` must resolve to whole kHz
    so that every point is an exact integer kHz.
    """

    start_mhz: float = 2614.0
    stop_mhz: float = 3126.0
    step_mhz: float = 4.0
    n_avg: int = 6
    settle_ms: int = 2

    def __post_init__(self):
        start, stop, step = self.start_khz, self.stop_khz, self.step_khz
        if start > stop:
            raise InvariantViolation(f"start {self.start_mhz} MHz above stop {self.stop_mhz} MHz")
        if step <= 0:
            raise InvariantViolation("step must be positive")
        if not 1 <= int(self.n_avg) <= 0xFFFF:
            raise InvariantViolation("n_avg must be in [1, 65535]")
        if not 0 <= int(self.settle_ms) <= 0xFFFF:
            raise InvariantViolation("settle_ms must be in [0, 65535]")
        if self.n_points > MAX_POINTS:
            raise InvariantViolation(f"{self.n_points} points exceeds {MAX_POINTS}")

    @classmethod
    def from_khz(cls, start_khz: int, stop_khz: int, step_khz: int, n_avg: int = 6, settle_ms: int = 2) -> "SweepPlan":
        return cls(start_khz / 1000, stop_khz / 1000, step_khz / 1000, n_avg, settle_ms)

    @property
    def start_khz(self) -> int:
        return mhz_to_khz(self.start_mhz)

    @property
    def stop_khz(self) -> int:
        return mhz_to_khz(self.stop_mhz)

    @property
    def step_khz(self) -> int:
        return mhz_to_khz(self.step_mhz)

    @property
    def n_points(self) -> int:
        return (self.stop_khz - self.start_khz) // self.step_khz + 1

    def frequencies_khz(self) -> list[int]:
        return [self.start_khz + i * self.step_khz for i in range(self.n_points)]

    def frequencies_mhz(self) -> np.ndarray:
        return np.array(self.frequencies_khz(), dtype=float) / 1000.0


@dataclass(frozen=True)
class SpectrumPoint:
    f_mhz: float
    signal_mv: float
    n_avg: int

    def __post_init__(self):
        if self.n_avg < 1:
            raise InvariantViolation("n_avg must be >= 1")
        if not math.isfinite(self.signal_mv):
            raise InvariantViolation(f"non-finite signal at {self.f_mhz} MHz")


@dataclass(frozen=True)
class SpectrumMeta:
    plan: SweepPlan
    source: str = "simulated"
    timestamp: str = SIMULATED_TIMESTAMP
    device: str = ""
    baseline_applied: bool = False

    def __post_init__(self):
        if self.source not in ("real", "simulated"):
            raise InvariantViolation(f"source must be 'real' or 'simulated', got {self.source!r}")


@dataclass(frozen=True)
class Spectrum:
    points: tuple[SpectrumPoint, ...]
    meta: SpectrumMeta = field(default_factory=lambda: SpectrumMeta(SweepPlan()))

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))
        f = [p.f_mhz for p in self.points]
        if any(b <= a for a, b in zip(f, f[1:])):
            raise InvariantViolation("frequencies must be strictly ascending")
        if len(self.points) != self.meta.plan.n_points:
            raise InvariantViolation(
                f"{len(self.points)} points but plan expects {self.meta.plan.n_points}"
            )

    @classmethod
    def from_arrays(
        cls,
        plan: SweepPlan,
        signal_mv: Sequence[float],
        *,
        n_avg: Optional[Sequence[int]] = None,
        **meta,
    ) -> "Spectrum":
        freqs = plan.frequencies_khz()
        if n_avg is None:
            n_avg = [plan.n_avg] * len(freqs)
        points = tuple(
            SpectrumPoint(khz / 1000, float(s), int(n)) for khz, s, n in zip(freqs, signal_mv, n_avg)
        )
        return cls(points, SpectrumMeta(plan, **meta))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def frequencies(self) -> np.ndarray:
        return np.array([p.f_mhz for p in self.points])

    @property
    def signals(self) -> np.ndarray:
        return np.array([p.signal_mv for p in self.points])

    @property
    def n_avg(self) -> np.ndarray:
        return np.array([p.n_avg for p in self.points])

    def with_signals(self, signal_mv: Sequence[float], **meta_changes) -> "Spectrum":
        points = tuple(replace(p, signal_mv=float(s)) for p, s in zip(self.points, signal_mv))
        return Spectrum(points, replace(self.meta, **meta_changes))
