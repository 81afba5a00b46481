"""Input checks shared by the array-level analysis API and the estimators."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length


def check_sweep_arrays(f_mhz, signal_mv, min_points: int = 1):
    """Validate a frequency axis and its signal; returns float64 1-D copies.

    ``f_mhz`` may be 1-D or a single-column 2-D array (scikit-learn ``X``).
    """
    f = np.asarray(f_mhz)
    if f.ndim == 2:
        if f.shape[1] != 1:
            raise ValueError(f"expected a single frequency column, got shape {f.shape}")
        f = f[:, 0]
    f = check_array(f, ensure_2d=False, dtype=np.float64, copy=True)
    y = check_array(signal_mv, ensure_2d=False, dtype=np.float64, copy=True)
    if f.ndim != 1 or y.ndim != 1:
        raise ValueError("frequency and signal must be one-dimensional")
    check_consistent_length(f, y)
    if f.size < min_points:
        raise ValueError(f"need at least {min_points} points, got {f.size}")
    if np.any(np.diff(f) <= 0):
        raise ValueError("frequencies must be strictly ascending")
    return f, y


def check_frequencies(f_mhz) -> np.ndarray:
    f = np.asarray(f_mhz)
    if f.ndim == 2 and f.shape[1] == 1:
        f = f[:, 0]
    return check_array(f, ensure_2d=False, dtype=np.float64)
