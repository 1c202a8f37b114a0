"""Finite-difference gradient oracle.

All probing runs in 64-bit arithmetic regardless of the dtype the checked
implementation trains with; callers building graphs for verification
should build them with dtype=np.float64 so both routes see the same
function.
"""

from __future__ import annotations

import numpy as np


def finite_difference_gradient(f, x, h: float = 1e-3) -> np.ndarray:
    """Central differences (f(x+h*e_i) - f(x-h*e_i)) / (2h) per coordinate.

    `f` must be a scalar-valued function of a single array.  Raises
    ArithmeticError if any probe evaluates non-finite.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(np.asarray(f(x)).reshape(()))
        flat[i] = orig - h
        fm = float(np.asarray(f(x)).reshape(()))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ArithmeticError(
                f"non-finite function value while probing coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor), elementwise over both arrays.

    The floor keeps near-zero coordinates from inflating the ratio with
    pure rounding noise.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
