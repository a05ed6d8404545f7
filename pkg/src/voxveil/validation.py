"""Input validation shared by the public entry points."""

from __future__ import annotations

import numpy as np
from sklearn.utils import check_array

from .dsp import Waveform
from .exceptions import ShapeMismatchError


def as_samples(x) -> np.ndarray:
    """1-D finite float64 samples from a :class:`Waveform` or array-like."""
    if isinstance(x, Waveform):
        x = x.samples
    arr = check_array(x, ensure_2d=False, dtype=np.float64, input_name="waveform")
    if arr.ndim != 1:
        raise ShapeMismatchError(f"expected a mono 1-D signal, got shape {arr.shape}")
    return arr


def check_same_length(a: np.ndarray, b: np.ndarray, what: str = "signals") -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what} differ in length: {a.shape[0]} vs {b.shape[0]}")


def check_in_range(name: str, value: float, low: float, high: float,
                   low_open: bool = False) -> float:
    value = float(value)
    ok_low = value > low if low_open else value >= low
    if not (ok_low and value <= high and np.isfinite(value)):
        bracket = "(" if low_open else "["
        raise ValueError(f"{name} must lie in {bracket}{low}, {high}], got {value}")
    return value


def parse_fraction(text) -> float:
    """Parse ``"8/255"``, ``"0.03"`` or a number into a float."""
    if isinstance(text, (int, float)):
        return float(text)
    s = str(text).strip()
    if "/" in s:
        num, den = s.split("/", 1)
        den_f = float(den)
        if den_f == 0:
            raise ValueError(f"zero denominator in {text!r}")
        return float(num) / den_f
    return float(s)
