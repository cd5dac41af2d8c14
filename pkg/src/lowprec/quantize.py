"""Absmax quantization to int8 and simulated float8.

Int8 payloads live on the symmetric grid [-127, 127]; the saved state is the
absmax of each slice (row, column, or whole tensor). Float8 payloads are
``x / absmax`` snapped to the exact values of an 8-bit float format and kept
in working precision.

Scaling and rounding run in float64 and results are cast back to the
working dtype, which keeps grid-aligned round trips exact.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Literal, Optional

import numpy as np

from .numerics import WORKING_DTYPE

Axis = Literal["row", "column", "tensor"]
AXES = ("row", "column", "tensor")

INT8_MAX = 127
ZERO_SLICE_STATE = 1.0


@dataclass(frozen=True)
class Fp8Format:
    """Sign + exponent + mantissa layout of an 8-bit float.

    ``reserved`` picks which encodings are not finite numbers:
    ``"ieee"`` reserves the whole top exponent for Inf/NaN (E5M2 style),
    ``"fn"`` reserves only the all-ones pattern for NaN (E4M3 style).
    """

    exponent_bits: int
    mantissa_bits: int
    exponent_bias: int
    reserved: Literal["ieee", "fn"] = "ieee"
    name: str = ""

    def __post_init__(self):
        if self.exponent_bits < 1 or self.mantissa_bits < 0:
            raise ValueError("exponent_bits must be >= 1 and mantissa_bits >= 0")
        if self.exponent_bits + self.mantissa_bits != 7:
            raise ValueError(
                f"exponent_bits + mantissa_bits must be 7, got "
                f"{self.exponent_bits}+{self.mantissa_bits}"
            )
        if self.reserved not in ("ieee", "fn"):
            raise ValueError(f"unknown reserved-encoding convention {self.reserved!r}")

    @cached_property
    def values(self) -> np.ndarray:
        return _enumerate_values(self)

    @property
    def max_finite(self) -> float:
        return float(self.values[-1])

    def __str__(self):
        return self.name or f"E{self.exponent_bits}M{self.mantissa_bits}"


def _enumerate_values(fmt: Fp8Format) -> np.ndarray:
    top_exp = (1 << fmt.exponent_bits) - 1
    top_man = (1 << fmt.mantissa_bits) - 1
    scale = float(1 << fmt.mantissa_bits)
    positive = set()
    for e in range(top_exp + 1):
        for m in range(top_man + 1):
            if e == top_exp and (fmt.reserved == "ieee" or m == top_man):
                continue
            if e == 0:
                v = (m / scale) * 2.0 ** (1 - fmt.exponent_bias)
            else:
                v = (1.0 + m / scale) * 2.0 ** (e - fmt.exponent_bias)
            positive.add(v)
    pos = np.array(sorted(positive), dtype=np.float64)
    return np.concatenate([-pos[::-1][:-1] if pos[0] == 0.0 else -pos[::-1], pos])


E4M3 = Fp8Format(4, 3, 7, "fn", name="E4M3")
E5M2 = Fp8Format(5, 2, 15, "ieee", name="E5M2")
FP8_FORMATS = {"E4M3": E4M3, "E5M2": E5M2}


def fp8_value_set(fmt: Fp8Format) -> np.ndarray:
    """Sorted finite values of ``fmt``, denormals included, zero once."""
    return fmt.values.copy()


@dataclass
class QuantizedMatrix:
    payload: np.ndarray
    state: np.ndarray
    axis: Axis
    fmt: Optional[Fp8Format] = None

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"unknown axis {self.axis!r}")
        self.state = np.asarray(self.state, dtype=WORKING_DTYPE).reshape(-1)
        expected = {"row": self.rows, "column": self.cols, "tensor": 1}[self.axis]
        if self.state.shape[0] != expected:
            raise ValueError(
                f"state length {self.state.shape[0]} does not match axis "
                f"{self.axis!r} of a {self.shape} payload"
            )

    @property
    def shape(self):
        return self.payload.shape

    @property
    def rows(self) -> int:
        return self.payload.shape[0]

    @property
    def cols(self) -> int:
        return self.payload.shape[1]

    @property
    def is_int8(self) -> bool:
        return self.fmt is None

    def broadcast_state(self) -> np.ndarray:
        return _broadcast(self.state.astype(np.float64), self.axis)

    @property
    def T(self) -> "QuantizedMatrix":
        flipped = {"row": "column", "column": "row", "tensor": "tensor"}[self.axis]
        return QuantizedMatrix(self.payload.T.copy(), self.state, flipped, self.fmt)


def _broadcast(state: np.ndarray, axis: Axis) -> np.ndarray:
    if axis == "row":
        return state[:, None]
    if axis == "column":
        return state[None, :]
    return state.reshape(1, 1)


def _check_finite(x: np.ndarray):
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize a matrix with non-finite entries")


def slice_absmax(x: np.ndarray, axis: Axis) -> np.ndarray:
    """Per-slice absmax with all-zero slices mapped to the sentinel state."""
    a = np.abs(np.asarray(x, dtype=np.float64))
    if axis == "row":
        m = a.max(axis=1) if a.shape[1] else np.zeros(a.shape[0])
    elif axis == "column":
        m = a.max(axis=0) if a.shape[0] else np.zeros(a.shape[1])
    else:
        m = np.array([a.max() if a.size else 0.0])
    return np.where(m == 0.0, ZERO_SLICE_STATE, m)


def round_half_away(x: np.ndarray) -> np.ndarray:
    t = np.trunc(x)
    frac = np.abs(x - t)
    return np.where(frac >= 0.5, t + np.copysign(1.0, x), t)


def quantize_int8(x, axis: Axis) -> QuantizedMatrix:
    x = np.asarray(x)
    _check_finite(x)
    state = slice_absmax(x, axis)
    scaled = x.astype(np.float64) * INT8_MAX / _broadcast(state, axis)
    payload = np.clip(round_half_away(scaled), -INT8_MAX, INT8_MAX).astype(np.int8)
    return QuantizedMatrix(payload, state, axis)


def quantize_rowwise(x) -> QuantizedMatrix:
    return quantize_int8(x, "row")


def quantize_columnwise(x) -> QuantizedMatrix:
    return quantize_int8(x, "column")


def quantize_tensorwise(x) -> QuantizedMatrix:
    return quantize_int8(x, "tensor")


def quantize_tensorwise_transpose(w) -> QuantizedMatrix:
    """Tensor-wise quantization of ``w.T`` in one call."""
    return quantize_tensorwise(w).T


def quantize_columnwise_transpose(w) -> QuantizedMatrix:
    """Column-wise quantization of ``w``, returned as the row-wise view of ``w.T``."""
    return quantize_columnwise(w).T


def fp8_cast(x, fmt: Fp8Format) -> np.ndarray:
    """Snap each entry to the nearest finite value of ``fmt``.

    Ties go to the candidate of smaller magnitude. Out-of-range inputs
    saturate at +/- ``fmt.max_finite``. Output dtype matches the input.
    """
    x = np.asarray(x)
    vals = fmt.values
    x64 = x.astype(np.float64)
    idx = np.clip(np.searchsorted(vals, x64), 1, len(vals) - 1)
    lo = vals[idx - 1]
    hi = vals[idx]
    d_lo = x64 - lo
    d_hi = hi - x64
    pick_hi = (d_hi < d_lo) | ((d_hi == d_lo) & (np.abs(hi) < np.abs(lo)))
    out = np.where(pick_hi, hi, lo)
    out_dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else WORKING_DTYPE
    return out.astype(out_dtype)


def quantize_fp8(x, fmt: Fp8Format, axis: Axis) -> QuantizedMatrix:
    x = np.asarray(x)
    _check_finite(x)
    state = slice_absmax(x, axis)
    unit = x.astype(np.float64) / _broadcast(state, axis)
    payload = fp8_cast(unit, fmt).astype(WORKING_DTYPE)
    return QuantizedMatrix(payload, state, axis, fmt)


def quantize(x, axis: Axis, fmt: Optional[Fp8Format] = None) -> QuantizedMatrix:
    if fmt is None:
        return quantize_int8(x, axis)
    return quantize_fp8(x, fmt, axis)


def dequantize(q: QuantizedMatrix) -> np.ndarray:
    scale = q.broadcast_state()
    if q.is_int8:
        out = q.payload.astype(np.float64) * scale / INT8_MAX
    else:
        out = q.payload.astype(np.float64) * scale
    return out.astype(WORKING_DTYPE)
