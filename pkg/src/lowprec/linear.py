"""Bias-free linear layers with 8-bit matmuls.

Every variant computes ``Y = X @ W.T`` for ``X`` of shape (b, n) and ``W`` of
shape (m, n), and the two backward products ``dX = G @ W`` and
``dW = G.T @ X``. They differ in which of those three products run through
quantized operands:

=============  ===========================  ===========================  ======================
variant        forward                      input gradient               weight gradient
=============  ===========================  ===========================  ======================
Standard       working precision            working precision            working precision
SwitchBack     row X, tensor W              row G, tensor W.T            working precision
SwitchBackM    row X, tensor W (saved q.)   row G, saved tensor W.T      dequantized X
SwitchBackQ    row X, row W                 row G, column W (as W.T)     working precision
AllQuant int8  row X, row W                 row G, column W (as W.T)     row G.T, row X.T
AllQuant fp8   tensor X, tensor W           tensor G, tensor W.T         tensor G.T, tensor X.T
=============  ===========================  ===========================  ======================

With an fp8 numeric format the same layout applies with float8 casting in
place of int8 rounding; products then run in working precision over the
snapped values.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np

from .numerics import matmul
from .quantize import (
    E4M3,
    E5M2,
    FP8_FORMATS,
    INT8_MAX,
    Fp8Format,
    QuantizedMatrix,
    dequantize,
    quantize,
    quantize_columnwise_transpose,
    quantize_rowwise,
    quantize_tensorwise_transpose,
)

VARIANTS = ("Standard", "SwitchBack", "SwitchBackM", "SwitchBackQ", "AllQuant")

# Largest inner dimension whose worst-case sum k * 127**2 fits in int32.
INT32_SAFE_K = (2**31 - 1) // INT8_MAX**2
# float64 represents every integer partial sum exactly below this k.
FLOAT64_EXACT_K = 2**53 // INT8_MAX**2


@dataclass(frozen=True)
class LinearMode:
    variant: str = "Standard"
    numeric_format: Literal["int8", "fp8"] = "int8"
    fp8_forward: Fp8Format = E4M3
    fp8_backward: Fp8Format = E5M2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown linear variant {self.variant!r}; expected one of {VARIANTS}")
        if self.numeric_format not in ("int8", "fp8"):
            raise ValueError(f"unknown numeric format {self.numeric_format!r}")

    @classmethod
    def parse(cls, variant: str = "Standard", numeric_format: str = "int8",
              fp8_forward: str = "E4M3", fp8_backward: str = "E5M2") -> "LinearMode":
        try:
            fwd, bwd = FP8_FORMATS[fp8_forward], FP8_FORMATS[fp8_backward]
        except KeyError as exc:
            raise ValueError(f"unknown fp8 format {exc.args[0]!r}") from None
        return cls(variant, numeric_format, fwd, bwd)

    @property
    def weight_fmt(self) -> Optional[Fp8Format]:
        return self.fp8_forward if self.numeric_format == "fp8" else None

    @property
    def grad_fmt(self) -> Optional[Fp8Format]:
        return self.fp8_backward if self.numeric_format == "fp8" else None

    @property
    def label(self) -> str:
        if self.variant == "Standard":
            return "Standard"
        if self.numeric_format == "fp8":
            return f"{self.variant}(fp8 {self.fp8_forward}/{self.fp8_backward})"
        return f"{self.variant}(int8)"


@dataclass
class LinearContext:
    """Tensors saved by the forward pass for the backward pass.

    SwitchBackM keeps only the quantized ``qx``/``qw``; every other variant
    keeps the full-precision ``x`` and ``w``.
    """

    mode: LinearMode
    x: Optional[np.ndarray] = None
    w: Optional[np.ndarray] = None
    qx: Optional[QuantizedMatrix] = None
    qw: Optional[QuantizedMatrix] = None
    x_shape: tuple = ()
    w_shape: tuple = ()
    consumed: bool = field(default=False, repr=False)


def _resolve_accumulator(k: int, accumulator: str) -> str:
    if accumulator == "auto":
        return "int32" if k <= INT32_SAFE_K else "int64"
    if accumulator == "int32" and k > INT32_SAFE_K:
        raise OverflowError(
            f"inner dimension {k} can overflow an int32 accumulator (limit {INT32_SAFE_K})"
        )
    if accumulator not in ("int32", "int64"):
        raise ValueError(f"unknown accumulator {accumulator!r}")
    return accumulator


def integer_product(pa: np.ndarray, pb: np.ndarray, accumulator: str = "auto") -> np.ndarray:
    """Exact integer ``pa @ pb.T`` for int8 payloads.

    The sum is evaluated through float64 BLAS, which is exact integer
    arithmetic for any k up to 2**53 / 127**2. The accumulator argument
    keeps the int32/int64 contract of real int8 kernels.
    """
    k = pa.shape[1]
    if pb.shape[1] != k:
        raise ValueError(f"inner dimensions differ: {pa.shape} vs {pb.shape}")
    _resolve_accumulator(k, accumulator)
    if k >= FLOAT64_EXACT_K:
        return pa.astype(np.int64) @ pb.astype(np.int64).T
    return pa.astype(np.float64) @ pb.astype(np.float64).T


def _row_scale(q: QuantizedMatrix) -> np.ndarray:
    s = q.state.astype(np.float64)
    if q.axis == "row":
        return s
    if q.axis == "tensor":
        return np.full(q.rows, s[0])
    raise ValueError(f"operand quantized along {q.axis!r} cannot be dequantized after an A @ B.T product")


def quantized_product(qa: QuantizedMatrix, qb: QuantizedMatrix, out_dtype=np.float32,
                      accumulator: str = "auto") -> np.ndarray:
    """Dequantized ``A @ B.T`` from two quantized operands.

    Each operand must carry one scale per output row (axis ``row``) or a
    single scale (axis ``tensor``), so the scales factor out of the inner sum.
    """
    if qa.is_int8 != qb.is_int8:
        raise ValueError("cannot mix int8 and fp8 operands")
    if qa.cols != qb.cols:
        raise ValueError(f"inner dimensions differ: {qa.shape} vs {qb.shape}")
    sa = _row_scale(qa)[:, None]
    sb = _row_scale(qb)[None, :]
    if qa.is_int8:
        raw = integer_product(qa.payload, qb.payload, accumulator)
        out = raw * (sa * sb) / INT8_MAX**2
    else:
        raw = qa.payload.astype(np.float64) @ qb.payload.astype(np.float64).T
        out = raw * (sa * sb)
    return out.astype(out_dtype)


def int8_matmul_dequant(qx: QuantizedMatrix, qw: QuantizedMatrix, accumulator: str = "auto",
                        out_dtype=np.float32) -> np.ndarray:
    """Row-wise ``qx`` times tensor-wise ``qw`` transposed, then dequantized."""
    if qx.axis != "row" or qw.axis != "tensor":
        raise ValueError(f"expected row x tensor operands, got {qx.axis} x {qw.axis}")
    if not (qx.is_int8 and qw.is_int8):
        raise ValueError("int8_matmul_dequant needs int8 payloads")
    return quantized_product(qx, qw, out_dtype, accumulator)


def matmul_dequant_dual_rowwise(qx: QuantizedMatrix, qw: QuantizedMatrix, accumulator: str = "auto",
                                out_dtype=np.float32) -> np.ndarray:
    """Both operands row-wise; the output is scaled by the outer product of their states."""
    if qx.axis != "row" or qw.axis != "row":
        raise ValueError(f"expected row x row operands, got {qx.axis} x {qw.axis}")
    return quantized_product(qx, qw, out_dtype, accumulator)


def _check_operands(*arrays):
    for a in arrays:
        if a.ndim != 2:
            raise ValueError(f"expected 2-D operands, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("linear layer received non-finite values")


def linear_forward(mode: LinearMode, x: np.ndarray, w: np.ndarray):
    """Return ``(Y, ctx)`` with ``Y ~= x @ w.T``."""
    x = np.asarray(x)
    w = np.asarray(w)
    _check_operands(x, w)
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"input width {x.shape[1]} does not match weight shape {w.shape}")
    out_dtype = np.result_type(x.dtype, w.dtype, np.float32)
    ctx = LinearContext(mode, x_shape=x.shape, w_shape=w.shape)
    v = mode.variant
    ffmt = mode.weight_fmt

    if v == "Standard":
        ctx.x, ctx.w = x, w
        return matmul(x, w).astype(out_dtype, copy=False), ctx

    if v == "AllQuant" and mode.numeric_format == "fp8":
        x_axis, w_axis = "tensor", "tensor"
    elif v in ("SwitchBackQ", "AllQuant"):
        x_axis, w_axis = "row", "row"
    else:
        x_axis, w_axis = "row", "tensor"

    qx = quantize(x, x_axis, ffmt)
    qw = quantize(w, w_axis, ffmt)
    y = quantized_product(qx, qw, out_dtype)
    if v == "SwitchBackM":
        ctx.qx, ctx.qw = qx, qw
    else:
        ctx.x, ctx.w = x, w
    return y, ctx


def linear_backward(mode: LinearMode, ctx: LinearContext, g: np.ndarray):
    """Return ``(dX, dW)`` for output gradient ``g`` of shape (b, m)."""
    if ctx.mode != mode:
        raise ValueError(f"context was saved by {ctx.mode.label}, not {mode.label}")
    if ctx.consumed:
        raise RuntimeError("linear context already consumed by a backward pass")
    g = np.asarray(g)
    if g.ndim != 2:
        raise ValueError(f"expected a 2-D output gradient, got shape {g.shape}")
    b, n = ctx.x_shape
    m = ctx.w_shape[0]
    if g.shape != (b, m):
        raise ValueError(f"output gradient has shape {g.shape}, expected {(b, m)}")
    ctx.consumed = True

    v = mode.variant
    ffmt, gfmt = mode.weight_fmt, mode.grad_fmt
    out_dtype = np.result_type(g.dtype, np.float32)

    if v == "Standard" or not np.all(np.isfinite(g)):
        # Inf/NaN cannot be quantized; let them flow to the loss scaler.
        x = ctx.x if ctx.x is not None else dequantize(ctx.qx)
        w = ctx.w if ctx.w is not None else dequantize(ctx.qw)
        return matmul(g, w.T), matmul(g.T, x.T)

    if v == "SwitchBackM":
        x = dequantize(ctx.qx)
        w_grad = matmul(g.T, x.T)
        qwt = ctx.qw.T
        x_grad = quantized_product(quantize(g, "row", gfmt), qwt, out_dtype)
        return x_grad, w_grad

    x, w = ctx.x, ctx.w
    if v == "SwitchBack":
        qwt = quantize(w, "tensor", ffmt).T if ffmt else quantize_tensorwise_transpose(w)
        x_grad = quantized_product(quantize(g, "row", gfmt), qwt, out_dtype)
        return x_grad, matmul(g.T, x.T)

    if v == "AllQuant" and mode.numeric_format == "fp8":
        x_grad = quantized_product(quantize(g, "tensor", gfmt), quantize(w, "tensor", ffmt).T, out_dtype)
        w_grad = quantized_product(quantize(g.T, "tensor", gfmt), quantize(x.T, "tensor", ffmt), out_dtype)
        return x_grad, w_grad

    # SwitchBackQ and int8 AllQuant share the input-gradient path.
    qwt = quantize(w, "column", ffmt).T if ffmt else quantize_columnwise_transpose(w)
    x_grad = quantized_product(quantize(g, "row", gfmt), qwt, out_dtype)
    if v == "SwitchBackQ":
        return x_grad, matmul(g.T, x.T)
    w_grad = quantized_product(quantize_rowwise(g.T), quantize_rowwise(x.T), out_dtype)
    return x_grad, w_grad
