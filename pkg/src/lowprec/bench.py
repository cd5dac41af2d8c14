"""CPU micro-benchmarks of the ops that make up a SwitchBack linear layer.

Timings are wall-clock on whatever numpy/BLAS build is installed. They say
nothing about accelerator speedups; they exist to profile the relative cost
of quantization against the matmuls around it.
"""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .linear import LinearMode, int8_matmul_dequant, linear_backward, linear_forward
from .numerics import gaussian_matrix, matmul
from .quantize import quantize_rowwise, quantize_tensorwise

OPS = ("quantize_rowwise", "quantize_tensorwise", "int8_matmul_dequant", "matmul", "switchback_fwd_bwd")
QUANTIZE_OPS = ("quantize_rowwise", "quantize_tensorwise")
MATMUL_OPS = ("int8_matmul_dequant",)
CSV_COLUMNS = ("op", "b", "dim", "repeats", "mean_ns", "p50_ns")

_SWITCHBACK = LinearMode("SwitchBack")


@dataclass(frozen=True)
class BenchRow:
    op: str
    b: int
    dim: int
    repeats: int
    mean_ns: float
    p50_ns: float


def parse_sizes(text: str) -> List[Tuple[int, int]]:
    """``"64x256,128x512"`` -> ``[(64, 256), (128, 512)]``."""
    sizes = []
    for item in text.split(","):
        item = item.strip().lower()
        if not item:
            continue
        try:
            b, dim = (int(v) for v in item.split("x"))
        except ValueError:
            raise ValueError(f"bad size {item!r}; expected BxDIM, e.g. 64x256") from None
        if b < 1 or dim < 1:
            raise ValueError(f"sizes must be positive, got {item!r}")
        sizes.append((b, dim))
    if not sizes:
        raise ValueError("no sizes given")
    return sizes


def _ops_for(b: int, dim: int, seed: int) -> Dict[str, Callable[[], object]]:
    x = gaussian_matrix(b, dim, 0.0, 1.0, seed)
    w = gaussian_matrix(4 * dim, dim, 0.0, dim ** -0.5, seed + 1)
    g = gaussian_matrix(b, 4 * dim, 0.0, 1.0, seed + 2)
    qx = quantize_rowwise(x)
    qw = quantize_tensorwise(w)

    def switchback():
        _, ctx = linear_forward(_SWITCHBACK, x, w)
        linear_backward(_SWITCHBACK, ctx, g)

    return {
        "quantize_rowwise": lambda: quantize_rowwise(x),
        "quantize_tensorwise": lambda: quantize_tensorwise(w),
        "int8_matmul_dequant": lambda: int8_matmul_dequant(qx, qw),
        "matmul": lambda: matmul(x, w),
        "switchback_fwd_bwd": switchback,
    }


def _time(fn: Callable[[], object], repeats: int) -> np.ndarray:
    fn()  # warm-up
    out = np.empty(repeats, dtype=np.int64)
    for i in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        out[i] = time.perf_counter_ns() - t0
    return out


def bench(op_set: Iterable[str] = OPS, sizes: Sequence[Tuple[int, int]] = ((64, 256),),
          repeats: int = 10, seed: int = 0) -> List[BenchRow]:
    op_set = list(op_set)
    unknown = [op for op in op_set if op not in OPS]
    if unknown:
        raise ValueError(f"unknown ops {unknown}; expected a subset of {OPS}")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    rows = []
    for b, dim in sizes:
        ops = _ops_for(b, dim, seed)
        for op in op_set:
            t = _time(ops[op], repeats)
            rows.append(BenchRow(op, b, dim, repeats, float(t.mean()), float(np.median(t))))
    return rows


def quantize_fraction(rows: Sequence[BenchRow], b: int, dim: int) -> float:
    """Share of quantize time in quantize + int8 matmul time at one size.

    NaN if either class of op was not measured.
    """
    sel = [r for r in rows if r.b == b and r.dim == dim]
    q = sum(r.mean_ns for r in sel if r.op in QUANTIZE_OPS)
    mm = sum(r.mean_ns for r in sel if r.op in MATMUL_OPS)
    if not any(r.op in QUANTIZE_OPS for r in sel) or not any(r.op in MATMUL_OPS for r in sel):
        return float("nan")
    return q / (q + mm)


def to_csv(rows: Sequence[BenchRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow([r.op, r.b, r.dim, r.repeats, f"{r.mean_ns:.1f}", f"{r.p50_ns:.1f}"])
    return buf.getvalue()
