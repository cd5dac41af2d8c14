"""Dense-matrix substrate shared by every other module.

Matrices are plain 2-D ``numpy`` arrays in working precision (float32).
Products follow the hardware convention ``A @ B.T``.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

WORKING_DTYPE = np.float32


def as_matrix(x, dtype=WORKING_DTYPE) -> np.ndarray:
    a = np.asarray(x, dtype=dtype)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def rng_from_seed(seed: int) -> np.random.Generator:
    """PCG64 stream for a 64-bit seed.

    Gaussian draws use numpy's ziggurat ``standard_normal``, which is stable
    across platforms for a given bit generator state.
    """
    return np.random.Generator(np.random.PCG64(np.uint64(seed)))


def matmul(a: np.ndarray, b_t: np.ndarray) -> np.ndarray:
    """Return ``a @ b_t.T`` in the dtype of ``a``.

    Float32 operands are widened to float64 before the product, so every
    elementwise product is exact and the only rounding that matters is the
    final cast back to float32. Integer-valued inputs with partial sums below
    2**53 come out exact.
    """
    if a.ndim != 2 or b_t.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b_t.shape[1]:
        raise ValueError(
            f"inner dimensions differ: {a.shape} vs {b_t.shape} (computes A @ B.T)"
        )
    out_dtype = np.result_type(a.dtype, b_t.dtype, np.float32)
    prod = np.asarray(a, dtype=np.float64) @ np.asarray(b_t, dtype=np.float64).T
    return prod.astype(out_dtype, copy=False)


def gaussian_matrix(rows: int, cols: int, mean: float, stdev: float, seed: int) -> np.ndarray:
    if stdev < 0:
        raise ValueError("stdev must be non-negative")
    z = rng_from_seed(seed).standard_normal((rows, cols))
    return (mean + stdev * z).astype(WORKING_DTYPE)


def finite_difference_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-4
) -> np.ndarray:
    """Central-difference gradient of a scalar function, one entry at a time.

    Evaluation happens in float64 regardless of the dtype of ``x``.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = float(f(x))
        x[idx] = orig - h
        down = float(f(x))
        x[idx] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise FloatingPointError(f"non-finite function value near index {idx}")
        grad[idx] = (up - down) / (2 * h)
    return grad
