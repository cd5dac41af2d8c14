"""Variance growth of quantized inner products.

For length-k vectors with i.i.d. mean-zero entries of variance ``sigma_u**2``
and ``sigma_v**2``, perturbed by independent mean-zero errors of variance
``sigma_q**2``, the inner product's variance grows by
``k * sigma_q**2 * (sigma_u**2 + sigma_v**2 + sigma_q**2)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linear import int8_matmul_dequant
from .quantize import INT8_MAX, quantize_rowwise, quantize_tensorwise

BLOCK_TRIALS = 2048


@dataclass(frozen=True)
class QuantNoiseModel:
    k: int
    sigma_u: float
    sigma_v: float
    sigma_q: float

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if min(self.sigma_u, self.sigma_v, self.sigma_q) < 0:
            raise ValueError("standard deviations must be non-negative")

    @property
    def per_element_increase(self) -> float:
        q2 = self.sigma_q**2
        return q2 * (self.sigma_u**2 + self.sigma_v**2 + q2)


def predicted_variance_increase(model: QuantNoiseModel) -> float:
    return model.k * model.per_element_increase


def _block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, block))))


def monte_carlo_variance_increase(model: QuantNoiseModel, trials: int, seed: int = 0) -> float:
    """Sampled increase in Var(<u_hat, v_hat>) over Var(<u, v>).

    Each trial draws u, v and Gaussian errors for both, then records the change
    ``d = <u_hat, v_hat> - <u, v>`` on that same draw. Because the cross term
    Cov(<u, v>, d) is zero under the model, Var(<u_hat, v_hat>) - Var(<u, v>)
    equals Var(d); estimating it from the paired difference avoids subtracting
    two large, noisy variance estimates. The unbiased estimator is used.

    Trials run in blocks of ``BLOCK_TRIALS``; block j draws from a stream seeded
    by ``(seed, j)``, so the result does not depend on evaluation order.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    k = model.k
    diffs = np.empty(trials)
    for block, start in enumerate(range(0, trials, BLOCK_TRIALS)):
        n = min(BLOCK_TRIALS, trials - start)
        rng = _block_rng(seed, block)
        u = rng.standard_normal((n, k)) * model.sigma_u
        v = rng.standard_normal((n, k)) * model.sigma_v
        eps = rng.standard_normal((n, k)) * model.sigma_q
        xi = rng.standard_normal((n, k)) * model.sigma_q
        diffs[start:start + n] = np.einsum("ij,ij->i", u + eps, v + xi) - np.einsum("ij,ij->i", u, v)
    if trials == 1:
        return 0.0
    return float(np.var(diffs, ddof=1))


def relative_wgrad_noise_factor(batch_tokens: int, fwd_inner: int) -> float:
    """How many times longer the weight-gradient dot products are than the forward ones."""
    if batch_tokens < 1 or fwd_inner < 1:
        raise ValueError("dimensions must be >= 1")
    return batch_tokens / fwd_inner


def fit_slope(ks, values) -> float:
    """Least-squares slope of ``values`` against ``ks`` (with intercept)."""
    slope, _ = np.polyfit(np.asarray(ks, float), np.asarray(values, float), 1)
    return float(slope)


def variance_law_report(ks, sigma_q: float, trials: int, seed: int = 0,
                        sigma_u: float = 1.0, sigma_v: float = 1.0) -> list[dict]:
    rows = []
    for k in ks:
        model = QuantNoiseModel(int(k), sigma_u, sigma_v, sigma_q)
        pred = predicted_variance_increase(model)
        emp = monte_carlo_variance_increase(model, trials, seed)
        rel = abs(emp - pred) / pred if pred else abs(emp)
        rows.append({"k": int(k), "predicted": pred, "empirical": emp, "rel_error": rel})
    return rows


def int8_matmul_error_variance(k: int, rows: int = 256, cols: int = 256, absmax: float = 6.0,
                               seed: int = 0) -> tuple[float, float]:
    """Output-error variance of a real int8 product, and the uniform-rounding prediction.

    X (rows x k) and W (cols x k) are unit Gaussians except for column 0 of
    both, which is pinned to ``absmax``. That fixes the quantization step at
    ``absmax / 127`` for every row of X and for W as a whole, independent of k.
    The pinned column sits on the int8 grid, so only the other ``k - 1``
    coordinates contribute rounding error, each with stdev ``step / sqrt(12)``.
    """
    rng = _block_rng(seed, k)
    x = rng.standard_normal((rows, k)).astype(np.float32)
    w = rng.standard_normal((cols, k)).astype(np.float32)
    x[:, 0] = absmax
    w[:, 0] = absmax
    if np.abs(x[:, 1:]).max() >= absmax or np.abs(w[:, 1:]).max() >= absmax:
        raise RuntimeError("Gaussian draw exceeded the pinned absmax; pick a larger absmax")
    exact = x.astype(np.float64) @ w.astype(np.float64).T
    approx = int8_matmul_dequant(quantize_rowwise(x), quantize_tensorwise(w), out_dtype=np.float64)
    err = (approx - exact).ravel()
    sigma_q = (absmax / INT8_MAX) / math.sqrt(12.0)
    model = QuantNoiseModel(k - 1, 1.0, 1.0, sigma_q)
    return float(np.var(err, ddof=1)), predicted_variance_increase(model)


def quantizer_bridge_report(ks, rows: int = 256, cols: int = 256, absmax: float = 6.0,
                            seed: int = 0) -> list[dict]:
    out = []
    for k in ks:
        emp, pred = int8_matmul_error_variance(int(k), rows, cols, absmax, seed)
        out.append({"k": int(k), "predicted": pred, "empirical": emp,
                    "rel_error": abs(emp - pred) / pred})
    return out
