import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lowprec.noise import (
    QuantNoiseModel,
    fit_slope,
    int8_matmul_error_variance,
    monte_carlo_variance_increase,
    predicted_variance_increase,
    quantizer_bridge_report,
    relative_wgrad_noise_factor,
    variance_law_report,
)


def test_prediction_examples():
    assert predicted_variance_increase(QuantNoiseModel(4096, 1, 1, 0)) == 0
    assert predicted_variance_increase(QuantNoiseModel(1, 1, 1, 1)) == 3
    assert math.isclose(predicted_variance_increase(QuantNoiseModel(1024, 1, 1, 0.05)), 5.1264, rel_tol=1e-12)


@given(st.integers(1, 10_000), st.floats(0, 3), st.floats(0, 3), st.floats(0, 1))
def test_prediction_linear_in_k(k, su, sv, sq):
    one = predicted_variance_increase(QuantNoiseModel(1, su, sv, sq))
    assert math.isclose(predicted_variance_increase(QuantNoiseModel(k, su, sv, sq)), k * one, rel_tol=1e-12)


def test_prediction_quadratic_in_small_sigma_q():
    a = predicted_variance_increase(QuantNoiseModel(10, 1, 1, 1e-4))
    b = predicted_variance_increase(QuantNoiseModel(10, 1, 1, 2e-4))
    assert math.isclose(b / a, 4.0, rel_tol=1e-6)


def test_model_validation():
    with pytest.raises(ValueError):
        QuantNoiseModel(0, 1, 1, 1)
    with pytest.raises(ValueError):
        QuantNoiseModel(1, -1, 1, 1)


def test_monte_carlo_zero_noise():
    assert monte_carlo_variance_increase(QuantNoiseModel(64, 1, 1, 0), 1000, seed=1) == 0.0


def test_monte_carlo_matches_at_k1024():
    emp = monte_carlo_variance_increase(QuantNoiseModel(1024, 1, 1, 0.05), 100_000, seed=0)
    assert abs(emp - 5.1264) / 5.1264 < 0.05


def test_monte_carlo_doubling_k():
    a = monte_carlo_variance_increase(QuantNoiseModel(128, 1, 1, 0.1), 20_000, seed=2)
    b = monte_carlo_variance_increase(QuantNoiseModel(256, 1, 1, 0.1), 20_000, seed=3)
    assert abs(b / a - 2.0) < 0.1


def test_monte_carlo_converges_with_trials():
    model = QuantNoiseModel(64, 1, 1, 0.1)
    pred = predicted_variance_increase(model)
    errs = {n: np.mean([abs(monte_carlo_variance_increase(model, n, seed=s) - pred) for s in range(8)])
            for n in (500, 50_000)}
    assert errs[50_000] < errs[500] / 3


def test_monte_carlo_deterministic():
    m = QuantNoiseModel(32, 1, 2, 0.3)
    assert monte_carlo_variance_increase(m, 5000, 9) == monte_carlo_variance_increase(m, 5000, 9)


def test_wgrad_noise_factor():
    assert relative_wgrad_noise_factor(65536, 1280) == 51.2
    assert relative_wgrad_noise_factor(65536, 5120) == 12.8
    assert relative_wgrad_noise_factor(7, 7) == 1
    with pytest.raises(ValueError):
        relative_wgrad_noise_factor(0, 3)


def test_fit_slope_exact_line():
    assert math.isclose(fit_slope([1, 2, 4], [3, 5, 9]), 2.0)


def test_report_rows():
    rows = variance_law_report([16, 32], 0.1, 2000, seed=0)
    assert [r["k"] for r in rows] == [16, 32]
    assert set(rows[0]) == {"k", "predicted", "empirical", "rel_error"}


def test_int8_bridge_single_k():
    emp, pred = int8_matmul_error_variance(256, rows=128, cols=128)
    sigma_q = (6 / 127) / math.sqrt(12)
    assert math.isclose(pred, 255 * sigma_q**2 * (2 + sigma_q**2))
    assert abs(emp - pred) / pred < 0.1


def test_int8_bridge_grows_with_k():
    rows = quantizer_bridge_report([64, 512], rows=64, cols=64)
    assert rows[1]["empirical"] > 5 * rows[0]["empirical"]
