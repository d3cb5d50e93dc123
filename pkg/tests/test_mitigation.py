import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cirtoa.errors import ParameterError
from cirtoa.mitigation import BiasModel, abs_ranging_error, fit_cnst_avg, mitigate, range_from_toa


@pytest.mark.parametrize("toa, eps, out", [(50, 2, 48), (50, 0, 50), (50, -1.5, 51.5)])
def test_mitigate(toa, eps, out):
    assert mitigate(toa, eps) == out


def test_mitigate_vectorised():
    np.testing.assert_array_equal(mitigate(np.array([10.0, 20.0]), np.array([1.0, -1.0])), [9.0, 21.0])


@pytest.mark.parametrize("errors, bias", [([1, 2, 3], 2.0), ([4.25], 4.25), ([-5, 5], 0.0)])
def test_cnst_avg_mean(errors, bias):
    m = fit_cnst_avg(errors, "Peak")
    assert m.bias == bias and m.method == "Peak" and m.n_train == len(errors)


def test_cnst_avg_empty():
    with pytest.raises(ParameterError):
        fit_cnst_avg([])


def test_cnst_avg_non_finite():
    with pytest.raises(ParameterError):
        fit_cnst_avg([1.0, math.nan])


def test_bias_model_apply():
    assert BiasModel(1.5, "IFP", 3).apply(10.0) == 8.5


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=200))
def test_cnst_avg_zero_residual(errors):
    b = fit_cnst_avg(errors).bias
    residual = math.fsum(e - b for e in errors) / len(errors)
    assert abs(residual) <= 1e-9


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=100), st.floats(0.01, 5.0))
def test_cnst_avg_minimises_mse(errors, delta):
    e = np.array(errors)
    b = fit_cnst_avg(e).bias
    mse = np.mean((e - b) ** 2)
    assert mse <= np.mean((e - b - delta) ** 2) + 1e-9
    assert mse <= np.mean((e - b + delta) ** 2) + 1e-9


def test_range_ten_samples():
    assert range_from_toa(20.0, 10.0, 1.0) == pytest.approx(2.99792458)


def test_range_zero():
    assert range_from_toa(7.0, 7.0, 1.0016) == 0.0


def test_range_default_resolution():
    assert range_from_toa(5.0, 0.0, 1.0016) == pytest.approx(0.299792458 * 5 * 1.0016, abs=1e-12)
    assert range_from_toa(5.0, 0.0, 1.0016) == pytest.approx(1.50136, abs=1e-5)


def test_range_rejects_bad_resolution():
    with pytest.raises(ParameterError):
        range_from_toa(1.0, 0.0, 0.0)


def test_range_vectorised():
    r = range_from_toa(np.array([1.0, 2.0]), np.array([0.0, 0.0]), np.array([1.0, 2.0]))
    np.testing.assert_allclose(r, [0.299792458, 4 * 0.299792458])


@pytest.mark.parametrize("a, b, out", [(3.0, 2.5, 0.5), (2.5, 3.0, 0.5), (1.25, 1.25, 0.0)])
def test_abs_ranging_error(a, b, out):
    assert abs_ranging_error(a, b) == out


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_abs_error_symmetric_nonnegative(a, b):
    assert abs_ranging_error(a, b) == abs_ranging_error(b, a) >= 0
