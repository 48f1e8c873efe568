import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qmdpnet import kernels

needs_compiled = pytest.mark.skipif(not kernels.compiled_available(), reason="compiled kernels not built")


def test_backend_selection_is_reported():
    assert kernels.BACKEND in ("compiled", "python")
    assert set(kernels.get_backend("python")) == {
        "conv2d_forward", "conv2d_backward_input", "conv2d_backward_kernel",
        "group_max_forward", "group_max_backward"}


def test_unknown_compiled_request_without_build(monkeypatch):
    monkeypatch.setattr(kernels, "_COMPILED", None)
    with pytest.raises(RuntimeError):
        kernels.get_backend("compiled")


@needs_compiled
@given(st.integers(1, 3), st.integers(1, 7), st.integers(1, 7), st.integers(1, 4), st.integers(1, 5),
       st.sampled_from([1, 3, 5]), st.integers(0, 10_000))
def test_compiled_conv_matches_numpy(B, H, W, ci, co, k, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(B, H, W, ci))
    kern = rng.normal(size=(k, k, ci, co))
    gy = rng.normal(size=(B, H, W, co))
    py, cc = kernels.get_backend("python"), kernels.get_backend("compiled")
    np.testing.assert_allclose(cc["conv2d_forward"](x, kern), py["conv2d_forward"](x, kern), atol=1e-12)
    np.testing.assert_allclose(cc["conv2d_backward_input"](gy, kern), py["conv2d_backward_input"](gy, kern),
                               atol=1e-12)
    np.testing.assert_allclose(cc["conv2d_backward_kernel"](x, gy, k, k),
                               py["conv2d_backward_kernel"](x, gy, k, k), atol=1e-11)


@needs_compiled
@given(st.integers(1, 3), st.integers(1, 6), st.integers(1, 4), st.integers(1, 5), st.integers(0, 10_000))
def test_compiled_group_max_matches_numpy(B, H, groups, per, seed):
    rng = np.random.default_rng(seed)
    x = rng.integers(-2, 3, size=(B, H, H, groups * per)).astype(float)  # many ties
    py, cc = kernels.get_backend("python"), kernels.get_backend("compiled")
    y1, i1 = py["group_max_forward"](x, groups)
    y2, i2 = cc["group_max_forward"](x, groups)
    np.testing.assert_array_equal(y1, y2)
    np.testing.assert_array_equal(i1, i2)
    gy = rng.normal(size=y1.shape)
    np.testing.assert_array_equal(py["group_max_backward"](gy, i1, groups * per),
                                  cc["group_max_backward"](gy, i2, groups * per))
