"""Backend equivalence: the numba kernels must match the numpy reference."""

import numpy as np
import pytest

from headsim import kernels

HAVE_NUMBA = "numba" in kernels.available_backends()

needs_numba = pytest.mark.skipif(not HAVE_NUMBA, reason="numba backend unavailable")


def _both(fn_name, *args, copy_args=()):
    ref = getattr(kernels.get_backend("numpy"), fn_name)
    jit = getattr(kernels.get_backend("numba"), fn_name)
    ref_args = [a.copy() if i in copy_args else a for i, a in enumerate(args)]
    jit_args = [a.copy() if i in copy_args else a for i, a in enumerate(args)]
    return ref(*ref_args), jit(*jit_args), ref_args, jit_args


@needs_numba
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 2e-5)])
def test_layer_norm_forward_backward_equivalence(dtype, tol):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((37, 24)).astype(dtype)
    gamma = rng.standard_normal(24).astype(dtype)
    beta = rng.standard_normal(24).astype(dtype)
    dy = rng.standard_normal((37, 24)).astype(dtype)

    (y_r, m_r, s_r), (y_j, m_j, s_j), _, _ = _both("layer_norm_forward", x, gamma, beta, 1e-5)
    np.testing.assert_allclose(y_r, y_j, atol=tol)
    np.testing.assert_allclose(m_r, m_j, atol=tol)
    np.testing.assert_allclose(s_r, s_j, rtol=tol * 10)

    ref = kernels.get_backend("numpy").layer_norm_backward(dy, x, gamma, m_r, s_r)
    jit = kernels.get_backend("numba").layer_norm_backward(dy, x, gamma, m_j, s_j)
    for a, b in zip(ref, jit):
        np.testing.assert_allclose(a, b, atol=tol * 20)


@needs_numba
def test_softmax_equivalence():
    rng = np.random.default_rng(1)
    x = (rng.standard_normal((50, 17)) * 5).astype(np.float64)
    p_r = kernels.get_backend("numpy").softmax_lastdim(x)
    p_j = kernels.get_backend("numba").softmax_lastdim(x)
    np.testing.assert_allclose(p_r, p_j, atol=1e-14)
    assert np.allclose(p_j.sum(axis=1), 1.0)

    dp = rng.standard_normal(x.shape)
    np.testing.assert_allclose(
        kernels.get_backend("numpy").softmax_backward(dp, p_r),
        kernels.get_backend("numba").softmax_backward(dp, p_j),
        atol=1e-14,
    )


@needs_numba
def test_gelu_equivalence():
    rng = np.random.default_rng(2)
    x = (rng.standard_normal(1000) * 3).astype(np.float64)
    dy = rng.standard_normal(1000)
    np.testing.assert_allclose(
        kernels.get_backend("numpy").gelu_forward(x),
        kernels.get_backend("numba").gelu_forward(x),
        atol=1e-14,
    )
    np.testing.assert_allclose(
        kernels.get_backend("numpy").gelu_backward(dy, x),
        kernels.get_backend("numba").gelu_backward(dy, x),
        atol=1e-14,
    )


@needs_numba
def test_adamw_equivalence():
    rng = np.random.default_rng(3)
    p = rng.standard_normal(200)
    g = rng.standard_normal(200)
    m = np.zeros(200)
    v = np.zeros(200)
    p2, m2, v2 = p.copy(), m.copy(), v.copy()
    for step in (1, 2, 3):
        kernels.get_backend("numpy").adamw_update(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.01, step)
        kernels.get_backend("numba").adamw_update(p2, g, m2, v2, 1e-3, 0.9, 0.999, 1e-8, 0.01, step)
    np.testing.assert_allclose(p, p2, atol=1e-14)
    np.testing.assert_allclose(m, m2, atol=1e-14)
    np.testing.assert_allclose(v, v2, atol=1e-14)


@needs_numba
def test_value_noise_equivalence_and_determinism():
    a = kernels.get_backend("numpy").value_noise(40, 56, 8, 12345, 3)
    b = kernels.get_backend("numba").value_noise(40, 56, 8, 12345, 3)
    np.testing.assert_allclose(a, b, atol=1e-7)
    c = kernels.get_backend("numpy").value_noise(40, 56, 8, 12345, 3)
    assert np.array_equal(a, c)
    assert a.min() >= 0.0 and a.max() < 1.0
    d = kernels.get_backend("numpy").value_noise(40, 56, 8, 54321, 3)
    assert not np.array_equal(a, d)


@needs_numba
def test_rgb_to_hsv_equivalence_and_matplotlib_convention():
    rng = np.random.default_rng(4)
    rgb = rng.uniform(0, 1, size=(500, 3)).astype(np.float64)
    a = kernels.get_backend("numpy").rgb_to_hsv(rgb)
    b = kernels.get_backend("numba").rgb_to_hsv(rgb)
    np.testing.assert_allclose(a, b, atol=1e-12)

    from matplotlib.colors import rgb_to_hsv as mpl_rgb_to_hsv

    np.testing.assert_allclose(a, mpl_rgb_to_hsv(rgb), atol=1e-12)


def test_backend_selection_roundtrip():
    original = kernels.backend_name()
    try:
        prev = kernels.set_backend("numpy")
        assert prev == original
        assert kernels.backend_name() == "numpy"
        with pytest.raises(ValueError):
            kernels.set_backend("cuda")
    finally:
        kernels.set_backend(original)
