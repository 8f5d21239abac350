"""Gaussian message algebra, DFT helpers, CG and probe diagonals."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from otfs_ra.numerics import (CgBreakdownError, GaussianMessage,
                              InvalidDensityError, cg_solve,
                              combine_arrays, dft_matrix, divide_arrays,
                              gaussian_divide, gaussian_multiply,
                              precision_of, probe_diag_estimate,
                              project_to_gaussian, unitary_dft,
                              variance_of)


# ---------- scalar algebra ----------

def test_multiply_non_informative_identity():
    a = GaussianMessage(2.0 + 0j, 0.5)
    out = gaussian_multiply(a, GaussianMessage.non_informative())
    assert out.mean == a.mean and out.variance == a.variance


def test_multiply_symmetric_duplicate():
    a = GaussianMessage(1.0 + 0j, 1.0)
    out = gaussian_multiply(a, a)
    assert out.mean == pytest.approx(1.0)
    assert out.variance == pytest.approx(0.5)


def test_multiply_derived_closed_form():
    # cross-checked by numerically multiplying densities and renormalizing
    out = gaussian_multiply(GaussianMessage(2.0 + 0j, 0.5),
                            GaussianMessage(1.0 + 0j, 1.0))
    assert out.variance == pytest.approx(1.0 / 3.0)
    assert out.mean == pytest.approx(5.0 / 3.0)
    # quadrature cross-check on the real axis restricted product
    xs = np.linspace(-10, 10, 400001)
    pa = np.exp(-np.abs(xs - 2.0) ** 2 / 0.5)
    pb = np.exp(-np.abs(xs - 1.0) ** 2 / 1.0)
    w = pa * pb
    mean = np.trapezoid(xs * w, xs) / np.trapezoid(w, xs)
    assert mean == pytest.approx(5.0 / 3.0, abs=1e-6)


def test_divide_identity():
    out = gaussian_divide(GaussianMessage(2.0 + 0j, 0.5),
                          GaussianMessage(1.0 + 0j, 1.0))
    assert out.variance == pytest.approx(1.0)
    assert out.mean == pytest.approx(3.0)


def test_divide_self_non_informative():
    a = GaussianMessage(1.5 + 0.5j, 0.7)
    assert not gaussian_divide(a, a).informative


def test_divide_negative_precision_policy():
    out = gaussian_divide(GaussianMessage(0j, 1.0),
                          GaussianMessage(0j, 0.5))
    assert not out.informative


@given(st.tuples(
    st.floats(-5, 5), st.floats(0.1, 10),
    st.floats(-5, 5), st.floats(0.1, 10),
    st.floats(-5, 5), st.floats(0.1, 10)))
@settings(max_examples=100, deadline=None)
def test_multiply_commutative_associative(params):
    ma, va, mb, vb, mc, vc = params
    a = GaussianMessage(complex(ma), va)
    b = GaussianMessage(complex(mb), vb)
    c = GaussianMessage(complex(mc), vc)
    ab = gaussian_multiply(a, b)
    ba = gaussian_multiply(b, a)
    assert ab.mean == pytest.approx(ba.mean, rel=1e-12, abs=1e-12)
    assert ab.variance == pytest.approx(ba.variance, rel=1e-12)
    left = gaussian_multiply(ab, c)
    right = gaussian_multiply(a, gaussian_multiply(b, c))
    assert left.mean == pytest.approx(right.mean, rel=1e-10, abs=1e-10)
    assert left.variance == pytest.approx(right.variance, rel=1e-10)


@given(st.tuples(
    st.floats(-3, 3), st.floats(0.2, 5),
    st.floats(-3, 3), st.floats(0.2, 5)))
@settings(max_examples=100, deadline=None)
def test_divide_undoes_multiply(params):
    ma, va, mb, vb = params
    a = GaussianMessage(complex(ma), va)
    b = GaussianMessage(complex(mb), vb)
    back = gaussian_divide(gaussian_multiply(a, b), b)
    assert back.informative
    assert back.mean == pytest.approx(a.mean, rel=1e-10, abs=1e-10)
    assert back.variance == pytest.approx(a.variance, rel=1e-10)


def test_array_algebra_matches_scalar():
    rng = np.random.default_rng(7)
    m1 = rng.standard_normal(16) + 1j * rng.standard_normal(16)
    v1 = rng.uniform(0.2, 3.0, 16)
    m2 = rng.standard_normal(16) + 1j * rng.standard_normal(16)
    v2 = rng.uniform(0.2, 3.0, 16)
    mc, pc = combine_arrays(m1, precision_of(v1), m2, precision_of(v2))
    for i in range(16):
        ref = gaussian_multiply(GaussianMessage(m1[i], v1[i]),
                                GaussianMessage(m2[i], v2[i]))
        assert mc[i] == pytest.approx(ref.mean, rel=1e-12)
        assert 1.0 / pc[i] == pytest.approx(ref.variance, rel=1e-12)
    md, pd = divide_arrays(mc, pc, m2, precision_of(v2))
    assert np.allclose(md, m1, atol=1e-9)
    assert np.allclose(variance_of(pd), v1, rtol=1e-9)


def test_projection_identity_and_errors():
    g = project_to_gaussian(1.0 + 2.0j, 0.3)
    assert g.mean == 1.0 + 2.0j and g.variance == 0.3
    with pytest.raises(InvalidDensityError):
        project_to_gaussian(np.nan, 1.0)
    with pytest.raises(InvalidDensityError):
        project_to_gaussian(0.0, -0.1)


def test_projection_symmetric_two_point():
    # equal mixture at +-1, zero component variance
    mean = 0.5 * 1.0 + 0.5 * (-1.0)
    second = 0.5 * abs(1.0 - mean) ** 2 + 0.5 * abs(-1.0 - mean) ** 2
    g = project_to_gaussian(mean, second)
    assert g.mean == pytest.approx(0.0)
    assert g.variance == pytest.approx(1.0)


# ---------- DFT ----------

def test_dft_impulse_flat():
    x = np.zeros(4, dtype=complex)
    x[0] = 1.0
    assert np.allclose(unitary_dft(x), 0.5 * np.ones(4))


def test_dft_round_trip_and_parseval():
    rng = np.random.default_rng(3)
    for n in (5, 16, 480):   # includes a non-power-of-two production size
        x = rng.standard_normal(n) + 1j * rng.standard_normal(n)
        y = unitary_dft(x)
        assert np.linalg.norm(y) == pytest.approx(np.linalg.norm(x))
        back = unitary_dft(y, "inverse")
        assert np.linalg.norm(back - x) < 1e-12 * np.linalg.norm(x)


def test_dft_matrix_matches_fft():
    rng = np.random.default_rng(4)
    x = rng.standard_normal(12) + 1j * rng.standard_normal(12)
    assert np.allclose(dft_matrix(12) @ x, unitary_dft(x))


def test_double_forward_is_index_reversal():
    rng = np.random.default_rng(5)
    x = rng.standard_normal(9) + 1j * rng.standard_normal(9)
    ff = unitary_dft(unitary_dft(x))
    rev = np.concatenate([[x[0]], x[1:][::-1]])
    assert np.allclose(ff, rev, atol=1e-12)


# ---------- CG / probes ----------

def test_cg_identity_one_iteration():
    rhs = np.array([1.0, 2.0, 3.0], dtype=complex)
    x, res = cg_solve(lambda v: v, rhs, tol=1e-12, max_iter=5)
    assert np.allclose(x, rhs)
    assert res < 1e-12


def test_cg_diagonal():
    d = np.array([1.0, 2.0])
    x, _ = cg_solve(lambda v: d * v, np.array([1.0, 1.0], dtype=complex),
                    tol=1e-12, max_iter=10)
    assert np.allclose(x, [1.0, 0.5])


def test_cg_vs_dense_oracle():
    rng = np.random.default_rng(11)
    B = rng.standard_normal((16, 16)) + 1j * rng.standard_normal((16, 16))
    A = B @ B.conj().T + 16 * np.eye(16)
    rhs = rng.standard_normal(16) + 1j * rng.standard_normal(16)
    x, _ = cg_solve(lambda v: A @ v, rhs, tol=1e-12, max_iter=200)
    ref = np.linalg.solve(A, rhs)
    assert np.linalg.norm(x - ref) / np.linalg.norm(ref) < 1e-8


def test_cg_residual_monotone():
    rng = np.random.default_rng(12)
    B = rng.standard_normal((24, 24))
    A = B @ B.T + 2 * np.eye(24)
    rhs = rng.standard_normal(24).astype(complex)
    history = []

    def op(v):
        history.append(np.linalg.norm(A @ v))  # noqa: side channel unused
        return A @ v

    x, res = cg_solve(op, rhs, tol=1e-10, max_iter=100)
    # reported residual corresponds to the best iterate; re-solving with
    # fewer iterations can never report a smaller residual
    res_short = [cg_solve(lambda v: A @ v, rhs, tol=0.0, max_iter=k)[1]
                 for k in (2, 5, 10, 40)]
    assert all(res_short[i + 1] <= res_short[i] + 1e-14
               for i in range(len(res_short) - 1))


def test_cg_breakdown_reported():
    A = np.diag([1.0, -1.0])
    with pytest.raises(CgBreakdownError):
        cg_solve(lambda v: A @ v, np.array([0.0, 1.0], dtype=complex),
                 tol=1e-14, max_iter=10)


def test_cg_block_rhs():
    rng = np.random.default_rng(13)
    B = rng.standard_normal((10, 10))
    A = B @ B.T + 5 * np.eye(10)
    rhs = rng.standard_normal((10, 4)).astype(complex)
    x, res = cg_solve(lambda v: A @ v, rhs, tol=1e-10, max_iter=100)
    assert np.linalg.norm(A @ x - rhs) / np.linalg.norm(rhs) < 1e-8


def test_probe_identity_exact():
    rng = np.random.default_rng(1)
    est = probe_diag_estimate(lambda p: p, 6, 3, rng)
    assert np.allclose(est, 1.0)


def test_probe_diag_converges():
    rng = np.random.default_rng(2)
    d = np.array([1.0, 2.0, 4.0])
    est = probe_diag_estimate(lambda p: p / d[:, None], 3, 2000, rng)
    assert np.all(np.abs(est - 1.0 / d) / (1.0 / d) < 0.05)


def test_probe_scalar_exact():
    rng = np.random.default_rng(3)
    est = probe_diag_estimate(lambda p: 0.5 * p, 1, 1, rng)
    assert est[0] == pytest.approx(0.5)


def test_probe_error_scales_with_probes():
    rng = np.random.default_rng(9)
    n = 32
    B = rng.standard_normal((n, n))
    A = B @ B.T + n * np.eye(n)
    Ainv = np.linalg.inv(A)
    true_diag = np.diag(Ainv)
    errs = []
    for K in (10, 100, 1000):
        est = probe_diag_estimate(lambda p: Ainv @ p, n, K,
                                  np.random.default_rng(100 + K))
        errs.append(np.linalg.norm(est - true_diag) /
                    np.linalg.norm(true_diag))
    assert errs[2] < errs[0]
    # roughly 1/sqrt(K): two decades of probes buy ~10x accuracy
    assert errs[2] < errs[0] / 3.0
