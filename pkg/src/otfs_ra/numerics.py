"""Complex Gaussian message algebra and shared numeric kernels.

Conventions
-----------
All densities are circularly symmetric complex Gaussians,

    CN(x | mu, v) = (pi v)^-1 exp(-|x - mu|^2 / v),

so ``variance`` always means E|x - mu|^2.  Messages may carry a
"non-informative" state (flat density); that state is an explicit flag,
never a literal infinity fed into arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Default clipping policy for message variances.  Divides that produce a
# non-positive precision, or a variance above the ceiling, collapse to the
# non-informative sentinel.
VAR_FLOOR = 1e-12
VAR_CEILING = 1e12


class InvalidDensityError(ValueError):
    """Raised when moments handed to project_to_gaussian are not proper."""


class CgBreakdownError(RuntimeError):
    """Raised when conjugate gradients hits a zero-curvature direction."""


# ============================================================
# Scalar message algebra
# ============================================================

@dataclass(frozen=True)
class GaussianMessage:
    """A scalar complex Gaussian belief (mean, variance) pair."""

    mean: complex
    variance: float
    informative: bool = True

    @classmethod
    def non_informative(cls) -> "GaussianMessage":
        return cls(0j, float("inf"), False)

    def density(self, x: complex) -> float:
        if not self.informative:
            raise ValueError("non-informative message has no proper density")
        v = self.variance
        return float(np.exp(-abs(x - self.mean) ** 2 / v) / (np.pi * v))


def gaussian_multiply(a: GaussianMessage, b: GaussianMessage,
                      var_floor: float = VAR_FLOOR) -> GaussianMessage:
    """Product of two Gaussian beliefs (precisions add)."""
    if not a.informative:
        return b
    if not b.informative:
        return a
    pa = 1.0 / max(a.variance, var_floor)
    pb = 1.0 / max(b.variance, var_floor)
    v = 1.0 / (pa + pb)
    m = v * (a.mean * pa + b.mean * pb)
    return GaussianMessage(m, v)


def gaussian_divide(num: GaussianMessage, den: GaussianMessage,
                    var_floor: float = VAR_FLOOR,
                    var_ceiling: float = VAR_CEILING) -> GaussianMessage:
    """Quotient of Gaussian beliefs with the negative-precision policy.

    A non-positive resulting precision (or a variance above the ceiling)
    yields the non-informative sentinel instead of an invalid message.
    """
    if not num.informative:
        return GaussianMessage.non_informative()
    if not den.informative:
        return num
    pn = 1.0 / max(num.variance, var_floor)
    pd = 1.0 / max(den.variance, var_floor)
    p = pn - pd
    if p <= 1.0 / var_ceiling:
        return GaussianMessage.non_informative()
    v = 1.0 / p
    m = v * (num.mean * pn - den.mean * pd)
    return GaussianMessage(m, v)


def project_to_gaussian(first_moment: complex,
                        second_central_moment: float) -> GaussianMessage:
    """KL projection onto the Gaussian family: match the two moments."""
    if not np.isfinite(first_moment) or not np.isfinite(second_central_moment):
        raise InvalidDensityError("moments must be finite")
    if second_central_moment < 0:
        raise InvalidDensityError("negative second central moment")
    return GaussianMessage(complex(first_moment), float(second_central_moment))


# ============================================================
# Array-form algebra (hot paths; non-informative == zero precision)
# ============================================================
#
# For bulk message updates we work with (mean, precision) arrays.  A zero
# precision entry is the non-informative state; its mean is kept at 0.

def precision_of(variances: np.ndarray, var_floor: float = VAR_FLOOR,
                 var_ceiling: float = VAR_CEILING) -> np.ndarray:
    """Map a variance array (may contain inf) to a clipped precision array."""
    v = np.asarray(variances, dtype=float)
    with np.errstate(divide="ignore"):
        p = np.where(np.isfinite(v) & (v < var_ceiling),
                     1.0 / np.maximum(v, var_floor), 0.0)
    return p


def variance_of(precisions: np.ndarray,
                var_ceiling: float = VAR_CEILING) -> np.ndarray:
    """Inverse of precision_of; zero precision maps to +inf variance."""
    p = np.asarray(precisions, dtype=float)
    with np.errstate(divide="ignore"):
        v = np.where(p > 1.0 / var_ceiling, 1.0 / np.maximum(p, 1e-300),
                     np.inf)
    return v


def combine_arrays(mean_a, prec_a, mean_b, prec_b):
    """Product of Gaussian arrays in (mean, precision) form."""
    p = prec_a + prec_b
    num = mean_a * prec_a + mean_b * prec_b
    with np.errstate(invalid="ignore", divide="ignore"):
        m = np.where(p > 0, num / np.where(p > 0, p, 1.0), 0.0)
    return m, p


def divide_arrays(mean_n, prec_n, mean_d, prec_d,
                  var_ceiling: float = VAR_CEILING):
    """Quotient in (mean, precision) form with the negative-precision policy."""
    p = prec_n - prec_d
    bad = p <= 1.0 / var_ceiling
    num = mean_n * prec_n - mean_d * prec_d
    with np.errstate(invalid="ignore", divide="ignore"):
        m = np.where(bad, 0.0, num / np.where(bad, 1.0, p))
    p = np.where(bad, 0.0, p)
    return m, p


# ============================================================
# Unitary DFT helpers
# ============================================================

def unitary_dft(x: np.ndarray, direction: str = "forward",
                axis: int = -1) -> np.ndarray:
    """Orthonormal DFT of arbitrary length (1/sqrt(N) both ways)."""
    if direction == "forward":
        return np.fft.fft(x, axis=axis, norm="ortho")
    if direction == "inverse":
        return np.fft.ifft(x, axis=axis, norm="ortho")
    raise ValueError(f"unknown direction {direction!r}")


def dft_matrix(n: int) -> np.ndarray:
    """Dense normalized DFT matrix F[a,b] = exp(-2i pi a b / n)/sqrt(n)."""
    idx = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(idx, idx) / n) / np.sqrt(n)


# ============================================================
# Conjugate gradients and probe-based diagonal estimation
# ============================================================

def cg_solve(apply_operator, rhs: np.ndarray, tol: float = 1e-6,
             max_iter: int = 200):
    """Solve A x = rhs for Hermitian positive definite A.

    ``rhs`` may be a vector (n,) or a block of right-hand sides (n, k);
    columns are iterated jointly and each stops refining once converged.
    Returns ``(x, residual)`` where residual is the achieved relative
    residual (max over columns).  The reported residual history is that of
    the best iterate kept so far, hence monotone non-increasing.
    """
    b = np.asarray(rhs, dtype=complex)
    single = b.ndim == 1
    if single:
        b = b[:, None]
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    bnorm = np.linalg.norm(b, axis=0)
    bnorm = np.where(bnorm > 0, bnorm, 1.0)
    rs = np.sum(np.abs(r) ** 2, axis=0)
    best_x = x.copy()
    best_res = np.sqrt(rs) / bnorm
    for it in range(max_iter):
        if np.all(best_res <= tol):
            break
        ap = apply_operator(p if not single else p[:, 0])
        if single and ap.ndim == 1:
            ap = ap[:, None]
        denom = np.real(np.sum(np.conj(p) * ap, axis=0))
        active = best_res > tol
        if np.any(active & (denom <= 0) & (rs > 0)):
            bad = int(np.argmax(active & (denom <= 0) & (rs > 0)))
            raise CgBreakdownError(
                f"zero/negative curvature at iteration {it} (column {bad})")
        denom = np.where(denom > 0, denom, 1.0)
        alpha = rs / denom
        alpha = np.where(active, alpha, 0.0)
        x = x + alpha[None, :] * p
        r = r - alpha[None, :] * ap
        rs_new = np.sum(np.abs(r) ** 2, axis=0)
        res = np.sqrt(rs_new) / bnorm
        improved = res < best_res
        best_x[:, improved] = x[:, improved]
        best_res = np.minimum(best_res, res)
        beta = np.where(rs > 0, rs_new / rs, 0.0)
        p = r + beta[None, :] * p
        rs = rs_new
    if single:
        return best_x[:, 0], float(best_res[0])
    return best_x, float(np.max(best_res))


def probe_diag_estimate(apply_inverse, dim: int, num_probes: int, rng,
                        floor: float = VAR_FLOOR) -> np.ndarray:
    """Stochastic estimate of diag(A^-1) with unit-modulus phase probes.

    apply_inverse must accept a (dim, K) block and return A^-1 applied
    column-wise.  The estimator mean over probes of Re(conj(p) * A^-1 p)
    is unbiased; negative entries are clamped to ``floor``.
    """
    if num_probes < 1:
        raise ValueError("need at least one probe")
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(dim, num_probes))
    probes = np.exp(1j * phases)
    sols = apply_inverse(probes)
    est = np.mean(np.real(np.conj(probes) * sols), axis=1)
    return np.maximum(est, floor)
