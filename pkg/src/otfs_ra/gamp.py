"""Damped generalized approximate message passing over Y = A C + E.

The engine is matrix-free: ``A`` is any object exposing forward/adjoint
maps plus their element-wise-squared counterparts.  Dense matrices get
exact squared maps; FFT-style operators use a uniform-magnitude
approximation parameterized by the operator's Frobenius norm (the
standard scalar-variance simplification).

Denoisers are callables (r_hat, tau_r) -> (mean, var) applied element
by element; stateful denoisers may stash posterior statistics for an
outer EM loop via the per-iteration hook.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class GampDivergenceError(RuntimeError):
    def __init__(self, iteration: int, norm_ratio: float):
        super().__init__(
            f"estimate norm grew {norm_ratio:.1e}x by iteration {iteration}")
        self.iteration = iteration


class DenseOperator:
    """Exact element-wise GAMP operator from a materialized matrix."""

    def __init__(self, A: np.ndarray):
        self.A = np.asarray(A)
        self.A2 = np.abs(self.A) ** 2
        self.shape = self.A.shape

    def forward(self, C):
        return self.A @ C

    def adjoint(self, Y):
        return self.A.conj().T @ Y

    def abs2_forward(self, T):
        return self.A2 @ T

    def abs2_adjoint(self, T):
        return self.A2.T @ T


class UniformVarianceOperator:
    """Matrix-free operator with scalar-variance squared maps.

    ``frob2`` is ||A||_F^2 (exact or probe-estimated); the squared maps
    spread it uniformly, which is the usual simplification when exact
    row/column magnitudes are unavailable.
    """

    def __init__(self, forward: Callable, adjoint: Callable,
                 shape: tuple, frob2: float):
        self._fwd = forward
        self._adj = adjoint
        self.shape = shape
        self.frob2 = float(frob2)

    def forward(self, C):
        return self._fwd(C)

    def adjoint(self, Y):
        return self._adj(Y)

    def abs2_forward(self, T):
        m, n = self.shape
        scale = self.frob2 / (m * n)
        s = np.sum(T, axis=0, keepdims=True) * scale
        return np.broadcast_to(s, (m,) + T.shape[1:]).copy()

    def abs2_adjoint(self, T):
        m, n = self.shape
        scale = self.frob2 / (m * n)
        s = np.sum(T, axis=0, keepdims=True) * scale
        return np.broadcast_to(s, (n,) + T.shape[1:]).copy()


def estimate_frob2(forward: Callable, n_cols: int, n_probes: int,
                   rng: np.random.Generator) -> float:
    """Stochastic ||A||_F^2 via E||A z||^2 with unit-modulus probes."""
    total = 0.0
    z = np.exp(1j * rng.uniform(0, 2 * np.pi, size=(n_cols, n_probes)))
    out = forward(z)
    total = np.sum(np.abs(out) ** 2) / n_probes
    return float(total)


@dataclass
class GampState:
    c_hat: np.ndarray
    tau_c: np.ndarray
    s_hat: np.ndarray
    z_hat: Optional[np.ndarray] = None
    tau_z: Optional[np.ndarray] = None
    r_hat: Optional[np.ndarray] = None
    tau_r: Optional[np.ndarray] = None
    noise_var: float = 1.0
    iteration: int = 0
    history: list = field(default_factory=list)


def gaussian_denoiser(prior_mean=0.0, prior_var=1.0):
    """Element-wise CN(prior_mean, prior_var) posterior update."""
    def denoise(r_hat, tau_r):
        v = 1.0 / (1.0 / prior_var + 1.0 / tau_r)
        m = v * (prior_mean / prior_var + r_hat / tau_r)
        return m, v * np.ones_like(tau_r)
    return denoise


def uniform_constellation_denoiser(points: np.ndarray,
                                   known_mask: Optional[np.ndarray] = None,
                                   known_values: Optional[np.ndarray] = None):
    """Uniform discrete prior over ``points``; known cells pinned.

    known_mask/known_values (if given) have the shape of the estimate;
    masked entries behave as zero-variance pilots.
    """
    pts = np.asarray(points)

    def denoise(r_hat, tau_r):
        t = np.maximum(tau_r, 1e-12)
        d2 = np.abs(r_hat[..., None] - pts) ** 2
        logw = -d2 / t[..., None]
        logw -= logw.max(axis=-1, keepdims=True)
        w = np.exp(logw)
        w /= w.sum(axis=-1, keepdims=True)
        mean = np.sum(w * pts, axis=-1)
        second = np.sum(w * np.abs(pts) ** 2, axis=-1)
        var = np.maximum(second - np.abs(mean) ** 2, 0.0)
        if known_mask is not None:
            mean = np.where(known_mask, known_values, mean)
            var = np.where(known_mask, 0.0, var)
        return mean, var
    return denoise


def gamp_run(op, Y: np.ndarray, noise_var: float, denoiser,
             damp: float = 0.5, max_iter: int = 50, tol: float = 1e-6,
             init_mean: Optional[np.ndarray] = None,
             init_var: Optional[np.ndarray] = None,
             hook: Optional[Callable[[GampState], None]] = None,
             var_floor: float = 1e-12) -> GampState:
    """Run damped GAMP; returns the final state.

    Stops when ||C(t+1) - C(t)||_F^2 <= tol ||C(t)||_F^2 or at max_iter.
    Raises GampDivergenceError if the estimate norm explodes.
    """
    Y = np.asarray(Y)
    m, n = op.shape
    cols = Y.shape[1:] if Y.ndim > 1 else ()
    shape_c = (n,) + cols
    c_hat = np.zeros(shape_c, dtype=complex) if init_mean is None \
        else init_mean.astype(complex).copy()
    tau_c = np.ones(shape_c) if init_var is None else init_var.copy()
    state = GampState(c_hat=c_hat, tau_c=tau_c,
                      s_hat=np.zeros_like(Y, dtype=complex),
                      noise_var=float(noise_var))
    norm0 = max(np.linalg.norm(state.c_hat), 1.0)

    for it in range(max_iter):
        state.iteration = it
        tau_p = np.maximum(op.abs2_forward(state.tau_c), var_floor)
        p_hat = op.forward(state.c_hat) - tau_p * state.s_hat
        sig = state.noise_var
        tau_z = tau_p * sig / (tau_p + sig)
        z_hat = (tau_p * Y + sig * p_hat) / (tau_p + sig)
        tau_s = (tau_p - tau_z) / tau_p ** 2
        s_new = (z_hat - p_hat) / tau_p
        state.s_hat = damp * s_new + (1 - damp) * state.s_hat
        tau_r = 1.0 / np.maximum(op.abs2_adjoint(tau_s), 1.0 / 1e12)
        r_hat = state.c_hat + tau_r * op.adjoint(state.s_hat)
        state.z_hat, state.tau_z = z_hat, tau_z
        state.r_hat, state.tau_r = r_hat, tau_r
        mean, var = denoiser(r_hat, tau_r)
        c_prev = state.c_hat
        state.c_hat = damp * mean + (1 - damp) * c_prev
        state.tau_c = np.maximum(var, 0.0)
        if hook is not None:
            hook(state)
        delta = np.linalg.norm(state.c_hat - c_prev) ** 2
        ref = np.linalg.norm(c_prev) ** 2
        state.history.append(delta / max(ref, 1e-30))
        cn = np.linalg.norm(state.c_hat)
        if cn > 1e3 * norm0:
            raise GampDivergenceError(it, cn / norm0)
        if ref > 0 and delta <= tol * ref:
            break
    return state
