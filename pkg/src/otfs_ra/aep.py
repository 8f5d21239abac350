"""Centralized refinement by structured expectation propagation.

Three modules pass Gaussian messages over the factorized model
y' = sum_{u,q} diag(b_q) F^H diag(c^F) F_b x_u + e:

* interference cancellation: soft SIC at the basis-component and
  per-device sum nodes, producing likelihoods for c^F and x^F;
* channel refinement: per-(q, u, antenna) LMMSE on the L+1 taps behind
  the partial-DFT constraint c^F = F_{1:L+1} c;
* symbol refinement: pooled-likelihood LMMSE on x through F_b, solved
  matrix-free (conjugate gradients plus probe diagonal estimation).

Messages that follow an interference-cancellation step are damped in
distribution space.  All means are complex arrays; variances are kept
scalar exactly where the derivation scalarizes them (empirical average
after the F^H node, trace average in the tap solve).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .channel import BemCoefficients, bem_frequencies
from .numerics import (cg_solve, combine_arrays, divide_arrays,
                       precision_of, probe_diag_estimate, variance_of)

# ---------------------------------------------------------------------------
# transform helpers
# ---------------------------------------------------------------------------


def fb_apply(x: np.ndarray, M: int, N: int) -> np.ndarray:
    """x (delay-Doppler vec, column-major) -> full DFT of the time body."""
    shape = x.shape
    grid = x.reshape(shape[:-1] + (N, M)).swapaxes(-1, -2)
    body = np.fft.ifft(grid, axis=-1, norm="ortho")
    body = body.swapaxes(-1, -2).reshape(shape)
    return np.fft.fft(body, axis=-1, norm="ortho")


def fb_adjoint(y: np.ndarray, M: int, N: int) -> np.ndarray:
    """Adjoint (= inverse, the map is unitary) of fb_apply."""
    shape = y.shape
    body = np.fft.ifft(y, axis=-1, norm="ortho")
    grid = body.reshape(shape[:-1] + (N, M)).swapaxes(-1, -2)
    x = np.fft.fft(grid, axis=-1, norm="ortho")
    return x.swapaxes(-1, -2).reshape(shape)


def fb_abs2_diag(tau: np.ndarray, M: int, N: int) -> np.ndarray:
    """diag(F_b diag(tau) F_b^H) exactly.

    Row m of F_b has magnitude 1/sqrt(M) on the M cells whose Doppler
    index equals m mod N and zero elsewhere, so the diagonal is a
    Doppler-binned average of tau.
    """
    shape = tau.shape
    binned = tau.reshape(shape[:-1] + (N, M)).sum(axis=-1) / M  # (..., N)
    idx = np.resize(np.arange(N), M * N)
    return binned[..., idx]


def partial_dft(MN: int, n_cols: int) -> np.ndarray:
    """First n_cols columns of the orthonormal MN-point DFT matrix."""
    m = np.arange(MN)
    l = np.arange(n_cols)
    return np.exp(-2j * np.pi * np.outer(m, l) / MN) / math.sqrt(MN)


# ---------------------------------------------------------------------------
# message algebra pieces
# ---------------------------------------------------------------------------

def mean_field_likelihood(d_mean, d_tau, other_mean, other_var,
                          floor=1e-12):
    """Divide a product-node message by the soft complementary factor.

    Given d = c * x with a Gaussian belief on the complementary variable
    (posterior mean/variance), the effective likelihood of the remaining
    variable has mean d * conj(m) / (|m|^2 + v) and variance
    tau_d / (|m|^2 + v).
    """
    denom = np.maximum(np.abs(other_mean) ** 2 + other_var, floor)
    return d_mean * np.conj(other_mean) / denom, d_tau / denom


def damp_gaussian(new_mean, new_var, old_mean, old_var, eta):
    """Geometric (precision-space) interpolation of Gaussian messages."""
    p = eta / new_var + (1.0 - eta) / old_var
    var = 1.0 / p
    mean = var * (eta * new_mean / new_var
                  + (1.0 - eta) * old_mean / old_var)
    return mean, var


def cer_solve(FL: np.ndarray, lik_mean: np.ndarray, lik_tau: np.ndarray,
              prior_mean: np.ndarray, prior_tau: np.ndarray,
              ridge: float = 0.0):
    """Batched tap-domain LMMSE behind the partial-DFT constraint.

    FL is (MN, L+1); likelihood messages are element-wise over the MN
    frequency cells, the prior is isotropic over the L+1 taps.  Returns
    the posterior mean (..., L+1) and the trace-averaged variance (...).
    """
    Lp1 = FL.shape[1]
    w = 1.0 / np.maximum(lik_tau, 1e-30)
    A = np.einsum("ml,...m,mk->...lk", np.conj(FL), w, FL)
    A = A + ((1.0 / prior_tau + ridge)[..., None, None]
             * np.eye(Lp1))
    rhs = np.einsum("ml,...m->...l", np.conj(FL), w * lik_mean)
    rhs = rhs + prior_mean / prior_tau[..., None]
    try:
        cov = np.linalg.inv(A)
    except np.linalg.LinAlgError:
        cov = np.linalg.inv(A + 1e-10 * np.eye(Lp1))
    c_hat = np.einsum("...lk,...k->...l", cov, rhs)
    tau_c = np.real(np.trace(cov, axis1=-2, axis2=-1)) / Lp1
    return c_hat, np.maximum(tau_c, 1e-30)


# ---------------------------------------------------------------------------
# warm start from the initial phase
# ---------------------------------------------------------------------------

def expand_initial_estimate(c_hat_list, tau_c_list, devices, cfg):
    """Re-express low-resolution coefficient estimates on the finer grid.

    c_hat_list / tau_c_list hold one (U (Q_I+1)(L+1), N_a) array per
    satellite.  Each coarse basis frequency 2 pi q'/(MN) coincides with
    the fine-grid frequency 2 pi (2q')/(2MN); those slots are copied
    (rescaled to the refinement variable convention), the remaining
    frequencies start at zero with the per-tap average variance so no
    energy is invented.  Returns (mean (Q_R+1, Ua, S, Na, L+1),
    tau (Q_R+1, Ua, S, Na)).
    """
    S = len(c_hat_list)
    Ua = len(devices)
    Lp1 = cfg.L + 1
    Qi, Qr = cfg.Q_I, cfg.Q_R
    MN = cfg.MN
    scale = math.sqrt(MN)
    mean = np.zeros((Qr + 1, Ua, S, cfg.n_ant, Lp1), dtype=complex)
    tau = np.zeros((Qr + 1, Ua, S, cfg.n_ant))
    mapped = np.zeros(Qr + 1, dtype=bool)
    shift_i, shift_r = math.ceil(Qi / 2), math.ceil(Qr / 2)

    for s in range(S):
        ch = c_hat_list[s].reshape(cfg.U, Qi + 1, Lp1, cfg.n_ant)
        tc = tau_c_list[s].reshape(cfg.U, Qi + 1, Lp1, cfg.n_ant)
        for q1 in range(Qi + 1):
            q2 = 2 * (q1 - shift_i) + shift_r
            if not 0 <= q2 <= Qr:
                continue
            mapped[q2] = True
            for iu, u in enumerate(devices):
                mean[q2, iu, s] = scale * ch[u, q1].T
                tau[q2, iu, s] = MN * tc[u, q1].mean(axis=0)
    # unseen frequencies: zero mean, inflated to the per-tap average
    if mapped.any() and not mapped.all():
        avg = tau[mapped].mean(axis=0)
        tau[~mapped] = np.maximum(avg, 1e-12)
    tau = np.maximum(tau, 1e-12)
    return mean, tau


# ---------------------------------------------------------------------------
# the solver
# ---------------------------------------------------------------------------

@dataclass
class RefinementResult:
    """Refined channel and symbols for the active-device set."""

    c_hat: np.ndarray        # (Q+1, Ua, S, Na, L+1) posterior tap means
    c_tau: np.ndarray        # (Q+1, Ua, S, Na) isotropic variances
    bem: BemCoefficients     # same content in reconstruction convention
    x_hat: np.ndarray        # (Ua, MN) posterior symbol means
    x_tau: np.ndarray        # (Ua, MN) posterior symbol variances
    devices: tuple
    iterations: dict = field(default_factory=dict)


class CentralizedAep:
    """Message-passing refinement over time-angle observations.

    ``y`` is (S, N_a, MN), the post-prefix received body per angular
    sample; ``sigma2`` the per-satellite noise variances.  Channel and
    symbol priors are injected through set_channel_prior /
    set_symbol_prior before run().
    """

    def __init__(self, y: np.ndarray, sigma2: np.ndarray, devices, cfg,
                 Q: Optional[int] = None,
                 rng: Optional[np.random.Generator] = None):
        self.cfg = cfg
        self.y = np.asarray(y, dtype=complex)
        self.S, self.Na, self.MN = self.y.shape
        self.sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=float),
                                      (self.S,)).copy()
        self.devices = tuple(int(u) for u in devices)
        self.Ua = len(self.devices)
        self.Q = cfg.Q_R if Q is None else Q
        self.R = cfg.R_refine
        self.omega = bem_frequencies(self.Q, self.R, cfg.M, cfg.N)
        n = np.arange(self.MN)
        self.bq = np.exp(1j * np.outer(self.omega, n))   # (Q+1, MN)
        self.FL = partial_dft(self.MN, cfg.L + 1)
        # exact variance propagation through the partial DFT: each row
        # of FL has squared norm (L+1)/MN, so a scalar tap variance
        # spreads to this fraction per frequency bin
        self.tap_spread = (cfg.L + 1) / self.MN
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.ceiling = cfg.var_ceiling
        self.floor = cfg.var_floor

        Q1, Ua, S, Na, MN = self.Q + 1, self.Ua, self.S, self.Na, self.MN
        # channel-side messages
        self.lc = np.zeros((Q1, Ua, S, Na, cfg.L + 1), dtype=complex)
        self.lc_tau = np.full((Q1, Ua, S, Na), 1.0)
        self.c_prior = self.lc.copy()
        self.c_prior_tau = self.lc_tau.copy()
        self.lcf = np.zeros((Q1, Ua, S, Na, MN), dtype=complex)
        self.rcf_mean = None
        self.rcf_tau = None
        self.cf_post_mean = np.zeros((Q1, Ua, S, Na, MN), dtype=complex)
        self.cf_post_var = np.full((Q1, Ua, S, Na, MN), self.ceiling)
        self.c_hat = self.lc.copy()
        self.c_tau = self.lc_tau.copy()
        # symbol-side messages
        self.rx_mean = np.zeros((Ua, MN), dtype=complex)
        self.rx_tau = np.full((Ua, MN), 1.0)
        self.lx_mean = np.zeros((Ua, MN), dtype=complex)
        self.lx_prec = np.zeros((Ua, MN))
        self.peer_mean = np.zeros((Ua, MN), dtype=complex)
        self.peer_prec = np.zeros((Ua, MN))
        self.lxbar_mean = np.zeros((Ua, MN), dtype=complex)
        self.lxbar_prec = np.zeros((Ua, MN))
        self.rxbar_mean = np.zeros((Ua, MN), dtype=complex)
        self.rxbar_tau = np.full((Ua, MN), 1.0)
        self.lxf_mean = None
        self.lxf_tau = None
        self.rxf_mean = np.zeros((Q1, Ua, S, Na, MN), dtype=complex)
        self.rxf_tau = np.full((Q1, Ua, S, Na, MN), self.ceiling)
        self.xf_post_mean = np.zeros((Ua, MN), dtype=complex)
        self.xf_post_var = np.full((Ua, MN), self.ceiling)
        self.x_hat = np.zeros((Ua, MN), dtype=complex)
        self.x_tau = np.full((Ua, MN), 1.0)
        self.x_pinned = None
        # damped IC outputs
        self.rdb_mean = None
        self.rdb_tau = None
        self.rdp_mean = None
        self.rdp_tau = None
        self.iterations = {"outer": 0, "channel": 0, "symbol": 0}

    # -- priors ------------------------------------------------------------

    def set_channel_prior(self, mean: np.ndarray, tau: np.ndarray) -> None:
        """Tap-domain messages (Q+1, Ua, S, Na, L+1) / scalar variances.

        The prior is a leaf factor of the model and anchors every tap
        solve; the running message toward interference cancellation
        starts out equal to it.
        """
        self.c_prior = np.asarray(mean, dtype=complex).copy()
        self.c_prior_tau = np.clip(np.asarray(tau, dtype=float),
                                   self.floor, self.ceiling)
        self.lc = self.c_prior.copy()
        self.lc_tau = self.c_prior_tau.copy()
        self.lcf = np.einsum("ml,...l->...m", self.FL, self.lc)
        self.c_hat = self.lc.copy()
        self.c_tau = self.lc_tau.copy()

    def set_symbol_prior(self, mean: np.ndarray, tau: np.ndarray,
                         pinned: Optional[np.ndarray] = None) -> None:
        """Gaussian messages on the DD symbols, (Ua, MN).

        Cells flagged in `pinned` (known pilot and guard symbols) keep
        their prior through every refresh; the prior factor at a known
        cell is a leaf, so its message never changes.  Data cells follow
        the flat-prior update where the outbound extrinsic becomes the
        next inbound message.
        """
        self.rx_mean = np.asarray(mean, dtype=complex).copy()
        self.rx_tau = np.clip(np.asarray(tau, dtype=float),
                              self.floor, self.ceiling)
        if pinned is None:
            self.x_pinned = None
        else:
            self.x_pinned = np.asarray(pinned, dtype=bool).copy()
            self.pin_mean = self.rx_mean[self.x_pinned].copy()
            self.pin_tau = self.rx_tau[self.x_pinned].copy()
        self.rxbar_mean = fb_apply(self.rx_mean, self.cfg.M, self.cfg.N)
        self.rxbar_tau = fb_abs2_diag(self.rx_tau, self.cfg.M, self.cfg.N)
        self.x_hat = self.rx_mean.copy()
        self.x_tau = self.rx_tau.copy()

    def set_peer_prior(self, mean: np.ndarray, prec: np.ndarray) -> None:
        """Extra Gaussian factor on x from cooperating peers."""
        self.peer_mean = np.asarray(mean, dtype=complex).copy()
        self.peer_prec = np.asarray(prec, dtype=float).copy()

    # -- message stages ----------------------------------------------------

    def _push_x_posterior(self) -> None:
        """Posterior of x^F and the per-branch messages derived from it."""
        m, p = combine_arrays(self.rxbar_mean,
                              precision_of(self.rxbar_tau,
                                           self.floor, self.ceiling),
                              self.lxbar_mean, self.lxbar_prec)
        self.xf_post_mean = m
        self.xf_post_var = variance_of(p, self.ceiling)
        self.xf_post_var = np.minimum(self.xf_post_var, self.ceiling)
        if self.lxf_tau is None:
            self.rxf_mean = np.broadcast_to(
                m[None, :, None, None, :], self.rxf_mean.shape).copy()
            self.rxf_tau = np.broadcast_to(
                self.xf_post_var[None, :, None, None, :],
                self.rxf_tau.shape).copy()
            return
        lik_prec = precision_of(self.lxf_tau, self.floor, self.ceiling)
        bm, bp = divide_arrays(m[None, :, None, None, :], p[None, :, None,
                                                            None, :],
                               self.lxf_mean, lik_prec)
        self.rxf_mean = bm
        self.rxf_tau = np.clip(variance_of(bp, self.ceiling),
                               self.floor, self.ceiling)

    def _ic_pass(self) -> dict:
        """Soft interference cancellation through the product/sum chain."""
        lcf_tau = self.lc_tau[..., None] * self.tap_spread
        ldp_mean = self.rxf_mean * self.lcf
        ldp_tau = (self.rxf_tau * lcf_tau
                   + np.abs(self.rxf_mean) ** 2 * lcf_tau
                   + np.abs(self.lcf) ** 2 * self.rxf_tau)
        ldp_tau = np.minimum(ldp_tau, self.ceiling)

        ldw_mean = ldp_mean.sum(axis=1)            # (Q+1, S, Na, MN)
        ldw_tau = ldp_tau.sum(axis=1)
        ldf_mean = np.fft.ifft(ldw_mean, axis=-1, norm="ortho")
        ldf_tau = ldw_tau.mean(axis=-1)            # scalar per (q, s, na)
        bq = self.bq[:, None, None, :]
        ldb_mean = bq * ldf_mean
        ldb_tau = ldf_tau

        tot_mean = ldb_mean.sum(axis=0)
        tot_tau = ldb_tau.sum(axis=0)
        rdb_mean = self.y[None] - (tot_mean[None] - ldb_mean)
        rdb_tau = self.sigma2[None, :, None] + (tot_tau[None] - ldb_tau)
        if self.rdb_mean is not None:
            rdb_mean, rdb_tau = damp_gaussian(
                rdb_mean, rdb_tau[..., None],
                self.rdb_mean, self.rdb_tau[..., None],
                self.cfg.eta_eps)
            rdb_tau = rdb_tau.mean(axis=-1)
        self.rdb_mean, self.rdb_tau = rdb_mean, rdb_tau

        rdf_mean = np.conj(bq) * rdb_mean
        rdw_mean = np.fft.fft(rdf_mean, axis=-1, norm="ortho")
        rdw_tau = rdb_tau

        totp_mean = ldp_mean.sum(axis=1, keepdims=True)
        totp_tau = ldp_tau.sum(axis=1, keepdims=True)
        rdp_mean = rdw_mean[:, None] - (totp_mean - ldp_mean)
        rdp_tau = rdw_tau[:, None, :, :, None] + (totp_tau - ldp_tau)
        if self.rdp_mean is not None:
            rdp_mean, rdp_tau = damp_gaussian(rdp_mean, rdp_tau,
                                              self.rdp_mean, self.rdp_tau,
                                              self.cfg.eta_eps)
        rdp_tau = np.minimum(rdp_tau, self.ceiling)
        self.rdp_mean, self.rdp_tau = rdp_mean, rdp_tau
        return {"ldp_mean": ldp_mean, "ldp_tau": ldp_tau,
                "ldb_mean": ldb_mean, "ldb_tau": ldb_tau,
                "rdb_mean": rdb_mean, "rdb_tau": rdb_tau}

    def _channel_likelihood(self) -> None:
        other_mean = self.xf_post_mean[None, :, None, None, :]
        other_var = self.xf_post_var[None, :, None, None, :]
        self.rcf_mean, self.rcf_tau = mean_field_likelihood(
            self.rdp_mean, self.rdp_tau, other_mean, other_var)
        self.rcf_tau = np.clip(self.rcf_tau, self.floor, self.ceiling)

    def _symbol_likelihood(self) -> None:
        self.lxf_mean, self.lxf_tau = mean_field_likelihood(
            self.rdp_mean, self.rdp_tau,
            self.cf_post_mean, self.cf_post_var)
        self.lxf_tau = np.clip(self.lxf_tau, self.floor, self.ceiling)

    def _cer_step(self) -> None:
        c_hat, tau_c = cer_solve(self.FL, self.rcf_mean, self.rcf_tau,
                                 self.c_prior, self.c_prior_tau)
        self.c_hat, self.c_tau = c_hat, tau_c
        inv = 1.0 / tau_c - 1.0 / self.c_prior_tau
        ok = inv > 1.0 / self.ceiling
        rt = np.where(ok, 1.0 / np.where(ok, inv, 1.0), self.ceiling)
        rc = np.where(
            ok[..., None],
            rt[..., None] * (c_hat / tau_c[..., None]
                             - self.c_prior / self.c_prior_tau[..., None]),
            c_hat)
        # extrinsic toward the interference-cancellation side; the leaf
        # prior itself stays untouched for the next tap solve
        self.lc = rc
        self.lc_tau = np.clip(rt, self.floor, self.ceiling)
        self.lcf = np.einsum("ml,...l->...m", self.FL, self.lc)

    def _update_cf_posterior(self) -> None:
        self.cf_post_mean = np.einsum("ml,...l->...m", self.FL, self.c_hat)
        var = np.broadcast_to((self.c_tau * self.tap_spread)[..., None],
                              self.cf_post_mean.shape)
        self.cf_post_var = np.clip(var, self.floor, self.ceiling)

    def _sdr_step(self) -> None:
        cfg = self.cfg
        prec = precision_of(self.lxf_tau, self.floor, self.ceiling)
        pooled_prec = prec.sum(axis=(0, 2, 3))
        pooled_num = (self.lxf_mean * prec).sum(axis=(0, 2, 3))
        with np.errstate(invalid="ignore", divide="ignore"):
            self.lxbar_mean = np.where(pooled_prec > 0,
                                       pooled_num
                                       / np.maximum(pooled_prec, 1e-300),
                                       0.0)
        self.lxbar_prec = pooled_prec

        prior_prec = precision_of(self.rx_tau, self.floor, self.ceiling)
        prior_prec = np.maximum(prior_prec, 1.0 / self.ceiling)
        x_hat = np.zeros_like(self.rx_mean)
        x_tau = np.zeros_like(self.rx_tau)
        for iu in range(self.Ua):
            pp = pooled_prec[iu]
            qq = prior_prec[iu]

            def apply_a(v):
                if v.ndim == 1:
                    return fb_adjoint(pp * fb_apply(v, cfg.M, cfg.N),
                                      cfg.M, cfg.N) + qq * v
                w = pp * fb_apply(v.T, cfg.M, cfg.N)
                return fb_adjoint(w, cfg.M, cfg.N).T + qq[:, None] * v

            rhs = fb_adjoint(pooled_num[iu], cfg.M, cfg.N) \
                + qq * self.rx_mean[iu]
            if cfg.debug_dense:
                # rows of fb_apply(eye) are transformed basis vectors,
                # i.e. the columns of the dense operator
                Fb = fb_apply(np.eye(self.MN, dtype=complex),
                              cfg.M, cfg.N).T
                A = Fb.conj().T @ np.diag(pp) @ Fb + np.diag(qq)
                cov = np.linalg.inv(A)
                x_hat[iu] = cov @ rhs
                x_tau[iu] = np.maximum(np.real(np.diag(cov)), self.floor)
            else:
                sol, _ = cg_solve(apply_a, rhs, tol=cfg.cg_tol,
                                  max_iter=cfg.cg_max_iter)
                x_hat[iu] = sol

                def apply_inv(block):
                    out, _ = cg_solve(apply_a, block, tol=cfg.cg_tol,
                                      max_iter=cfg.cg_max_iter)
                    return out

                x_tau[iu] = probe_diag_estimate(apply_inv, self.MN,
                                                cfg.K_p, self.rng,
                                                self.floor)
        self.x_hat, self.x_tau = x_hat, np.minimum(x_tau, self.ceiling)

        # extrinsic toward the transform factor, then the refreshed prior
        post_prec = precision_of(self.x_tau, self.floor, self.ceiling)
        lm, lp = divide_arrays(self.x_hat, post_prec,
                               self.rx_mean, prior_prec)
        self.lx_mean, self.lx_prec = lm, lp
        nm, np_ = combine_arrays(lm, lp, self.peer_mean, self.peer_prec)
        self.rx_mean = nm
        self.rx_tau = np.clip(variance_of(np_, self.ceiling),
                              self.floor, self.ceiling)
        if self.x_pinned is not None:
            self.rx_mean[self.x_pinned] = self.pin_mean
            self.rx_tau[self.x_pinned] = self.pin_tau
        self.rxbar_mean = fb_apply(self.rx_mean, cfg.M, cfg.N)
        self.rxbar_tau = fb_abs2_diag(self.rx_tau, cfg.M, cfg.N)

    # -- main loop ---------------------------------------------------------

    def run(self, T_out: Optional[int] = None) -> RefinementResult:
        cfg = self.cfg
        budget = cfg.T_out if T_out is None else T_out
        for t_out in range(budget):
            self.iterations["outer"] = t_out + 1
            self._push_x_posterior()
            for t_c in range(cfg.T_c):
                self.iterations["channel"] += 1
                prev = self.c_hat.copy()
                self._ic_pass()
                self._channel_likelihood()
                self._cer_step()
                num = np.sum(np.abs(self.c_hat - prev) ** 2)
                den = max(np.sum(np.abs(prev) ** 2), 1e-30)
                if num / den <= cfg.eta_c:
                    break
            self._update_cf_posterior()
            for t_x in range(cfg.T_x):
                self.iterations["symbol"] += 1
                prev = self.x_hat.copy()
                self._ic_pass()
                self._symbol_likelihood()
                self._sdr_step()
                num = np.sum(np.abs(self.x_hat - prev) ** 2)
                den = max(np.sum(np.abs(prev) ** 2), 1e-30)
                if num / den <= cfg.eta_x:
                    break
        return self._result()

    def _result(self) -> RefinementResult:
        cfg = self.cfg
        c_full = np.zeros((self.Q + 1, cfg.L + 1, cfg.U, self.S, self.Na),
                          dtype=complex)
        scale = 1.0 / math.sqrt(self.MN)
        for iu, u in enumerate(self.devices):
            # (Q+1, S, Na, L+1) -> (Q+1, L+1, S, Na)
            c_full[:, :, u] = np.moveaxis(self.c_hat[:, iu], 3, 1) * scale
        bem = BemCoefficients(c_full, self.R, self.Q, self.omega,
                              np.zeros((cfg.U, self.S)))
        return RefinementResult(c_hat=self.c_hat.copy(),
                                c_tau=self.c_tau.copy(),
                                bem=bem,
                                x_hat=self.x_hat.copy(),
                                x_tau=self.x_tau.copy(),
                                devices=self.devices,
                                iterations=dict(self.iterations))
