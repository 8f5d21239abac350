"""Initial-phase sparse recovery of the expansion coefficients.

A Bernoulli-Gaussian-mixture prior on each coefficient, a four-neighbor
Ising grid that couples the per-antenna support cells of every
coefficient row, and EM re-estimation of the mixture hyperparameters,
all wrapped around the damped GAMP engine from :mod:`otfs_ra.gamp`.

Grid convention: the antenna axis of the coefficient matrix unfolds to a
(N_y, N_z) image (flat index a = a_z + a_y * N_z), and the Ising
messages travel along both image axes with clipped boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .gamp import DenseOperator, GampDivergenceError, gamp_run

_EPS = 1e-12


# ---------------------------------------------------------------------------
# hyperparameters
# ---------------------------------------------------------------------------

@dataclass
class BgmParams:
    """Mixture weights, means, variances per device, plus the noise level.

    omega, mu, phi are (U, K) arrays; rows of omega sum to one and phi
    stays positive.  sigma2 is the shared per-satellite noise variance.
    """

    omega: np.ndarray
    mu: np.ndarray
    phi: np.ndarray
    sigma2: float

    def copy(self) -> "BgmParams":
        return BgmParams(self.omega.copy(), self.mu.copy(),
                         self.phi.copy(), float(self.sigma2))


def default_bgm_init(y_pilot: np.ndarray, X_omega: np.ndarray,
                     n_devices: int, n_components: int = 3,
                     noise_quantile: float = 0.1,
                     spread: tuple = (0.1, 10.0)) -> BgmParams:
    """Sparsity-aware starting point for the EM loop.

    The noise level comes from the quietest pilot rows; the component
    variances are log-spaced around a per-coefficient power estimate
    obtained by dividing the excess observation power by the average
    row gain of the measurement matrix.
    """
    y = np.atleast_2d(np.asarray(y_pilot))
    row_power = np.mean(np.abs(y) ** 2, axis=tuple(range(1, y.ndim)))
    sigma2 = float(max(np.quantile(row_power, noise_quantile), _EPS))
    excess = max(float(np.mean(row_power)) - sigma2, sigma2)
    gain2 = np.sum(np.abs(X_omega) ** 2) / X_omega.shape[0]
    per_coef = excess / max(gain2, _EPS)
    K = n_components
    phi = per_coef * np.logspace(np.log10(spread[0]), np.log10(spread[1]), K)
    return BgmParams(omega=np.full((n_devices, K), 1.0 / K),
                     mu=np.zeros((n_devices, K), dtype=complex),
                     phi=np.tile(phi, (n_devices, 1)),
                     sigma2=sigma2)


# ---------------------------------------------------------------------------
# support likelihood
# ---------------------------------------------------------------------------

def _log_cn0(mean, var):
    """log of the circular Gaussian density at zero, CN(0 | mean, var)."""
    v = np.maximum(var, _EPS)
    return -np.abs(mean) ** 2 / v - np.log(np.pi * v)


def _logsumexp(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        return np.squeeze(m, axis=axis) \
            + np.log(np.sum(np.exp(a - m), axis=axis))


def _mixture_logs(r_hat, tau_r, omega, mu, phi):
    # per-component log omega_k + log CN(0 | mu_k - r, phi_k + tau)
    t = np.maximum(tau_r, _EPS)[..., None]
    with np.errstate(divide="ignore"):
        logw = np.log(np.clip(omega, 0.0, None))
    logk = logw + _log_cn0(mu - r_hat[..., None],
                           np.maximum(phi, _EPS) + t)
    return logk, _logsumexp(logk, axis=-1)


def support_likelihood(r_hat, tau_r, omega, mu, phi):
    """Activity evidence per coefficient from the GAMP pseudo-observation.

    Returns the probability that the support variable is +1 given only
    the local likelihood and the mixture prior (no grid coupling), the
    quantity the Ising grid consumes as its input message.
    """
    _, log_active = _mixture_logs(r_hat, tau_r, omega, mu, phi)
    log_null = _log_cn0(r_hat, tau_r)
    eta = 1.0 / (1.0 + np.exp(np.clip(log_null - log_active, -60, 60)))
    return np.clip(eta, _EPS, 1.0 - _EPS)


# ---------------------------------------------------------------------------
# Ising grid messages
# ---------------------------------------------------------------------------

def _shift(a, axis, step, fill=0.5):
    """Move a one cell along ``axis``; vacated cells get the neutral 0.5."""
    out = np.full_like(a, fill)
    src = [slice(None)] * a.ndim
    dst = [slice(None)] * a.ndim
    if step > 0:
        dst[axis] = slice(1, None)
        src[axis] = slice(None, -1)
    else:
        dst[axis] = slice(None, -1)
        src[axis] = slice(1, None)
    out[tuple(dst)] = a[tuple(src)]
    return out


def mrf_pass(eta, beta, gamma, n_sweeps, return_xi=False):
    """Flood-schedule Ising message passing on (..., H, W) support grids.

    Each sweep recomputes the four directional messages in parallel from
    the previous iterate; a cell's outgoing message excludes the input
    that arrived from the destination.  Missing neighbors at the grid
    edge contribute the neutral message 0.5.  Returns the extrinsic
    activity odds zeta per cell.
    """
    eta = np.asarray(eta, dtype=float)
    xi = {d: np.full(eta.shape, 0.5) for d in "LRTB"}
    epb = np.exp(beta) + np.exp(-beta)

    def outgoing(p_act, p_idle):
        num = np.exp(-gamma + beta) * eta * p_act \
            + np.exp(gamma - beta) * (1.0 - eta) * p_idle
        den = epb * (np.exp(-gamma) * eta * p_act
                     + np.exp(gamma) * (1.0 - eta) * p_idle)
        return np.clip(num / np.maximum(den, _EPS), _EPS, 1.0 - _EPS)

    for _ in range(n_sweeps):
        to_r = outgoing(xi["L"] * xi["T"] * xi["B"],
                        (1 - xi["L"]) * (1 - xi["T"]) * (1 - xi["B"]))
        to_l = outgoing(xi["R"] * xi["T"] * xi["B"],
                        (1 - xi["R"]) * (1 - xi["T"]) * (1 - xi["B"]))
        to_b = outgoing(xi["L"] * xi["R"] * xi["T"],
                        (1 - xi["L"]) * (1 - xi["R"]) * (1 - xi["T"]))
        to_t = outgoing(xi["L"] * xi["R"] * xi["B"],
                        (1 - xi["L"]) * (1 - xi["R"]) * (1 - xi["B"]))
        xi = {"L": _shift(to_r, -1, +1), "R": _shift(to_l, -1, -1),
              "T": _shift(to_b, -2, +1), "B": _shift(to_t, -2, -1)}

    p_act = xi["L"] * xi["R"] * xi["T"] * xi["B"]
    p_idle = (1 - xi["L"]) * (1 - xi["R"]) * (1 - xi["T"]) * (1 - xi["B"])
    zeta = np.exp(-gamma) * p_act \
        / np.maximum(np.exp(-gamma) * p_act + np.exp(gamma) * p_idle, _EPS)
    zeta = np.clip(zeta, _EPS, 1.0 - _EPS)
    if return_xi:
        return zeta, xi
    return zeta


# ---------------------------------------------------------------------------
# posterior moments
# ---------------------------------------------------------------------------

def bgm_mrf_denoiser(r_hat, tau_r, omega, mu, phi, zeta):
    """Posterior mean/variance under the spike-plus-mixture prior.

    zeta is the grid-refined activity odds.  Also returns the posterior
    statistics (activity chi, component responsibilities omega_bar,
    component means theta and variances phi_bar) that the EM step sums.
    """
    t = np.maximum(tau_r, _EPS)
    logk, log_active = _mixture_logs(r_hat, t, omega, mu, phi)
    log_null = _log_cn0(r_hat, t)

    tk = t[..., None]
    ph = np.maximum(phi, _EPS)
    phi_bar = 1.0 / (1.0 / ph + 1.0 / tk)
    theta = phi_bar * (mu / ph + r_hat[..., None] / tk)
    omega_bar = np.exp(logk - log_active[..., None])

    z = np.clip(zeta, _EPS, 1.0 - _EPS)
    logit = np.log(z) - np.log1p(-z) + log_active - log_null
    chi = 1.0 / (1.0 + np.exp(np.clip(-logit, -60, 60)))

    first = np.sum(omega_bar * theta, axis=-1)
    second = np.sum(omega_bar * (np.abs(theta) ** 2 + phi_bar), axis=-1)
    mean = chi * first
    var = np.maximum(chi * second - np.abs(mean) ** 2, 0.0)
    stats = {"chi": chi, "omega_bar": omega_bar,
             "theta": theta, "phi_bar": phi_bar}
    return mean, var, stats


# ---------------------------------------------------------------------------
# EM hyperparameter updates
# ---------------------------------------------------------------------------

def em_update(params: BgmParams, chi, omega_bar, theta, phi_bar,
              y, z_hat, tau_z, phi_floor=1e-12) -> BgmParams:
    """One M-step from accumulated posterior statistics.

    chi is (U, n_cells); omega_bar/theta/phi_bar are (U, n_cells, K).
    Components with no responsibility mass keep their previous values.
    """
    resp = chi[..., None] * omega_bar            # (U, n_cells, K)
    mass = resp.sum(axis=1)                      # (U, K)
    chi_mass = chi.sum(axis=1)                   # (U,)
    ok = mass > 1e-12

    mu_new = params.mu.copy()
    num_mu = (resp * theta).sum(axis=1)
    mu_new[ok] = num_mu[ok] / mass[ok]

    phi_new = params.phi.copy()
    dev = np.abs(theta - mu_new[:, None, :]) ** 2 + phi_bar
    num_phi = (resp * dev).sum(axis=1)
    phi_new[ok] = num_phi[ok] / mass[ok]
    phi_new = np.maximum(phi_new, phi_floor)

    omega_new = params.omega.copy()
    has_mass = chi_mass > 1e-12
    omega_new[has_mass] = mass[has_mass] / chi_mass[has_mass, None]
    row_sum = omega_new.sum(axis=1, keepdims=True)
    omega_new = np.where(row_sum > _EPS, omega_new / row_sum, params.omega)

    sigma2 = float(np.mean(np.abs(y - z_hat) ** 2 + tau_z))
    return BgmParams(omega_new, mu_new, phi_new, max(sigma2, _EPS))


# ---------------------------------------------------------------------------
# full loop
# ---------------------------------------------------------------------------

@dataclass
class InitialEstimate:
    """Output of the initial phase for one satellite."""

    c_hat: np.ndarray     # (U * n_rows, N_a) coefficient estimates
    tau_c: np.ndarray     # matching posterior variances
    chi: np.ndarray       # activity posteriors, same shape
    params: BgmParams
    iterations: int


def mrf_bgm_amp(y_pilot: np.ndarray, X_omega: np.ndarray, cfg,
                params: BgmParams = None) -> InitialEstimate:
    """Interleaved GAMP / Ising grid / EM loop for one satellite.

    y_pilot is the (M_p N_p, N_a) pilot-window observation; X_omega the
    matching measurement matrix with U blocks of rows per device.

    Short pilot windows make the EM track twitchy: fitting the mixture
    against a cold estimate lets the learned component spread and the
    noise floor chase the residual until the whole loop blows up.  The
    loop therefore settles first with frozen hyperparameters, then runs
    EM from that basin with the spread capped and the noise floored
    relative to their data-driven starting points; a divergence during
    the EM stage falls back to heavier damping and, as a last resort,
    to the frozen-prior fit.
    """
    rows, n = X_omega.shape
    n_a = y_pilot.shape[1]
    U = cfg.U
    if n % U:
        raise ValueError("measurement columns do not split across devices")
    D = n // U
    if n_a != cfg.N_z * cfg.N_y:
        raise ValueError("antenna count does not match the array shape")
    if params is None:
        params = default_bgm_init(y_pilot, X_omega, U, cfg.K)
    phi_cap = float(params.phi.max()) * 3.0
    sigma_floor = float(params.sigma2) * 1e-3
    holder = {"params": params.copy(), "stats": None, "chi": None}
    grid = (U, D, cfg.N_y, cfg.N_z)

    def to_grid(a):
        return a.reshape(grid)

    def from_grid(a):
        return a.reshape(n, n_a)

    def denoise(r_hat, tau_r):
        p = holder["params"]
        r = to_grid(r_hat)
        t = to_grid(tau_r)
        om = p.omega[:, None, None, None, :]
        mu = p.mu[:, None, None, None, :]
        ph = p.phi[:, None, None, None, :]
        eta = support_likelihood(r, t, om, mu, ph)
        zeta = mrf_pass(eta, cfg.mrf_beta, cfg.mrf_gamma, cfg.T_mrf)
        mean, var, stats = bgm_mrf_denoiser(r, t, om, mu, ph, zeta)
        holder["stats"] = stats
        return from_grid(mean), from_grid(var)

    def hook(state):
        st = holder["stats"]
        chi = st["chi"].reshape(U, -1)
        K = holder["params"].omega.shape[1]
        new = em_update(
            holder["params"], chi,
            st["omega_bar"].reshape(U, -1, K),
            st["theta"].reshape(U, -1, K),
            st["phi_bar"].reshape(U, -1, K),
            y_pilot, state.z_hat, state.tau_z)
        holder["params"] = replace(new,
                                   phi=np.minimum(new.phi, phi_cap),
                                   sigma2=max(new.sigma2, sigma_floor))
        state.noise_var = holder["params"].sigma2
        holder["chi"] = st["chi"]

    op = DenseOperator(X_omega)
    settle = gamp_run(op, y_pilot, params.sigma2, denoise,
                      damp=cfg.gamp_damp, max_iter=min(40, cfg.T_I),
                      tol=cfg.eta_I, var_floor=cfg.var_floor)
    iterations = settle.iteration + 1
    init_mean = settle.c_hat
    init_var = np.maximum(settle.tau_c, 1e-8)

    st = None
    damp = cfg.gamp_damp
    for _ in range(3):
        try:
            st = gamp_run(op, y_pilot, holder["params"].sigma2, denoise,
                          damp=damp, max_iter=cfg.T_I, tol=cfg.eta_I,
                          hook=hook, var_floor=cfg.var_floor,
                          init_mean=init_mean, init_var=init_var)
            break
        except GampDivergenceError:
            holder["params"] = params.copy()
            holder["chi"] = None
            damp *= 0.5
    if st is None:
        st = settle       # frozen-prior fit, the stable last resort
    else:
        iterations += st.iteration + 1
    chi = from_grid(holder["chi"]) if holder["chi"] is not None \
        else np.zeros((n, n_a))
    return InitialEstimate(c_hat=st.c_hat, tau_c=st.tau_c, chi=chi,
                           params=holder["params"],
                           iterations=iterations)
