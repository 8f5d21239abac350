"""Doubly dispersive satellite-link channels and their basis-expansion fits.

A realization holds, per (device, satellite) pair, a small set of paths
with complex gains, Doppler shifts and residual delays, plus one pair of
directional cosines shared by all paths of the pair (a device looks like
a point source from orbit).  The module fits sampled tap trajectories
with a generalized complex-exponential basis, moves antennas into the
angular domain via a 2D DFT, and reconstructs time-varying responses
from the fitted coefficients.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np


# ============================================================
# Configuration
# ============================================================

@dataclass
class ScenarioConfig:
    """Every knob of the simulated scenario, with desk-scale defaults."""

    # frame / waveform
    M: int = 16              # subcarriers (delay bins)
    N: int = 8               # symbols per frame (Doppler bins)
    M_cp: int = 2            # cyclic prefix length, samples
    delta_f: float = 240e3   # subcarrier spacing, Hz
    f_c: float = 2e9         # carrier, Hz

    # population / constellation
    U: int = 20              # devices
    S_a: int = 2             # cooperating satellites
    N_z: int = 4             # UPA rows
    N_y: int = 4             # UPA columns
    p_lambda: float = 0.1    # activity probability

    # propagation
    P: int = 3               # paths per (device, satellite)
    nu_max: float = 12e3     # max Doppler after pre-compensation, Hz
    tau_max: float = 4.7e-7  # max residual delay, seconds (-> L=2)
    doppler_spread_frac: float = 0.1
    doppler_model: str = "uniform-common-plus-spread"

    # basis expansion
    R_init: int = 1
    R_refine: int = 2
    Q_I: int = 2
    Q_R: int = 4

    # pilot layout (delay-Doppler grid)
    l_p: int = 4
    k_p: int = 2
    M_p: int = 6
    N_p: int = 3
    M_g: int = 2
    N_g: int = 1

    # noise / thresholds
    snr_db: float = 5.0
    eta_lambda: float = 1e-2
    eta_I: float = 1e-5
    eta_c: float = 1e-4
    eta_x: float = 1e-4

    # iteration caps
    T_I: int = 30
    T_mrf: int = 4
    T_out: int = 2
    T_c: int = 2
    T_x: int = 2
    T_ex: int = 2
    T_detect: int = 25

    # message passing
    eta_eps: float = 0.5     # damping factor
    K: int = 3               # BGM components
    mrf_beta: float = 0.4
    mrf_gamma: float = 0.1
    K_p: int = 32            # probe vectors for diagonal estimation
    cg_tol: float = 1e-6
    cg_max_iter: int = 200
    gamp_damp: float = 0.5

    # numerics policy
    var_floor: float = 1e-12
    var_ceiling: float = 1e12

    # debug switches
    debug_dense: bool = False

    @property
    def T_s(self) -> float:
        return 1.0 / (self.M * self.delta_f)

    @property
    def L(self) -> int:
        # tolerate exact multiples of T_s landing a hair above an integer
        return int(math.ceil(self.tau_max / self.T_s - 1e-9))

    @property
    def MN(self) -> int:
        return self.M * self.N

    @property
    def n_ant(self) -> int:
        return self.N_z * self.N_y

    def validate(self) -> None:
        if self.M_cp < self.L:
            raise ValueError(f"M_cp={self.M_cp} must be >= L={self.L}")
        if self.M_p > 0 and self.N_p > 0:
            if self.l_p < self.L:
                raise ValueError(f"l_p={self.l_p} must be >= L={self.L}")
            if self.M_g < self.L:
                raise ValueError(f"M_g={self.M_g} must be >= L={self.L}")
            if self.N_g < math.ceil(self.Q_I / 2):
                raise ValueError(
                    f"N_g={self.N_g} must be >= ceil(Q_I/2)="
                    f"{math.ceil(self.Q_I / 2)}")
        q_lo = 2 * math.ceil(self.N * self.nu_max / self.delta_f)
        if self.Q_I < q_lo:
            raise ValueError(f"Q_I={self.Q_I} below recommended {q_lo}")

    def with_overrides(self, **kwargs) -> "ScenarioConfig":
        return replace(self, **kwargs)


# ============================================================
# Tap profiles
# ============================================================

@dataclass(frozen=True)
class TapProfile:
    """Fixed tap delays and (linear, sum-to-one) powers."""

    delays_s: np.ndarray
    powers: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.delays_s, dtype=float)
        p = np.asarray(self.powers, dtype=float)
        if np.any(p < 0):
            raise ValueError("tap powers must be nonnegative")
        if np.any(d < 0):
            raise ValueError("tap delays must be nonnegative")
        s = p.sum()
        if s <= 0:
            raise ValueError("tap profile has no power")
        object.__setattr__(self, "delays_s", d)
        object.__setattr__(self, "powers", p / s)

    @classmethod
    def load_csv(cls, path) -> "TapProfile":
        """Read `delay_s,power_db` rows; powers normalized to sum to 1."""
        delays, powers_db = [], []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or \
                    {"delay_s", "power_db"} - set(reader.fieldnames):
                raise ValueError("tap profile needs header delay_s,power_db")
            for row in reader:
                delays.append(float(row["delay_s"]))
                powers_db.append(float(row["power_db"]))
        powers = 10.0 ** (np.asarray(powers_db) / 10.0)
        return cls(np.asarray(delays), powers)

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["delay_s", "power_db"])
            for d, p in zip(self.delays_s, self.powers):
                writer.writerow([f"{d:.12e}",
                                 f"{10*np.log10(max(p, 1e-30)):.6f}"])


def default_tap_profile(cfg: ScenarioConfig) -> TapProfile:
    """Exponential power-delay profile with cfg.P taps inside [0, tau_max]."""
    delays = np.linspace(0.0, cfg.tau_max * 0.9, cfg.P)
    powers = np.exp(-np.arange(cfg.P, dtype=float))
    return TapProfile(delays, powers)


# ============================================================
# Channel realizations
# ============================================================

@dataclass
class ChannelRealization:
    """Sampled paths for every (device, satellite) pair.

    gains/dopplers/delays have shape (U, S_a, P); theta_z/theta_y shape
    (U, S_a); activity shape (U,).  Inactive devices carry zero gains.
    """

    cfg: ScenarioConfig
    activity: np.ndarray
    gains: np.ndarray
    dopplers: np.ndarray
    delays: np.ndarray
    theta_z: np.ndarray
    theta_y: np.ndarray


def sample_scenario(cfg: ScenarioConfig,
                    tap_profile: Optional[TapProfile] = None,
                    rng: Optional[np.random.Generator] = None
                    ) -> ChannelRealization:
    """Draw activity, path parameters and angles for the whole population."""
    cfg.validate()
    if rng is None:
        rng = np.random.default_rng()
    profile = tap_profile if tap_profile is not None \
        else default_tap_profile(cfg)
    if len(profile.delays_s) != cfg.P:
        raise ValueError("tap profile length must equal cfg.P")
    if np.any(profile.delays_s > cfg.tau_max + 1e-15):
        raise ValueError("tap profile delay exceeds tau_max")

    U, S, P = cfg.U, cfg.S_a, cfg.P
    activity = (rng.uniform(size=U) < cfg.p_lambda).astype(np.int8)

    delays = np.broadcast_to(profile.delays_s, (U, S, P)).copy()
    powers = profile.powers
    gains = (rng.standard_normal((U, S, P)) +
             1j * rng.standard_normal((U, S, P))) / np.sqrt(2.0)
    gains *= np.sqrt(powers)[None, None, :]

    spread = cfg.doppler_spread_frac * cfg.nu_max
    common = rng.uniform(-(cfg.nu_max - spread), cfg.nu_max - spread,
                         size=(U, S, 1))
    per_path = rng.uniform(-spread, spread, size=(U, S, P))
    dopplers = np.clip(common + per_path, -cfg.nu_max, cfg.nu_max)

    theta_z = rng.uniform(-1.0, 1.0, size=(U, S))
    theta_y = rng.uniform(-1.0, 1.0, size=(U, S))

    gains = gains * activity[:, None, None]
    return ChannelRealization(cfg, activity, gains, dopplers, delays,
                              theta_z, theta_y)


def pulse(t: np.ndarray, cfg: ScenarioConfig) -> np.ndarray:
    """Matched-filter pulse: sinc(t/T_s), truncated to |t| <= (L+1) T_s."""
    x = np.asarray(t, dtype=float) / cfg.T_s
    out = np.sinc(x)
    out[np.abs(x) > (cfg.L + 1)] = 0.0
    return out


def tap_series(real: ChannelRealization, u: int, s_a: int,
               n: np.ndarray) -> np.ndarray:
    """Angle-stripped tap trajectories g[n, l'] for sample indices ``n``.

    g[n, l'] = sum_i h_i exp(j 2 pi nu_i n T_s) A(l' T_s - tau_i).
    Shape: (len(n), L+1).
    """
    cfg = real.cfg
    n = np.asarray(n, dtype=float)
    taps = np.arange(cfg.L + 1)
    # (P, L+1) pulse samples and (len(n), P) rotations
    a = pulse(taps[None, :] * cfg.T_s - real.delays[u, s_a][:, None], cfg)
    rot = np.exp(2j * np.pi * real.dopplers[u, s_a][None, :] *
                 n[:, None] * cfg.T_s)
    return (rot * real.gains[u, s_a][None, :]) @ a


def spatial_phases(real: ChannelRealization, u: int, s_a: int) -> np.ndarray:
    """Per-antenna steering phases, shape (N_z, N_y)."""
    cfg = real.cfg
    nz = np.arange(cfg.N_z)[:, None]
    ny = np.arange(cfg.N_y)[None, :]
    return np.exp(1j * np.pi * (nz * real.theta_z[u, s_a] +
                                ny * real.theta_y[u, s_a]))


def physical_response(real: ChannelRealization, u: int, s_a: int,
                      n_z: int, n_y: int, n: int, l_prime: int) -> complex:
    """Spatial-domain response at one antenna, sample and tap."""
    g = tap_series(real, u, s_a, np.array([n]))[0, l_prime]
    ph = np.exp(1j * np.pi * (n_z * real.theta_z[u, s_a] +
                              n_y * real.theta_y[u, s_a]))
    return complex(g * ph)


# ============================================================
# Angular transform (2D DFT over the UPA)
# ============================================================

def space_to_angular(spatial: np.ndarray, N_z: int, N_y: int) -> np.ndarray:
    """Unnormalized forward 2D DFT over the trailing (N_z, N_y) axes."""
    if spatial.shape[-2:] != (N_z, N_y):
        raise ValueError("trailing axes must be (N_z, N_y)")
    return np.fft.fft2(spatial, axes=(-2, -1))


def angular_to_space(angular: np.ndarray, N_z: int, N_y: int) -> np.ndarray:
    """Inverse of space_to_angular (carries the 1/(N_z N_y) factor)."""
    if angular.shape[-2:] != (N_z, N_y):
        raise ValueError("trailing axes must be (N_z, N_y)")
    return np.fft.ifft2(angular, axes=(-2, -1))


def angular_steering(real: ChannelRealization, u: int, s_a: int) -> np.ndarray:
    """Angular-domain image of the steering phases, flat length N_z*N_y.

    Flattening is z-major: a = a_z + a_y * N_z, matching the neighbor
    convention used by the support prior.
    """
    cfg = real.cfg
    ang = space_to_angular(spatial_phases(real, u, s_a), cfg.N_z, cfg.N_y)
    return ang.flatten(order="F")


# ============================================================
# Basis expansion fit and reconstruction
# ============================================================

def bem_frequencies(Q: int, R: int, M: int, N: int) -> np.ndarray:
    """omega_q = 2 pi q' / (M N R), q' = q - ceil(Q/2), q = 0..Q."""
    q = np.arange(Q + 1)
    q_prime = q - math.ceil(Q / 2)
    return 2.0 * np.pi * q_prime / (M * N * R)


@dataclass
class BemCoefficients:
    """Angular-domain basis coefficients with the CP phase absorbed.

    ``c`` has shape (Q+1, L+1, U, S_a, N_z*N_y); reconstruction uses
    time indices counted from the first post-CP sample:
        h[n, l'] = sum_q c[q, l', u, s_a, n_a] exp(j omega_q n).
    """

    c: np.ndarray
    R: int
    Q: int
    omega: np.ndarray
    modeling_nmse: np.ndarray = field(default=None)

    @property
    def q_prime(self) -> np.ndarray:
        return np.arange(self.Q + 1) - math.ceil(self.Q / 2)


def fit_bem(real: ChannelRealization, R: int, Q: int,
            cfg: Optional[ScenarioConfig] = None) -> BemCoefficients:
    """Per-tap least-squares fit over the full frame (CP included).

    The fit runs on the angle-stripped tap trajectories over absolute
    sample indices n in [0, MN + M_cp); the CP phase is then absorbed so
    stored coefficients reconstruct from the first post-CP sample, and
    steering phases are reattached and moved to the angular domain.
    """
    if cfg is None:
        cfg = real.cfg
    omega = bem_frequencies(Q, R, cfg.M, cfg.N)
    T = cfg.MN + cfg.M_cp
    n_abs = np.arange(T)
    basis = np.exp(1j * omega[None, :] * n_abs[:, None])   # (T, Q+1)
    pinv = np.linalg.pinv(basis)
    absorb = np.exp(1j * omega * cfg.M_cp)

    U, S, Na = cfg.U, cfg.S_a, cfg.n_ant
    c = np.zeros((Q + 1, cfg.L + 1, U, S, Na), dtype=complex)
    nmse = np.zeros((U, S))
    for u in range(U):
        for s in range(S):
            if not real.activity[u]:
                continue
            g = tap_series(real, u, s, n_abs)              # (T, L+1)
            coeff = pinv @ g                               # (Q+1, L+1)
            resid = g - basis @ coeff
            denom = np.sum(np.abs(g) ** 2)
            nmse[u, s] = np.sum(np.abs(resid) ** 2) / denom \
                if denom > 0 else 0.0
            steer = angular_steering(real, u, s)           # (Na,)
            c[:, :, u, s, :] = (coeff * absorb[:, None])[:, :, None] \
                * steer[None, None, :]
    return BemCoefficients(c, R, Q, omega, nmse)


def reconstruct_channel(bem: BemCoefficients, u: int, s_a: int, n_a: int,
                        n: int, l_prime: int) -> complex:
    """Angular-domain response at post-CP sample n via the basis sum."""
    phases = np.exp(1j * bem.omega * n)
    return complex(np.dot(bem.c[:, l_prime, u, s_a, n_a], phases))


def reconstruct_series(bem: BemCoefficients, n_samples: int) -> np.ndarray:
    """All responses for post-CP samples [0, n_samples).

    Returns shape (n_samples, L+1, U, S_a, N_a).
    """
    n = np.arange(n_samples)
    phases = np.exp(1j * np.outer(n, bem.omega))           # (n, Q+1)
    return np.tensordot(phases, bem.c, axes=(1, 0))


def true_angular_series(real: ChannelRealization, n0: int,
                        n_samples: int) -> np.ndarray:
    """Ground-truth angular responses h[n, l', u, s, n_a] from sample n0.

    Sample indices are absolute (pass n0 = M_cp for the post-CP window).
    """
    cfg = real.cfg
    n = np.arange(n0, n0 + n_samples)
    out = np.zeros((n_samples, cfg.L + 1, cfg.U, cfg.S_a, cfg.n_ant),
                   dtype=complex)
    for u in range(cfg.U):
        if not real.activity[u]:
            continue
        for s in range(cfg.S_a):
            g = tap_series(real, u, s, n)                  # (n, L+1)
            steer = angular_steering(real, u, s)           # (Na,)
            out[:, :, u, s, :] = g[:, :, None] * steer[None, None, :]
    return out
