"""Delay-Doppler-angle input-output machinery.

Three equivalent views of the same channel action live here:

1. the time-domain path: time-varying circular convolution of the
   transmitted body with the per-tap responses, per antenna;
2. the basis-expansion operator: for each modeling frequency, a phase
   ramp times a circulant filter, applied with length-MN FFTs;
3. the per-cell delay-Doppler closed form built from the ``alpha``
   interference coefficients (kept as a slow oracle).

It also assembles the pilot-region linear measurement used by the
initial estimation phase, and synthesizes noisy received batches with
the noise variance tied to a target pilot-region SNR.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .channel import (BemCoefficients, ChannelRealization, ScenarioConfig,
                      angular_steering, bem_frequencies, tap_series)
from .otfs import FrameLayout, OtfsFrame, demodulate_dd, modulate


# ============================================================
# alpha coefficients
# ============================================================

def alpha_coeff(l: int, l_prime: int, k: int, k_prime: int, q_prime: float,
                R: int, N: int) -> complex:
    """Periodic-convolution interference coefficient.

    Ratio form of (1/N)(1 - e^{j2pi d})/(1 - e^{j2pi d/N}) with
    d = k' - (k - q'/R); when d is an exact multiple of N the 0/0 limit
    is 1, and integer non-multiples give exactly 0.  Wrapped taps
    (l' > l) carry the extra phase e^{-j2pi k'/N}.
    """
    d = k_prime - (k - q_prime / R)
    if abs(d - round(d)) < 1e-9:
        # exact-integer offset: full multiples of N hit the 0/0 limit 1,
        # every other integer zeroes the numerator
        val = 1.0 + 0j if round(d) % N == 0 else 0j
    else:
        num = 1.0 - np.exp(2j * np.pi * d)
        den = 1.0 - np.exp(2j * np.pi * d / N)
        val = num / den / N
    if l_prime > l:
        val = val * np.exp(-2j * np.pi * k_prime / N)
    return complex(val)


def alpha_geometric(l: int, l_prime: int, k: int, k_prime: int,
                    q_prime: float, R: int, N: int) -> complex:
    """Independent oracle: the defining geometric sum over symbols."""
    d = k_prime - (k - q_prime / R)
    n_prime = np.arange(N)
    val = np.sum(np.exp(2j * np.pi * d * n_prime / N)) / N
    if l_prime > l:
        val *= np.exp(-2j * np.pi * k_prime / N)
    return complex(val)


# ============================================================
# Received batches
# ============================================================

@dataclass
class ReceivedBatch:
    """Per-satellite received signal over all antennas.

    ``y`` has shape (S_a, N_a, MN) for time domain; ``dd`` (if present)
    holds the (S_a, N_a, M, N) delay-Doppler grids.  ``sigma2`` is the
    per-satellite noise variance actually used.
    """

    y: np.ndarray
    sigma2: np.ndarray
    domain: str
    dd: Optional[np.ndarray] = None


def _convolve_taps(g: np.ndarray, b: np.ndarray, MN: int) -> np.ndarray:
    """y[n] = sum_l' g[n, l'] b[(n - l') mod MN] for n in [0, MN)."""
    y = np.zeros(MN, dtype=complex)
    for lp in range(g.shape[1]):
        y += g[:, lp] * np.roll(b, lp)
    return y


def synthesize_received(real: ChannelRealization,
                        frames: Sequence[OtfsFrame],
                        cfg: ScenarioConfig,
                        rng: Optional[np.random.Generator] = None,
                        bem: Optional[BemCoefficients] = None,
                        noiseless: bool = False):
    """Ground-truth synthesis through the time-domain path.

    Uses the physical channel unless a fitted coefficient set is passed
    (then the reconstructed channel drives the convolution).  Noise is
    CN(0, sigma2) per angular sample, with sigma2 chosen per satellite
    so that the pilot-region signal power meets cfg.snr_db.  Returns
    (time ReceivedBatch, DD ReceivedBatch).
    """
    M, N, MN = cfg.M, cfg.N, cfg.MN
    S, Na = cfg.S_a, cfg.n_ant
    bodies = [modulate(f, cfg.M_cp)[cfg.M_cp:] for f in frames]

    y = np.zeros((S, Na, MN), dtype=complex)
    n_post = np.arange(MN)
    if bem is not None:
        phases = np.exp(1j * np.outer(n_post, bem.omega))  # (MN, Q+1)
    for s in range(S):
        for u in range(cfg.U):
            if not real.activity[u]:
                continue
            if bem is None:
                g = tap_series(real, u, s, n_post + cfg.M_cp)  # (MN, L+1)
                conv = _convolve_taps(g, bodies[u], MN)
                steer = angular_steering(real, u, s)
                y[s] += steer[:, None] * conv[None, :]
            else:
                # general coefficient tensors need not factor over antennas
                c_us = bem.c[:, :, u, s, :]                # (Q+1, L+1, Na)
                g_all = np.einsum("nq,qla->nla", phases, c_us)
                for a in range(Na):
                    y[s, a] += _convolve_taps(g_all[:, :, a], bodies[u], MN)

    # noise level from the pilot-region signal power, per satellite
    layout = frames[0].layout
    sigma2 = np.zeros(S)
    linear_snr = 10.0 ** (cfg.snr_db / 10.0)
    for s in range(S):
        z_pow = 0.0
        for a in range(Na):
            grid = demodulate_dd(y[s, a], M, N)
            z = grid[layout.l_p:layout.l_p + layout.M_p,
                     layout.k_p:layout.k_p + layout.N_p]
            z_pow += np.sum(np.abs(z) ** 2)
        denom = layout.M_p * layout.N_p * Na * linear_snr
        sigma2[s] = z_pow / denom if denom > 0 and z_pow > 0 else 1e-12

    if not noiseless:
        if rng is None:
            raise ValueError("rng required unless noiseless")
        noise = (rng.standard_normal(y.shape) +
                 1j * rng.standard_normal(y.shape)) / np.sqrt(2.0)
        y = y + noise * np.sqrt(sigma2)[:, None, None]

    dd = np.zeros((S, Na, M, N), dtype=complex)
    for s in range(S):
        for a in range(Na):
            dd[s, a] = demodulate_dd(y[s, a], M, N)
    time_batch = ReceivedBatch(y, sigma2, "time")
    dd_batch = ReceivedBatch(y, sigma2, "delay-Doppler", dd=dd)
    return time_batch, dd_batch


# ============================================================
# Basis-expansion operator (FFT form)
# ============================================================

def bem_time_apply(c_taps: np.ndarray, omega: np.ndarray,
                   b: np.ndarray) -> np.ndarray:
    """Apply sum_q diag(b_q) Circ(c[q]) to a length-MN body.

    ``c_taps``: (Q+1, L+1) coefficients for one (u, s_a, antenna) or a
    broadcastable (..., Q+1, L+1) stack; returns matching (..., MN).
    """
    MN = b.shape[-1]
    Bf = np.fft.fft(b)
    Lp1 = c_taps.shape[-1]
    m = np.arange(MN)
    # unnormalized frequency response of the tap filter per q
    ramp = np.exp(-2j * np.pi * np.outer(m, np.arange(Lp1)) / MN)  # (MN,L+1)
    H = np.tensordot(c_taps, ramp, axes=([-1], [1]))   # (..., Q+1, MN)
    conv = np.fft.ifft(H * Bf, axis=-1)
    n = np.arange(MN)
    phase = np.exp(1j * np.outer(omega, n))            # (Q+1, MN)
    return np.sum(phase * conv, axis=-2)


def bem_time_adjoint(c_taps: np.ndarray, omega: np.ndarray,
                     y: np.ndarray) -> np.ndarray:
    """Adjoint of bem_time_apply in the body vector ``b``."""
    MN = y.shape[-1]
    Lp1 = c_taps.shape[-1]
    n = np.arange(MN)
    phase = np.exp(-1j * np.outer(omega, n))           # (Q+1, MN)
    t = phase * y[..., None, :]                        # (...,Q+1,MN)
    Tf = np.fft.fft(t, axis=-1)
    m = np.arange(MN)
    ramp = np.exp(-2j * np.pi * np.outer(m, np.arange(Lp1)) / MN)
    H = np.tensordot(c_taps, ramp, axes=([-1], [1]))   # (...,Q+1,MN)
    out = np.fft.ifft(np.conj(H) * Tf, axis=-1)
    return np.sum(out, axis=-2)


def dd_operator_apply(bem: BemCoefficients, frames: Sequence[OtfsFrame],
                      cfg: ScenarioConfig) -> ReceivedBatch:
    """Noiseless DD-domain receive via the per-frequency FFT operator."""
    M, N, MN = cfg.M, cfg.N, cfg.MN
    S, Na = cfg.S_a, cfg.n_ant
    dd = np.zeros((S, Na, M, N), dtype=complex)
    y = np.zeros((S, Na, MN), dtype=complex)
    for u in range(cfg.U):
        body = modulate(frames[u], cfg.M_cp)[cfg.M_cp:]
        for s in range(S):
            c_us = np.moveaxis(bem.c[:, :, u, s, :], -1, 0)  # (Na,Q+1,L+1)
            if not np.any(c_us):
                continue
            y[s] += bem_time_apply(c_us, bem.omega, body)
    for s in range(S):
        for a in range(Na):
            dd[s, a] = demodulate_dd(y[s, a], M, N)
    return ReceivedBatch(y, np.zeros(S), "delay-Doppler", dd=dd)


def dd_prop1_apply(bem: BemCoefficients, frames: Sequence[OtfsFrame],
                   cfg: ScenarioConfig) -> np.ndarray:
    """Slow per-cell closed-form evaluation (oracle for tests).

    Returns (S_a, N_a, M, N) noiseless DD grids.
    """
    M, N = cfg.M, cfg.N
    S, Na = cfg.S_a, cfg.n_ant
    Q = bem.Q
    q_primes = bem.q_prime
    out = np.zeros((S, Na, M, N), dtype=complex)
    for s in range(S):
        for u in range(cfg.U):
            X = frames[u].X_dd
            if not np.any(bem.c[:, :, u, s, :]):
                continue
            for l in range(M):
                for k in range(N):
                    acc = np.zeros(Na, dtype=complex)
                    for q in range(Q + 1):
                        qp = q_primes[q]
                        eql = np.exp(1j * bem.omega[q] * l)
                        for lp in range(cfg.L + 1):
                            xs = X[(l - lp) % M, :]
                            for kp in range(N):
                                a = alpha_coeff(l, lp, k, kp, qp,
                                                bem.R, N)
                                if a == 0:
                                    continue
                                acc += eql * a * xs[kp] \
                                    * bem.c[q, lp, u, s, :]
                    out[s, :, l, k] += acc
    return out


# ============================================================
# Pilot measurement (initial-phase linear model)
# ============================================================

@dataclass
class PilotMeasurement:
    """Linear model Y_s = X_omega C_s + E over the pilot window.

    X_omega: (M_p N_p, U (Q_I+1)(L+1)); columns grouped device-major,
    then frequency, then tap.  Row index is (l - l_p) + (k - k_p) M_p.
    """

    X_omega: np.ndarray
    Q: int
    omega: np.ndarray


def build_pilot_measurement(frames: Sequence[OtfsFrame], Q_I: int,
                            cfg: ScenarioConfig) -> PilotMeasurement:
    layout = frames[0].layout
    M, N = cfg.M, cfg.N
    omega = bem_frequencies(Q_I, 1, M, N)
    q_primes = np.arange(Q_I + 1) - math.ceil(Q_I / 2)
    Lp1 = cfg.L + 1
    rows = layout.M_p * layout.N_p
    cols = cfg.U * (Q_I + 1) * Lp1
    X_omega = np.zeros((rows, cols), dtype=complex)
    ls = layout.l_p + np.arange(layout.M_p)
    ks = layout.k_p + np.arange(layout.N_p)
    for u in range(cfg.U):
        X = frames[u].X_dd
        for q in range(Q_I + 1):
            qp = int(q_primes[q])
            for lp in range(Lp1):
                col = u * (Q_I + 1) * Lp1 + q * Lp1 + lp
                for ki, k in enumerate(ks):
                    for li, l in enumerate(ls):
                        r = li + ki * layout.M_p
                        X_omega[r, col] = np.exp(1j * omega[q] * l) \
                            * X[(l - lp) % M, (k - qp) % N]
    return PilotMeasurement(X_omega, Q_I, omega)


def slice_pilot(dd: np.ndarray, layout: FrameLayout) -> np.ndarray:
    """Extract pilot-window observations: (S, M_p N_p, N_a).

    ``dd`` is the (S, N_a, M, N) grid stack; rows ordered to match
    build_pilot_measurement (delay-major inside a Doppler column).
    """
    block = dd[:, :, layout.l_p:layout.l_p + layout.M_p,
               layout.k_p:layout.k_p + layout.N_p]
    S, Na = block.shape[0], block.shape[1]
    rows = layout.M_p * layout.N_p
    # row index l - l_p + (k - k_p) M_p: delay runs fastest
    out = block.transpose(0, 1, 3, 2).reshape(S, Na, rows)
    return out.transpose(0, 2, 1)


def coefficient_matrix(bem: BemCoefficients, cfg: ScenarioConfig,
                       s_a: int) -> np.ndarray:
    """Stack coefficients as the (U (Q+1)(L+1), N_a) matrix C_{s_a}."""
    Q, Lp1 = bem.Q, cfg.L + 1
    out = np.zeros((cfg.U * (Q + 1) * Lp1, cfg.n_ant), dtype=complex)
    for u in range(cfg.U):
        for q in range(Q + 1):
            for lp in range(Lp1):
                out[u * (Q + 1) * Lp1 + q * Lp1 + lp, :] = \
                    bem.c[q, lp, u, s_a, :]
    return out
