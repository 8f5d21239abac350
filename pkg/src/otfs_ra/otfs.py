"""Delay-Doppler frame layout and the OFDM-based modulation chain.

The frame is an M x N grid (delay rows, Doppler columns).  A rectangular
pilot block plus guard ring is carved out of the grid; everything else is
data.  Modulation maps the grid to one time-domain vector per frame with
a single frame-level cyclic prefix; demodulation undoes the chain after
CP removal.  vec(.) is column-major throughout (columns are OFDM
symbols), so sample index n = l + n' M.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import ScenarioConfig

# Gray-mapped QPSK, unit energy.  Bit pair (b1 b0) -> point.
QPSK = np.array([1 + 1j, -1 + 1j, 1 - 1j, -1 - 1j]) / np.sqrt(2.0)

ROLE_DATA = 0
ROLE_PILOT = 1
ROLE_GUARD = 2


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class FrameLayout:
    M: int
    N: int
    l_p: int
    k_p: int
    M_p: int
    N_p: int
    M_g: int
    N_g: int
    roles: np.ndarray      # (M, N) int grid of ROLE_* values
    rho: float

    @property
    def data_mask(self) -> np.ndarray:
        return self.roles == ROLE_DATA

    @property
    def pilot_mask(self) -> np.ndarray:
        return self.roles == ROLE_PILOT

    @property
    def guard_mask(self) -> np.ndarray:
        return self.roles == ROLE_GUARD


def build_layout(cfg: ScenarioConfig) -> FrameLayout:
    """Place the pilot block and guard ring; compute the overhead rho."""
    M, N = cfg.M, cfg.N
    l_p, k_p = cfg.l_p, cfg.k_p
    M_p, N_p, M_g, N_g = cfg.M_p, cfg.N_p, cfg.M_g, cfg.N_g
    if M_p > 0 and N_p > 0:
        if M_g < cfg.L:
            raise LayoutError(f"M_g={M_g} must be >= L={cfg.L}")
        if l_p < cfg.L:
            raise LayoutError(f"l_p={l_p} must be >= L={cfg.L}")
        if l_p - M_g < 0 or l_p + M_p + M_g > M:
            raise LayoutError("pilot+guard region exceeds the delay axis")
        if k_p - N_g < 0 or k_p + N_p + N_g > N:
            raise LayoutError("pilot+guard region exceeds the Doppler axis")
    roles = np.full((M, N), ROLE_DATA, dtype=np.int8)
    if M_p > 0 and N_p > 0:
        roles[l_p - M_g:l_p + M_p + M_g, k_p - N_g:k_p + N_p + N_g] \
            = ROLE_GUARD
        roles[l_p:l_p + M_p, k_p:k_p + N_p] = ROLE_PILOT
        rho = (M_p + 2 * M_g) * (N_p + 2 * N_g) / (M * N)
    else:
        rho = 0.0
    return FrameLayout(M, N, l_p, k_p, M_p, N_p, M_g, N_g, roles, rho)


@dataclass(frozen=True)
class OtfsFrame:
    X_dd: np.ndarray       # (M, N) complex grid
    layout: FrameLayout

    @property
    def data_symbols(self) -> np.ndarray:
        return self.X_dd[self.layout.data_mask]


def generate_frame(layout: FrameLayout,
                   rng: np.random.Generator) -> OtfsFrame:
    """QPSK on data cells, i.i.d. CN(0,1) on pilot and guard cells."""
    M, N = layout.M, layout.N
    X = np.zeros((M, N), dtype=complex)
    data = layout.data_mask
    n_data = int(data.sum())
    X[data] = QPSK[rng.integers(0, 4, size=n_data)]
    train = ~data
    n_train = int(train.sum())
    X[train] = (rng.standard_normal(n_train) +
                1j * rng.standard_normal(n_train)) / np.sqrt(2.0)
    return OtfsFrame(X, layout)


def modulate(frame: OtfsFrame, M_cp: int) -> np.ndarray:
    """X_dd -> time domain: b = vec(X F_N^H), with frame-level CP."""
    X = frame.X_dd
    # right-multiply by F_N^H == orthonormal inverse DFT along columns axis
    B = np.fft.ifft(X, axis=1, norm="ortho")
    b = B.flatten(order="F")
    if M_cp > 0:
        b = np.concatenate([b[-M_cp:], b])
    return b


def demodulate_dd(r: np.ndarray, M: int, N: int) -> np.ndarray:
    """Time-domain body (CP already removed) -> delay-Doppler grid."""
    r = np.asarray(r)
    if r.shape[-1] != M * N:
        raise ValueError(f"expected length {M*N}, got {r.shape[-1]}")
    R = r.reshape((M, N), order="F")
    return np.fft.fft(R, axis=1, norm="ortho")


def hard_decide_qpsk(x: np.ndarray) -> np.ndarray:
    """Nearest-point decision onto the QPSK constellation."""
    x = np.asarray(x)
    d = np.abs(x[..., None] - QPSK.reshape((1,) * x.ndim + (4,)))
    return QPSK[np.argmin(d, axis=-1)]
