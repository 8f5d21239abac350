"""End-to-end pipeline: trials, metrics, baselines, sweeps, config I/O.

A trial walks the whole receive chain for one drawn scenario: synthesis,
per-satellite coefficient estimation over the pilot window, activity
thresholding, soft symbol detection, and joint refinement (centralized,
distributed, or per-satellite in isolation).  Everything downstream of
the seed is deterministic, including thread-count-independent sweeps,
so results serialize to stable bytes for regression pinning.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields as dc_fields, asdict
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .aep import CentralizedAep, expand_initial_estimate
from .channel import (BemCoefficients, ChannelRealization, ScenarioConfig,
                      angular_steering, bem_frequencies, sample_scenario,
                      tap_series, true_angular_series)
from .daep import SatelliteWorker, distributed_aep
from .ddio import (bem_time_adjoint, bem_time_apply, build_pilot_measurement,
                   slice_pilot, synthesize_received)
from .gamp import (UniformVarianceOperator, estimate_frob2, gamp_run,
                   uniform_constellation_denoiser)
from .initial import mrf_bgm_amp
from .numerics import cg_solve
from .otfs import (QPSK, OtfsFrame, build_layout, demodulate_dd,
                   generate_frame, hard_decide_qpsk, modulate)

NMSE_FLOOR_DB = -120.0


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name for reporting."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


# ============================================================
# Configuration files
# ============================================================

# sectioned key=value layout; every ScenarioConfig field appears exactly
# once so round trips are lossless
_CONFIG_SECTIONS = {
    "frame": ["M", "N", "M_cp", "delta_f", "f_c"],
    "population": ["U", "S_a", "N_z", "N_y", "p_lambda"],
    "propagation": ["P", "nu_max", "tau_max", "doppler_spread_frac",
                    "doppler_model"],
    "basis": ["R_init", "R_refine", "Q_I", "Q_R"],
    "pilot": ["l_p", "k_p", "M_p", "N_p", "M_g", "N_g"],
    "thresholds": ["snr_db", "eta_lambda", "eta_I", "eta_c", "eta_x"],
    "iterations": ["T_I", "T_mrf", "T_out", "T_c", "T_x", "T_ex",
                   "T_detect"],
    "message_passing": ["eta_eps", "K", "mrf_beta", "mrf_gamma", "K_p",
                        "cg_tol", "cg_max_iter", "gamp_damp"],
    "numerics": ["var_floor", "var_ceiling", "debug_dense"],
}


def save_config(cfg: ScenarioConfig, path) -> None:
    parser = configparser.ConfigParser()
    parser.optionxform = str          # field names are case sensitive
    values = asdict(cfg)
    for section, keys in _CONFIG_SECTIONS.items():
        parser[section] = {k: str(values[k]) for k in keys}
    with open(path, "w") as fh:
        parser.write(fh)


def load_config(path, base: Optional[ScenarioConfig] = None) -> ScenarioConfig:
    """Read a sectioned key=value file; unknown keys are an error."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    with open(path) as fh:
        parser.read_file(fh)
    types = {f.name: f.type for f in dc_fields(ScenarioConfig)}
    known = {k for keys in _CONFIG_SECTIONS.values() for k in keys}
    overrides = {}
    for section in parser.sections():
        for key, raw in parser[section].items():
            if key not in known:
                raise ValueError(f"unknown config key '{key}' "
                                 f"in section [{section}]")
            t = types[key]
            if t in ("bool", bool):
                overrides[key] = raw.strip().lower() in ("1", "true", "yes")
            elif t in ("int", int):
                overrides[key] = int(raw)
            elif t in ("float", float):
                overrides[key] = float(raw)
            else:
                overrides[key] = raw
    cfg = base if base is not None else ScenarioConfig()
    return cfg.with_overrides(**overrides)


def desk_scale_config() -> ScenarioConfig:
    """Small profile: 4x4 antennas, 16x8 grid, quick enough for laptops.

    The short pilot window of this profile leaves far fewer measurements
    per coefficient than the headline profile, so the identification
    stage needs a much sparser support prior and a longer iteration
    budget than the full-scale defaults to keep inactive devices from
    soaking up residual energy.  The values below came from a seed-swept
    calibration of the activity-error plateau.
    """
    return ScenarioConfig().with_overrides(T_I=100, eta_I=1e-7,
                                           mrf_beta=2.4, mrf_gamma=8.0)


def full_scale_config() -> ScenarioConfig:
    """Headline simulation profile: 32x15 grid, 8x8 antenna panel."""
    return ScenarioConfig().with_overrides(M=32, N=15, N_z=8, N_y=8,
                                           M_cp=4, M_g=4)


def config_hash(cfg: ScenarioConfig) -> str:
    """Stable short digest over every scenario knob."""
    payload = json.dumps(asdict(cfg), sort_keys=True, default=repr)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


# ============================================================
# Device identification
# ============================================================

def device_energies(c_hat: np.ndarray, cfg: ScenarioConfig) -> np.ndarray:
    """Per-device coefficient energy from one satellite's estimate.

    ``c_hat`` is the (U * n_rows, N_a) stack; returns (U,) sums of
    squared magnitudes over the device's rows and antennas.
    """
    U = cfg.U
    rows = c_hat.shape[0]
    if rows % U:
        raise ValueError("estimate rows do not split across devices")
    blocks = c_hat.reshape(U, rows // U, -1)
    return np.sum(np.abs(blocks) ** 2, axis=(1, 2))


def support_refit(y_pilot: np.ndarray, X_omega: np.ndarray,
                  lambda_hat: np.ndarray, sigma2: float,
                  cfg: ScenarioConfig
                  ) -> Tuple[np.ndarray, np.ndarray]:
    """Ridge least-squares debias of the pilot fit on the declared support.

    The sparse support prior that separates active from idle devices also
    shrinks the surviving coefficients toward zero and reports
    overconfident variances, which makes a poor warm start for the
    refinement stage.  Refitting the pilot linear system on the declared
    device columns alone restores unbiased coefficient scales and honest
    variances.  Returns full-shape (n, N_a) mean and variance arrays with
    zero mean and unit variance on devices declared idle.
    """
    rows, n = X_omega.shape
    n_a = y_pilot.shape[1]
    D = n // cfg.U
    c = np.zeros((n, n_a), dtype=complex)
    tau = np.ones((n, n_a))
    active = np.flatnonzero(lambda_hat)
    if active.size == 0:
        return c, tau
    cols = np.concatenate([np.arange(u * D, (u + 1) * D) for u in active])
    A = X_omega[:, cols]
    lam = max(float(sigma2), 1e-12)
    G = A.conj().T @ A + lam * np.eye(cols.size)
    G_inv = np.linalg.inv(G)
    c[cols] = G_inv @ (A.conj().T @ y_pilot)
    tau[cols] = np.maximum(lam * np.real(np.diag(G_inv)), 1e-8)[:, None]
    return c, tau


def identify_devices(energies: np.ndarray,
                     eta_lambda: float) -> np.ndarray:
    """Threshold the satellite-averaged energies into activity flags.

    ``energies`` is (S, U); a device is declared active when the mean
    over satellites exceeds the threshold.  Distributed operation
    broadcasts the same per-satellite energies, so one rule serves both
    modes.
    """
    energies = np.atleast_2d(np.asarray(energies, dtype=float))
    return (energies.mean(axis=0) > eta_lambda).astype(np.int8)


# ============================================================
# Detection operator (matrix-free)
# ============================================================

def _vec_to_body(x_vec: np.ndarray, M: int, N: int) -> np.ndarray:
    """Grid vector -> time-domain body (no prefix)."""
    X = x_vec.reshape((M, N), order="F")
    return np.fft.ifft(X, axis=1, norm="ortho").flatten(order="F")


def _body_to_vec_adjoint(body: np.ndarray, M: int, N: int) -> np.ndarray:
    """Adjoint of _vec_to_body (the map is unitary, so its inverse)."""
    B = body.reshape((M, N), order="F")
    return np.fft.fft(B, axis=1, norm="ortho").flatten(order="F")


def _columns(fn: Callable) -> Callable:
    """Lift a vector map to optional trailing probe columns."""
    def wrapped(v):
        v = np.asarray(v)
        if v.ndim == 1:
            return fn(v)
        return np.stack([fn(v[:, k]) for k in range(v.shape[1])], axis=1)
    return wrapped


def detection_operator(c: np.ndarray, omega: np.ndarray,
                       active: Sequence[int], cfg: ScenarioConfig,
                       sats: Sequence[int]):
    """Matrix-free grid-to-grid channel map for symbol detection.

    ``c`` holds reconstruction-convention coefficients with shape
    (Q+1, L+1, U, S, N_a).  The forward map sends the stacked grid
    vectors of the listed devices through modulation, the per-frequency
    filter bank, and demodulation at every listed satellite and
    antenna; nothing of size MN x MN is ever materialized.  Returns
    (forward, adjoint, shape), both maps accepting (n,) or (n, k).
    """
    M, N, MN = cfg.M, cfg.N, cfg.MN
    Na = cfg.n_ant
    active = list(active)
    sats = list(sats)
    n_in = len(active) * MN
    n_out = len(sats) * Na * MN
    # (len(active), len(sats), Na, Q+1, L+1) coefficient stacks
    stacks = np.stack([
        np.stack([np.moveaxis(c[:, :, u, s, :], -1, 0) for s in sats])
        for u in active])

    def forward(x):
        y = np.zeros((len(sats), Na, MN), dtype=complex)
        for iu in range(len(active)):
            body = _vec_to_body(x[iu * MN:(iu + 1) * MN], M, N)
            y += bem_time_apply(stacks[iu], omega, body)
        out = np.empty(n_out, dtype=complex)
        pos = 0
        for si in range(len(sats)):
            for a in range(Na):
                out[pos:pos + MN] = demodulate_dd(y[si, a], M, N) \
                    .flatten(order="F")
                pos += MN
        return out

    def adjoint(g):
        t = np.empty((len(sats), Na, MN), dtype=complex)
        pos = 0
        for si in range(len(sats)):
            for a in range(Na):
                grid = g[pos:pos + MN].reshape((M, N), order="F")
                t[si, a] = np.fft.ifft(grid, axis=1,
                                       norm="ortho").flatten(order="F")
                pos += MN
        out = np.empty(n_in, dtype=complex)
        for iu in range(len(active)):
            b = bem_time_adjoint(stacks[iu], omega, t)
            body = np.sum(b, axis=(0, 1))
            out[iu * MN:(iu + 1) * MN] = _body_to_vec_adjoint(body, M, N)
        return out

    return _columns(forward), _columns(adjoint), (n_out, n_in)


def true_channel_operator(real: ChannelRealization, cfg: ScenarioConfig,
                          active: Sequence[int], sats: Sequence[int]):
    """Same interface as detection_operator, driven by the exact taps."""
    M, N, MN = cfg.M, cfg.N, cfg.MN
    Na = cfg.n_ant
    active = list(active)
    sats = list(sats)
    n_post = np.arange(MN) + cfg.M_cp
    taps = {}     # (iu, si) -> (MN, L+1) trajectories
    steer = {}
    for iu, u in enumerate(active):
        for si, s in enumerate(sats):
            taps[iu, si] = tap_series(real, u, s, n_post)
            steer[iu, si] = angular_steering(real, u, s)
    n_in = len(active) * MN
    n_out = len(sats) * Na * MN
    Lp1 = cfg.L + 1

    def forward(x):
        y = np.zeros((len(sats), Na, MN), dtype=complex)
        for iu in range(len(active)):
            body = _vec_to_body(x[iu * MN:(iu + 1) * MN], M, N)
            for si in range(len(sats)):
                g = taps[iu, si]
                conv = np.zeros(MN, dtype=complex)
                for lp in range(Lp1):
                    conv += g[:, lp] * np.roll(body, lp)
                y[si] += steer[iu, si][:, None] * conv[None, :]
        out = np.empty(n_out, dtype=complex)
        pos = 0
        for si in range(len(sats)):
            for a in range(Na):
                out[pos:pos + MN] = demodulate_dd(y[si, a], M, N) \
                    .flatten(order="F")
                pos += MN
        return out

    def adjoint(v):
        t = np.empty((len(sats), Na, MN), dtype=complex)
        pos = 0
        for si in range(len(sats)):
            for a in range(Na):
                grid = v[pos:pos + MN].reshape((M, N), order="F")
                t[si, a] = np.fft.ifft(grid, axis=1,
                                       norm="ortho").flatten(order="F")
                pos += MN
        out = np.empty(n_in, dtype=complex)
        for iu in range(len(active)):
            body = np.zeros(MN, dtype=complex)
            for si in range(len(sats)):
                z = np.sum(np.conj(steer[iu, si])[:, None] * t[si], axis=0)
                g = taps[iu, si]
                for lp in range(Lp1):
                    body += np.roll(np.conj(g[:, lp]) * z, -lp)
            out[iu * MN:(iu + 1) * MN] = _body_to_vec_adjoint(body, M, N)
        return out

    return _columns(forward), _columns(adjoint), (n_out, n_in)


# ============================================================
# Initial symbol detection
# ============================================================

@dataclass
class DetectionResult:
    x_hat: np.ndarray     # (Ua, MN) posterior symbol means
    x_tau: np.ndarray     # (Ua, MN) posterior variances
    iterations: int


def initial_symbol_detect(dd: np.ndarray, c_init: np.ndarray,
                          omega: np.ndarray, sigma2: np.ndarray,
                          active: Sequence[int],
                          frames: Sequence[OtfsFrame],
                          cfg: ScenarioConfig,
                          sats: Optional[Sequence[int]] = None,
                          rng: Optional[np.random.Generator] = None,
                          frob2: Optional[float] = None) -> DetectionResult:
    """Soft QPSK detection from the DD grids and a coarse channel fit.

    Message passing runs matrix-free over the stacked unknown grids of
    the identified devices, with a uniform constellation prior on data
    cells and the known transmitted values pinned on pilot and guard
    cells.  ``dd`` is the (S, N_a, M, N) grid stack; ``c_init`` the
    (Q+1, L+1, U, S, N_a) coefficients driving the channel map.
    """
    active = list(active)
    MN = cfg.MN
    if not active:
        return DetectionResult(np.zeros((0, MN), dtype=complex),
                               np.zeros((0, MN)), 0)
    sats = list(range(dd.shape[0])) if sats is None else list(sats)
    fwd, adj, shape = detection_operator(c_init, omega, active, cfg, sats)
    if frob2 is None:
        if rng is None:
            rng = np.random.default_rng(0)
        frob2 = estimate_frob2(fwd, shape[1], min(cfg.K_p, 16), rng)
    op = UniformVarianceOperator(fwd, adj, shape, frob2)

    y = np.concatenate([dd[s, a].flatten(order="F")
                        for s in sats for a in range(cfg.n_ant)])
    layout = frames[0].layout
    known_grid = ~layout.data_mask
    known_mask = np.concatenate(
        [known_grid.flatten(order="F") for _ in active])
    known_values = np.concatenate(
        [frames[u].X_dd.flatten(order="F") for u in active])
    known_values = np.where(known_mask, known_values, 0.0)
    denoiser = uniform_constellation_denoiser(QPSK, known_mask, known_values)
    noise_var = float(np.mean(np.asarray(sigma2)[sats]))
    init_mean = known_values.astype(complex)
    init_var = np.where(known_mask, 0.0, 1.0)
    state = gamp_run(op, y, noise_var, denoiser, damp=cfg.gamp_damp,
                     max_iter=cfg.T_detect, tol=cfg.eta_x,
                     init_mean=init_mean, init_var=init_var,
                     var_floor=cfg.var_floor)
    x_hat = state.c_hat.reshape(len(active), MN)
    x_tau = state.tau_c.reshape(len(active), MN)
    return DetectionResult(x_hat, x_tau, state.iteration + 1)


# ============================================================
# Baseline equalizers
# ============================================================

def baseline_mmse_equalizer(y: np.ndarray, forward: Callable,
                            adjoint: Callable, n_unknowns: int,
                            sigma2: float, cfg: ScenarioConfig
                            ) -> np.ndarray:
    """Regularized normal-equations solve on the matrix-free channel map.

    Solves (A^H A + sigma^2 I) x = A^H y by conjugate gradients; with
    the exact channel and sigma^2 -> 0 this is the least-squares
    reference.  Returns the soft estimate (callers hard-decide).
    """
    rhs = adjoint(y)

    def apply_normal(v):
        return adjoint(forward(v)) + sigma2 * v

    x, _ = cg_solve(apply_normal, rhs, tol=cfg.cg_tol,
                    max_iter=cfg.cg_max_iter)
    return x


# ============================================================
# Metrics
# ============================================================

def nmse_db_of(h_hat: np.ndarray, h_true: np.ndarray) -> float:
    """10 log10(||h_hat - h||^2 / ||h||^2), floored at -120 dB.

    Devices with zero truth still contribute their estimate energy to
    the numerator; a zero estimate against nonzero truth gives 0 dB.
    """
    num = float(np.sum(np.abs(h_hat - h_true) ** 2))
    den = float(np.sum(np.abs(h_true) ** 2))
    if den <= 0.0:
        return NMSE_FLOOR_DB if num <= 0.0 else 0.0
    return max(10.0 * math.log10(max(num / den, 1e-30)), NMSE_FLOOR_DB)


def symbol_error_rate(activity: np.ndarray, lambda_hat: np.ndarray,
                      frames: Sequence[OtfsFrame],
                      decisions: Dict[int, np.ndarray]) -> float:
    """Fraction of wrong data-cell symbols over the whole population.

    A symbol counts as correct only when the device's activity call and
    the symbol itself are both right.  A silent device is judged as
    transmitting nothing: declaring it active makes every one of its
    data cells an error, and a missed active device loses all of its.
    """
    layout = frames[0].layout
    data = layout.data_mask
    n_data = int(data.sum())
    U = len(activity)
    errors = 0
    for u in range(U):
        truth_active = bool(activity[u])
        est_active = bool(lambda_hat[u])
        if truth_active != est_active:
            errors += n_data
        elif truth_active:
            dec = decisions[u]
            errors += int(np.sum(dec[data] != frames[u].X_dd[data]))
    return errors / (U * n_data) if U * n_data else 0.0


def compute_metrics(real: ChannelRealization, frames: Sequence[OtfsFrame],
                    lambda_hat: np.ndarray, h_hat: np.ndarray,
                    decisions: Dict[int, np.ndarray],
                    sats: Optional[Sequence[int]] = None
                    ) -> Tuple[float, float, float]:
    """(AER, channel NMSE in dB, SER) against the retained ground truth.

    ``h_hat`` is the reconstructed (MN, L+1, U, S', N_a) series for the
    compared satellites (all of them by default); truth is evaluated on
    the matching slice.
    """
    cfg = real.cfg
    aer = float(np.mean(lambda_hat != real.activity))
    h_true = true_angular_series(real, cfg.M_cp, cfg.MN)
    if sats is not None:
        h_true = h_true[:, :, :, list(sats), :]
    nmse = nmse_db_of(h_hat, h_true)
    ser = symbol_error_rate(real.activity, lambda_hat, frames, decisions)
    return aer, nmse, ser


# ============================================================
# Trial results
# ============================================================

# column order for CSV output; timing columns are reported but excluded
# from the canonical byte form (they are not reproducible)
TRIAL_COLUMNS = [
    "seed", "mode", "config_hash", "aer", "nmse_db", "ser",
    "nmse_initial_db", "nmse_refined_db", "ser_initial", "ser_refined",
    "n_active_true", "n_active_est", "iters_initial", "iters_detect",
    "iters_refine", "payload_bytes", "ser_mmse", "ser_oracle_ls",
    "wall_synth_s", "wall_initial_s", "wall_detect_s", "wall_refine_s",
    "error",
]

_TIMING_COLUMNS = ("wall_synth_s", "wall_initial_s", "wall_detect_s",
                   "wall_refine_s")


@dataclass
class TrialResult:
    seed: int
    mode: str
    config_hash: str
    aer: float
    nmse_db: float
    ser: float
    nmse_initial_db: float
    nmse_refined_db: float
    ser_initial: float
    ser_refined: float
    n_active_true: int
    n_active_est: int
    iters_initial: int
    iters_detect: int
    iters_refine: int
    payload_bytes: int
    ser_mmse: float = math.nan
    ser_oracle_ls: float = math.nan
    wall_synth_s: float = 0.0
    wall_initial_s: float = 0.0
    wall_detect_s: float = 0.0
    wall_refine_s: float = 0.0
    error: str = ""

    def to_row(self) -> List:
        d = asdict(self)
        return [d[k] for k in TRIAL_COLUMNS]

    def to_bytes(self) -> bytes:
        """Canonical byte form of the reproducible fields.

        Floats go through hex so the encoding is exact; wall-clock
        columns are omitted because they vary run to run.
        """
        parts = []
        d = asdict(self)
        for k in TRIAL_COLUMNS:
            if k in _TIMING_COLUMNS:
                continue
            v = d[k]
            if isinstance(v, float):
                parts.append(float(v).hex())
            else:
                parts.append(str(v))
        return "|".join(parts).encode()


# ============================================================
# Trial pipeline
# ============================================================

def _initial_bem(c_hat_list: List[np.ndarray], lambda_hat: np.ndarray,
                 cfg: ScenarioConfig, sats: Sequence[int]
                 ) -> BemCoefficients:
    """Coarse-grid coefficients for the listed satellites.

    Devices thresholded as inactive are zeroed: the estimator reports
    nothing for them, so their energy never enters a reconstruction.
    """
    Qi, Lp1 = cfg.Q_I, cfg.L + 1
    omega = bem_frequencies(Qi, cfg.R_init, cfg.M, cfg.N)
    c = np.zeros((Qi + 1, Lp1, cfg.U, len(sats), cfg.n_ant), dtype=complex)
    for si, s in enumerate(sats):
        blocks = c_hat_list[s].reshape(cfg.U, Qi + 1, Lp1, cfg.n_ant)
        for u in range(cfg.U):
            if lambda_hat[u]:
                c[:, :, u, si, :] = blocks[u]
    return BemCoefficients(c, cfg.R_init, Qi, omega)


def _reconstruct(bem: BemCoefficients, cfg: ScenarioConfig) -> np.ndarray:
    n = np.arange(cfg.MN)
    phases = np.exp(1j * np.outer(n, bem.omega))
    return np.tensordot(phases, bem.c, axes=(1, 0))


def _refinement_priors(det: DetectionResult, frames, active, cfg):
    """Symbol-side warm start: detected posteriors plus pinned cells."""
    layout = frames[0].layout
    known = (~layout.data_mask).flatten(order="F")
    x0 = det.x_hat.copy()
    tau0 = np.clip(det.x_tau, 1e-6, None)
    pinned = np.broadcast_to(known, (len(active), cfg.MN)).copy()
    for iu, u in enumerate(active):
        x0[iu, known] = frames[u].X_dd.flatten(order="F")[known]
        tau0[iu, known] = 1e-8
    return x0, tau0, pinned


def _decisions_from(x_hat: np.ndarray, active, cfg) -> Dict[int, np.ndarray]:
    out = {}
    for iu, u in enumerate(active):
        grid = x_hat[iu].reshape((cfg.M, cfg.N), order="F")
        out[u] = hard_decide_qpsk(grid)
    return out


def _refined_series(bem: BemCoefficients, lambda_hat,
                    cfg) -> np.ndarray:
    c = bem.c.copy()
    for u in range(cfg.U):
        if not lambda_hat[u]:
            c[:, :, u] = 0.0
    return _reconstruct(BemCoefficients(c, bem.R, bem.Q, bem.omega), cfg)


def run_trial(cfg: ScenarioConfig, seed: int, mode: str = "centralized",
              baselines: Sequence[str] = (),
              max_workers: Optional[int] = None) -> TrialResult:
    """One fully seeded end-to-end trial.

    ``mode`` selects how satellites cooperate during detection and
    refinement: "centralized" pools every observation, "distributed"
    exchanges soft extrinsics over the link, "non-cooperative" runs one
    isolated pipeline per satellite and averages the metrics.  Optional
    ``baselines`` ("mmse", "oracle-ls") attach reference equalizer SERs.
    """
    if mode not in ("centralized", "distributed", "non-cooperative"):
        raise ValueError(f"unknown mode '{mode}'")
    chash = config_hash(cfg)
    rng_synth = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    rng_detect = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    rng_refine = np.random.default_rng(np.random.SeedSequence([seed, 2]))

    # --- synthesis -------------------------------------------------
    t0 = time.perf_counter()
    try:
        layout = build_layout(cfg)
        real = sample_scenario(cfg, rng=rng_synth)
        frames = [generate_frame(layout, rng_synth) for _ in range(cfg.U)]
        time_batch, dd_batch = synthesize_received(real, frames, cfg,
                                                   rng=rng_synth)
    except Exception as exc:
        raise StageError("synthesis", exc) from exc
    wall_synth = time.perf_counter() - t0

    # --- per-satellite coefficient estimation ----------------------
    t0 = time.perf_counter()
    try:
        pm = build_pilot_measurement(frames, cfg.Q_I, cfg)
        pilot_obs = slice_pilot(dd_batch.dd, layout)     # (S, rows, Na)
        ests = [mrf_bgm_amp(pilot_obs[s], pm.X_omega, cfg)
                for s in range(cfg.S_a)]
    except Exception as exc:
        raise StageError("initial", exc) from exc
    wall_initial = time.perf_counter() - t0
    iters_initial = max(e.iterations for e in ests)

    if mode == "non-cooperative":
        return _run_non_cooperative(cfg, seed, chash, real, frames,
                                    time_batch, dd_batch, ests,
                                    rng_detect, rng_refine, wall_synth,
                                    wall_initial, iters_initial, baselines)

    sats = list(range(cfg.S_a))
    energies = np.stack([device_energies(e.c_hat, cfg) for e in ests])
    lambda_hat = identify_devices(energies, cfg.eta_lambda)
    active = [u for u in range(cfg.U) if lambda_hat[u]]

    refits = [support_refit(pilot_obs[s], pm.X_omega, lambda_hat,
                            float(dd_batch.sigma2[s]), cfg) for s in sats]
    c_list = [r[0] for r in refits]
    tau_list = [r[1] for r in refits]
    bem_init = _initial_bem(c_list, lambda_hat, cfg, sats)
    h_init = _reconstruct(bem_init, cfg)

    # --- detection -------------------------------------------------
    t0 = time.perf_counter()
    try:
        det = initial_symbol_detect(dd_batch.dd, bem_init.c, bem_init.omega,
                                    dd_batch.sigma2, active, frames, cfg,
                                    sats=sats, rng=rng_detect)
    except Exception as exc:
        raise StageError("detect", exc) from exc
    wall_detect = time.perf_counter() - t0
    dec_init = _decisions_from(det.x_hat, active, cfg)
    aer, nmse_init, ser_init = compute_metrics(real, frames, lambda_hat,
                                               h_init, dec_init)

    # --- refinement ------------------------------------------------
    t0 = time.perf_counter()
    payload = 0
    iters_refine = 0
    if active:
        try:
            c0, tauc0 = expand_initial_estimate(c_list, tau_list,
                                                active, cfg)
            x0, tau0, pinned = _refinement_priors(det, frames, active, cfg)
            if mode == "centralized":
                solver = CentralizedAep(time_batch.y, time_batch.sigma2,
                                        active, cfg, rng=rng_refine)
                solver.set_channel_prior(c0, tauc0)
                solver.set_symbol_prior(x0, tau0, pinned=pinned)
                result = solver.run()
                iters_refine = result.iterations["channel"] \
                    + result.iterations["symbol"]
                bem_ref = result.bem
                h_ref = _refined_series(bem_ref, lambda_hat, cfg)
            else:
                workers = []
                for s in sats:
                    w = SatelliteWorker(
                        s, time_batch.y[s], float(time_batch.sigma2[s]),
                        active, cfg,
                        rng=np.random.default_rng(
                            np.random.SeedSequence([seed, 2, s])))
                    w.set_channel_prior(c0[:, :, s:s + 1],
                                        tauc0[:, :, s:s + 1])
                    w.set_symbol_prior(x0.copy(), tau0.copy(),
                                       pinned=pinned)
                    workers.append(w)
                dres = distributed_aep(workers, T_ex=cfg.T_ex,
                                       max_workers=max_workers)
                payload = dres.payload_bytes
                iters_refine = sum(
                    w.solver.iterations["channel"]
                    + w.solver.iterations["symbol"] for w in workers)
                # stitch the per-satellite channel posteriors back into
                # one coefficient tensor for the reconstruction metric
                parts = [w.solver._result() for w in workers]
                c_all = np.concatenate([p.bem.c[:, :, :, 0:1, :]
                                        for p in parts], axis=3)
                bem_ref = BemCoefficients(c_all, parts[0].bem.R,
                                          parts[0].bem.Q,
                                          parts[0].bem.omega)
                h_ref = _refined_series(bem_ref, lambda_hat, cfg)
            # the refinement carries symbols as Gaussian beliefs, which
            # drops the finite-alphabet information the first detection
            # pass exploited; decide from a constellation-aware pass
            # over the refined channel instead
            det_ref = initial_symbol_detect(
                dd_batch.dd, bem_ref.c, bem_ref.omega, dd_batch.sigma2,
                active, frames, cfg, sats=sats,
                rng=np.random.default_rng(np.random.SeedSequence(
                    [seed, 3])))
            x_ref = det_ref.x_hat
        except Exception as exc:
            raise StageError("refine", exc) from exc
        dec_ref = _decisions_from(x_ref, active, cfg)
        _, nmse_ref, ser_ref = compute_metrics(real, frames, lambda_hat,
                                               h_ref, dec_ref)
    else:
        zero = np.zeros_like(h_init)
        _, nmse_ref, ser_ref = compute_metrics(real, frames, lambda_hat,
                                               zero, {})
    wall_refine = time.perf_counter() - t0

    ser_mmse, ser_ols = _run_baselines(baselines, real, frames, dd_batch,
                                       bem_init, lambda_hat, active, cfg)
    return TrialResult(
        seed=seed, mode=mode, config_hash=chash, aer=aer,
        nmse_db=nmse_ref, ser=ser_ref, nmse_initial_db=nmse_init,
        nmse_refined_db=nmse_ref, ser_initial=ser_init,
        ser_refined=ser_ref, n_active_true=int(real.activity.sum()),
        n_active_est=len(active), iters_initial=iters_initial,
        iters_detect=det.iterations, iters_refine=iters_refine,
        payload_bytes=payload, ser_mmse=ser_mmse, ser_oracle_ls=ser_ols,
        wall_synth_s=wall_synth, wall_initial_s=wall_initial,
        wall_detect_s=wall_detect, wall_refine_s=wall_refine)


def _run_baselines(baselines, real, frames, dd_batch, bem_init,
                   lambda_hat, active, cfg):
    """Reference equalizer SERs on the same received grids."""
    ser_mmse = math.nan
    ser_ols = math.nan
    sats = list(range(cfg.S_a))
    y = np.concatenate([dd_batch.dd[s, a].flatten(order="F")
                        for s in sats for a in range(cfg.n_ant)])
    if "mmse" in baselines and active:
        fwd, adj, shape = detection_operator(bem_init.c, bem_init.omega,
                                             active, cfg, sats)
        x = baseline_mmse_equalizer(y, fwd, adj, shape[1],
                                    float(np.mean(dd_batch.sigma2)), cfg)
        dec = _decisions_from(x.reshape(len(active), cfg.MN), active, cfg)
        ser_mmse = symbol_error_rate(real.activity, lambda_hat, frames, dec)
    if "oracle-ls" in baselines:
        truth_active = [u for u in range(cfg.U) if real.activity[u]]
        if truth_active:
            fwd, adj, shape = true_channel_operator(real, cfg,
                                                    truth_active, sats)
            x = baseline_mmse_equalizer(y, fwd, adj, shape[1], 0.0, cfg)
            dec = _decisions_from(x.reshape(len(truth_active), cfg.MN),
                                  truth_active, cfg)
            ser_ols = symbol_error_rate(real.activity, real.activity,
                                        frames, dec)
    return ser_mmse, ser_ols


def _run_non_cooperative(cfg, seed, chash, real, frames, time_batch,
                         dd_batch, ests, rng_detect, rng_refine,
                         wall_synth, wall_initial, iters_initial,
                         baselines):
    """One isolated pipeline per satellite; metrics are averaged."""
    aers, nmse_is, ser_is, nmse_rs, ser_rs = [], [], [], [], []
    iters_detect = 0
    iters_refine = 0
    wall_detect = 0.0
    wall_refine = 0.0
    n_est = 0
    layout = build_layout(cfg)
    pm = build_pilot_measurement(frames, cfg.Q_I, cfg)
    pilot_obs = slice_pilot(dd_batch.dd, layout)
    for s in range(cfg.S_a):
        energies = device_energies(ests[s].c_hat, cfg)[None, :]
        lambda_hat = identify_devices(energies, cfg.eta_lambda)
        active = [u for u in range(cfg.U) if lambda_hat[u]]
        n_est = max(n_est, len(active))
        c_fit, tau_fit = support_refit(pilot_obs[s], pm.X_omega,
                                       lambda_hat,
                                       float(dd_batch.sigma2[s]), cfg)
        bem_init = _initial_bem([c_fit if i == s else e.c_hat
                                 for i, e in enumerate(ests)],
                                lambda_hat, cfg, [s])
        h_init = _reconstruct(bem_init, cfg)
        t0 = time.perf_counter()
        try:
            det = initial_symbol_detect(
                dd_batch.dd[s:s + 1], bem_init.c, bem_init.omega,
                dd_batch.sigma2[s:s + 1], active, frames, cfg,
                sats=[0], rng=rng_detect)
        except Exception as exc:
            raise StageError("detect", exc) from exc
        wall_detect += time.perf_counter() - t0
        iters_detect = max(iters_detect, det.iterations)
        dec_init = _decisions_from(det.x_hat, active, cfg)
        aer, nmse_i, ser_i = compute_metrics(real, frames, lambda_hat,
                                             h_init, dec_init, sats=[s])
        t0 = time.perf_counter()
        if active:
            try:
                c0, tauc0 = expand_initial_estimate(
                    [c_fit], [tau_fit], active, cfg)
                x0, tau0, pinned = _refinement_priors(det, frames,
                                                      active, cfg)
                solver = CentralizedAep(
                    time_batch.y[s:s + 1], time_batch.sigma2[s:s + 1],
                    active, cfg,
                    rng=np.random.default_rng(
                        np.random.SeedSequence([seed, 2, s])))
                solver.set_channel_prior(c0, tauc0)
                solver.set_symbol_prior(x0, tau0, pinned=pinned)
                result = solver.run()
                det_ref = initial_symbol_detect(
                    dd_batch.dd[s:s + 1], result.bem.c, result.bem.omega,
                    dd_batch.sigma2[s:s + 1], active, frames, cfg,
                    sats=[0],
                    rng=np.random.default_rng(np.random.SeedSequence(
                        [seed, 3, s])))
            except Exception as exc:
                raise StageError("refine", exc) from exc
            iters_refine += result.iterations["channel"] \
                + result.iterations["symbol"]
            h_ref = _refined_series(result.bem, lambda_hat, cfg)
            dec_ref = _decisions_from(det_ref.x_hat, active, cfg)
            _, nmse_r, ser_r = compute_metrics(real, frames, lambda_hat,
                                               h_ref, dec_ref, sats=[s])
        else:
            zero = np.zeros_like(h_init)
            _, nmse_r, ser_r = compute_metrics(real, frames, lambda_hat,
                                               zero, {}, sats=[s])
        wall_refine += time.perf_counter() - t0
        aers.append(aer)
        nmse_is.append(nmse_i)
        ser_is.append(ser_i)
        nmse_rs.append(nmse_r)
        ser_rs.append(ser_r)
    def mean(v):
        return float(np.mean(v))

    return TrialResult(
        seed=seed, mode="non-cooperative", config_hash=chash,
        aer=mean(aers), nmse_db=mean(nmse_rs), ser=mean(ser_rs),
        nmse_initial_db=mean(nmse_is), nmse_refined_db=mean(nmse_rs),
        ser_initial=mean(ser_is), ser_refined=mean(ser_rs),
        n_active_true=int(real.activity.sum()), n_active_est=n_est,
        iters_initial=iters_initial, iters_detect=iters_detect,
        iters_refine=iters_refine, payload_bytes=0,
        wall_synth_s=wall_synth, wall_initial_s=wall_initial,
        wall_detect_s=wall_detect, wall_refine_s=wall_refine)


# ============================================================
# Sweeps
# ============================================================

SWEEP_AXES = ("snr_db", "rho", "p_lambda", "S_a", "Q_R", "antennas")
SWEEP_METRICS = ("aer", "nmse_db", "ser", "nmse_initial_db", "ser_initial")


@dataclass
class SweepSpec:
    axis: str
    values: List[float]
    trials: int = 10
    mode: str = "centralized"
    seed: int = 0
    baselines: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ValueError(f"axis must be one of {SWEEP_AXES}")
        if not self.values:
            raise ValueError("sweep needs at least one axis value")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")

    @classmethod
    def load(cls, path) -> "SweepSpec":
        parser = configparser.ConfigParser()
        with open(path) as fh:
            parser.read_file(fh)
        sec = parser["sweep"]
        values = [float(v) for v in sec["values"].split(",") if v.strip()]
        baselines = tuple(b.strip() for b in
                          sec.get("baselines", "").split(",") if b.strip())
        return cls(axis=sec["axis"].strip(), values=values,
                   trials=sec.getint("trials", 10),
                   mode=sec.get("mode", "centralized").strip(),
                   seed=sec.getint("seed", 0), baselines=baselines)


def _layout_for_rho(cfg: ScenarioConfig, rho: float) -> ScenarioConfig:
    """Pick a pilot block whose overhead best approximates ``rho``."""
    M, N, L = cfg.M, cfg.N, cfg.L
    M_g, N_g = max(cfg.M_g, L), cfg.N_g
    l_p = max(L, M_g)
    k_p = N_g
    best = None
    for N_p in range(1, N - 2 * N_g + 1):
        for M_p in range(1, M - l_p - M_g + 1):
            r = (M_p + 2 * M_g) * (N_p + 2 * N_g) / (M * N)
            err = abs(r - rho)
            if best is None or err < best[0]:
                best = (err, M_p, N_p)
    if best is None:
        raise ValueError("no feasible pilot layout for this overhead")
    _, M_p, N_p = best
    return cfg.with_overrides(M_p=M_p, N_p=N_p, M_g=M_g, l_p=l_p, k_p=k_p)


def config_for_axis(cfg: ScenarioConfig, axis: str,
                    value: float) -> ScenarioConfig:
    if axis == "snr_db":
        return cfg.with_overrides(snr_db=float(value))
    if axis == "rho":
        return _layout_for_rho(cfg, float(value))
    if axis == "p_lambda":
        return cfg.with_overrides(p_lambda=float(value))
    if axis == "S_a":
        return cfg.with_overrides(S_a=int(value))
    if axis == "Q_R":
        return cfg.with_overrides(Q_R=int(value))
    if axis == "antennas":
        side = int(value)
        return cfg.with_overrides(N_z=side, N_y=side)
    raise ValueError(f"unknown sweep axis '{axis}'")


def trial_seed(master: int, point: int, trial: int) -> int:
    """Counter-derived per-trial seed, independent of execution order."""
    ss = np.random.SeedSequence([master, point, trial])
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFF)


@dataclass
class SweepResult:
    spec: SweepSpec
    rows: List[Dict]           # one per (axis value, trial)
    summary: List[Dict]        # mean + bootstrap CI per (value, metric)


def _bootstrap_ci(values: np.ndarray, rng: np.random.Generator,
                  n_resample: int = 200) -> Tuple[float, float]:
    if len(values) < 2:
        v = float(values[0]) if len(values) else math.nan
        return v, v
    idx = rng.integers(0, len(values), size=(n_resample, len(values)))
    means = values[idx].mean(axis=1)
    return float(np.percentile(means, 2.5)), \
        float(np.percentile(means, 97.5))


def run_sweep(spec: SweepSpec, cfg: ScenarioConfig,
              jobs: int = 1) -> SweepResult:
    """Seeded Monte-Carlo sweep along one axis.

    Trials run in parallel but land in a preallocated slot per
    (point, trial), so the output is byte-identical for any job count.
    A failing trial becomes a row with an error tag; the sweep goes on.
    """
    tasks = []
    for pi, value in enumerate(spec.values):
        cfg_v = config_for_axis(cfg, spec.axis, value)
        for t in range(spec.trials):
            tasks.append((pi, value, t, cfg_v))
    rows: List[Optional[Dict]] = [None] * len(tasks)

    def run_one(i):
        pi, value, t, cfg_v = tasks[i]
        seed = trial_seed(spec.seed, pi, t)
        base = {"axis": spec.axis, "value": value, "trial": t}
        try:
            res = run_trial(cfg_v, seed, mode=spec.mode,
                            baselines=spec.baselines)
            row = dict(zip(TRIAL_COLUMNS, res.to_row()))
        except StageError as exc:
            row = {k: math.nan for k in TRIAL_COLUMNS}
            row.update(seed=seed, mode=spec.mode,
                       config_hash=config_hash(cfg_v),
                       error=f"{exc.stage}: {exc.cause}")
        base.update(row)
        rows[i] = base

    if jobs <= 1:
        for i in range(len(tasks)):
            run_one(i)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            list(pool.map(run_one, range(len(tasks))))

    summary = []
    for pi, value in enumerate(spec.values):
        point_rows = [r for r in rows
                      if r["value"] == value and not r["error"]]
        rng = np.random.default_rng(
            np.random.SeedSequence([spec.seed, 10_000 + pi]))
        for metric in SWEEP_METRICS:
            vals = np.array([r[metric] for r in point_rows], dtype=float)
            vals = vals[np.isfinite(vals)]
            lo, hi = _bootstrap_ci(vals, rng)
            summary.append({
                "axis": spec.axis, "value": value, "metric": metric,
                "n": len(vals),
                "mean": float(vals.mean()) if len(vals) else math.nan,
                "ci_lo": lo, "ci_hi": hi,
            })
    return SweepResult(spec, rows, summary)


SWEEP_ROW_COLUMNS = ["axis", "value", "trial"] + TRIAL_COLUMNS
SUMMARY_COLUMNS = ["axis", "value", "metric", "n", "mean", "ci_lo", "ci_hi"]


def write_sweep_csv(result: SweepResult, path) -> str:
    """Write per-trial rows to ``path`` and the summary next to it.

    Returns the summary file path.
    """
    import csv
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_ROW_COLUMNS)
        for row in result.rows:
            writer.writerow([row[k] for k in SWEEP_ROW_COLUMNS])
    summary_path = str(path) + ".summary.csv"
    with open(summary_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for row in result.summary:
            writer.writerow([row[k] for k in SUMMARY_COLUMNS])
    return summary_path
