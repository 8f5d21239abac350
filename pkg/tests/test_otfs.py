"""Frame layout and the modulation/demodulation chain."""

import numpy as np
import pytest

from otfs_ra.channel import ScenarioConfig
from otfs_ra.otfs import (QPSK, FrameLayout, LayoutError, build_layout,
                          demodulate_dd, generate_frame, hard_decide_qpsk,
                          modulate)


def desk_cfg(**kw):
    return ScenarioConfig().with_overrides(**kw)


def headline_cfg():
    # the 32x15 grid with a 192-cell training region gives rho = 0.4
    return desk_cfg(M=32, N=15, M_cp=2, l_p=4, k_p=3, M_p=12, N_p=8,
                    M_g=2, N_g=2, Q_I=4, tau_max=2.5e-7)


# ---------- layout ----------

def test_rho_exact_headline_numbers():
    layout = build_layout(headline_cfg())
    assert layout.rho == pytest.approx(192 / 480)
    assert layout.rho == pytest.approx(0.4)


def test_rho_matches_mask_cardinality():
    layout = build_layout(desk_cfg())
    n_train = int((~layout.data_mask).sum())
    assert layout.rho == pytest.approx(n_train / (layout.M * layout.N))


def test_layout_guard_too_small():
    with pytest.raises(LayoutError):
        build_layout(desk_cfg(M_g=1))


def test_layout_region_overflow():
    with pytest.raises(LayoutError):
        build_layout(desk_cfg(N_p=7))


def test_all_data_layout():
    layout = build_layout(desk_cfg(M_p=0, N_p=0, M_g=0, N_g=0, l_p=2))
    assert layout.rho == 0.0
    assert layout.data_mask.all()


def test_masks_partition():
    layout = build_layout(desk_cfg())
    total = (layout.data_mask.astype(int) + layout.pilot_mask.astype(int)
             + layout.guard_mask.astype(int))
    assert np.all(total == 1)


# ---------- frame generation ----------

def test_data_cells_are_qpsk():
    layout = build_layout(desk_cfg())
    frame = generate_frame(layout, np.random.default_rng(0))
    data = frame.X_dd[layout.data_mask]
    d = np.min(np.abs(data[:, None] - QPSK[None, :]), axis=1)
    assert np.all(d < 1e-12)


def test_pilot_power_lln():
    cfg = desk_cfg(M=64, N=32, M_p=40, N_p=20, l_p=8, k_p=4, M_g=2, N_g=2,
                   tau_max=1e-7)
    layout = build_layout(cfg)
    frame = generate_frame(layout, np.random.default_rng(1))
    train = frame.X_dd[~layout.data_mask]
    assert len(train) >= 1000
    assert np.mean(np.abs(train) ** 2) == pytest.approx(1.0, abs=0.1)


def test_frame_seed_reproducible():
    layout = build_layout(desk_cfg())
    a = generate_frame(layout, np.random.default_rng(5))
    b = generate_frame(layout, np.random.default_rng(5))
    assert np.array_equal(a.X_dd, b.X_dd)


# ---------- modulation chain ----------

def test_modulate_n1_passthrough():
    cfg = desk_cfg(N=1, M_p=0, N_p=0, M_g=0, N_g=0, l_p=2)
    layout = build_layout(cfg)
    frame = generate_frame(layout, np.random.default_rng(2))
    b = modulate(frame, 3)
    assert np.allclose(b[3:], frame.X_dd[:, 0])
    assert np.allclose(b[:3], frame.X_dd[-3:, 0])


def test_modulate_isometry_and_cp():
    layout = build_layout(desk_cfg())
    frame = generate_frame(layout, np.random.default_rng(3))
    b = modulate(frame, 4)
    body = b[4:]
    assert np.linalg.norm(body) == pytest.approx(
        np.linalg.norm(frame.X_dd))
    assert np.allclose(b[:4], body[-4:])


def test_demodulate_round_trip():
    layout = build_layout(desk_cfg())
    frame = generate_frame(layout, np.random.default_rng(4))
    body = modulate(frame, 2)[2:]
    Y = demodulate_dd(body, layout.M, layout.N)
    assert np.allclose(Y, frame.X_dd, atol=1e-12)


def test_demodulate_zero_and_energy():
    assert not np.any(demodulate_dd(np.zeros(128, complex), 16, 8))
    rng = np.random.default_rng(6)
    r = rng.standard_normal(128) + 1j * rng.standard_normal(128)
    Y = demodulate_dd(r, 16, 8)
    assert np.linalg.norm(Y) == pytest.approx(np.linalg.norm(r))


def test_demodulate_length_check():
    with pytest.raises(ValueError):
        demodulate_dd(np.zeros(100, complex), 16, 8)


def test_hard_decide():
    pts = QPSK[np.array([0, 3, 1, 2])]
    noisy = pts + 0.1 * (np.array([1, -1, 1, -1]) + 1j)
    assert np.allclose(hard_decide_qpsk(noisy), pts)
