import numpy as np
import pytest

from otfs_isac.channel import (
    DERIVATIVE_ORDER,
    PathParams,
    channel_derivative,
    cp_matrix,
    dd_channel,
    delay_matrix,
    derivative_stack,
    doppler_matrix,
    oracle_cp_transmission,
    td_channel,
)
from otfs_isac.otfs import FrameConfig, dd_to_td_matrix, td_to_dd_matrix


def make_config(M=8, N=8, cp_len=3):
    return FrameConfig(M=M, N=N, delta_f=15e3, f0=3e9, cp_len=cp_len)


def path_from_taps(l, k, config, gain=1.0 + 0.0j, kind="communication"):
    return PathParams(
        gain=gain,
        delay=l / (config.M * config.delta_f),
        doppler=k / (config.N * config.T),
        kind=kind,
    )


def test_taps_round_trip():
    cfg = make_config()
    p = path_from_taps(2.375, 4.125, cfg, gain=0.3 - 0.1j)
    l, k = p.taps(cfg)
    assert abs(l - 2.375) < 1e-12
    assert abs(k - 4.125) < 1e-12


def test_path_validation():
    with pytest.raises(ValueError):
        PathParams(gain=0.0, delay=1e-6, doppler=100.0)
    with pytest.raises(ValueError):
        PathParams(gain=1.0, delay=1e-6, doppler=100.0, kind="radar")
    cfg = make_config()
    bad = path_from_taps(7.5, 1.0, cfg)  # l > M-1
    with pytest.raises(ValueError, match="outside"):
        td_channel([bad], cfg)


def test_delay_matrix_integer_shift():
    cfg = make_config(M=4, N=4, cp_len=2)
    psi = delay_matrix(2.0, cfg)
    mn = cfg.mn
    expect = np.zeros((mn, mn))
    for i in range(2, mn):
        expect[i, i - 2] = 1.0
    assert np.allclose(psi, expect, atol=1e-12)


def test_cp_matrix_band_and_peak():
    cfg = make_config(M=4, N=4, cp_len=2)
    mn = cfg.mn
    for l in (1, 2):
        cp = cp_matrix(float(l), cfg)
        idx = np.arange(mn)
        d = idx[None, :] - idx[:, None]
        assert np.all(cp[d < mn - 1 - cfg.cp_len] == 0.0)
        # integer taps leave a single unit entry per wrapped row, at the
        # column the cyclic shift takes it from: j - i = MN - l
        nz = np.argwhere(np.abs(cp) > 1e-12)
        assert len(nz) == l
        for i, j in nz:
            assert j - i == mn - l
            assert abs(cp[i, j] - 1.0) < 1e-12


def test_doppler_matrix_integer_taps_pure_ramp():
    cfg = make_config(M=4, N=4, cp_len=2)
    mn = cfg.mn
    for l in (0.0, 1.0, 2.0):
        for k in (0.0, 1.0, 3.0):
            delta = doppler_matrix(k, l, cfg)
            ramp = np.exp(2j * np.pi * k * np.arange(mn) / mn)
            assert np.allclose(np.diag(delta), ramp, atol=1e-12)
            assert np.count_nonzero(delta - np.diag(np.diag(delta))) == 0


def test_doppler_matrix_fractional_tail():
    cfg = make_config(M=4, N=4, cp_len=2)
    mn = cfg.mn
    l, k = 1.8, 0.7
    delta = np.diag(doppler_matrix(k, l, cfg))
    split = 2  # round(1.8)
    head = np.exp(2j * np.pi * k * np.arange(mn - split) / mn)
    tail = np.exp(2j * np.pi * k * (-l + np.arange(split)) / mn)
    assert np.allclose(delta, np.concatenate([head, tail]), atol=1e-12)


def test_matrix_model_matches_cp_transmission_all_integer_taps():
    cfg = make_config(M=8, N=8, cp_len=3)
    rng = np.random.default_rng(7)
    d = rng.normal(size=cfg.mn) + 1j * rng.normal(size=cfg.mn)
    for l in range(cfg.cp_len + 1):
        for k in range(cfg.N):
            p = path_from_taps(float(l), float(k), cfg, gain=0.8 - 0.4j)
            h_td = td_channel([p], cfg).entries
            ref = oracle_cp_transmission(d, p, cfg)
            assert np.max(np.abs(h_td @ d - ref)) < 1e-9, (l, k)


def test_oracle_rejects_fractional_and_long_taps():
    cfg = make_config(M=8, N=8, cp_len=3)
    d = np.ones(cfg.mn, dtype=complex)
    with pytest.raises(ValueError, match="integer"):
        oracle_cp_transmission(d, path_from_taps(1.3, 2.0, cfg), cfg)
    with pytest.raises(ValueError, match="CP"):
        oracle_cp_transmission(d, path_from_taps(5.0, 2.0, cfg), cfg)
    with pytest.raises(ValueError, match="samples"):
        oracle_cp_transmission(d[:-1], path_from_taps(1.0, 2.0, cfg), cfg)


def test_dd_channel_unitary_image_of_td():
    cfg = make_config(M=4, N=4, cp_len=2)
    p = path_from_taps(1.37, 2.21, cfg, gain=0.5 + 0.2j)
    td = td_channel([p], cfg)
    dd = dd_channel([p], cfg)
    w_dd = td_to_dd_matrix(cfg.M, cfg.N)
    w_td = dd_to_td_matrix(cfg.M, cfg.N)
    assert np.allclose(dd.entries, w_dd @ td.entries @ w_td, atol=1e-12)
    assert abs(np.linalg.norm(dd.entries) - np.linalg.norm(td.entries)) < 1e-10


def test_dd_sparsity_integer_taps():
    cfg = make_config(M=8, N=8, cp_len=3)
    p = path_from_taps(2.0, 3.0, cfg, gain=0.8 - 0.4j)
    h_dd = dd_channel([p], cfg).entries
    mags = np.abs(h_dd)
    nz = mags > 1e-10
    assert np.count_nonzero(nz) == cfg.mn
    assert np.allclose(mags[nz], abs(p.gain), atol=1e-10)
    # fractional taps leak across the whole grid instead
    pf = path_from_taps(2.3, 3.4, cfg, gain=0.8 - 0.4j)
    frac = np.abs(dd_channel([pf], cfg).entries)
    assert np.count_nonzero(frac > 1e-10) > 10 * cfg.mn


def test_multipath_linearity():
    cfg = make_config(M=4, N=4, cp_len=2)
    p1 = path_from_taps(0.8, 1.3, cfg, gain=0.7 + 0.1j)
    p2 = path_from_taps(1.9, 2.6, cfg, gain=-0.2 + 0.4j)
    both = td_channel([p1, p2], cfg)
    assert np.allclose(
        both.entries,
        td_channel([p1], cfg).entries + td_channel([p2], cfg).entries,
        atol=1e-12,
    )
    assert np.allclose(both.per_path[0] + both.per_path[1], both.entries, atol=1e-12)
    doubled = path_from_taps(0.8, 1.3, cfg, gain=2 * (0.7 + 0.1j))
    assert np.allclose(
        td_channel([doubled], cfg).entries, 2 * td_channel([p1], cfg).entries, atol=1e-12
    )


def _unit_gain_dd(l, k, cfg):
    return dd_channel([path_from_taps(l, k, cfg)], cfg).entries


def test_gain_derivatives_are_exact():
    cfg = make_config(M=4, N=4, cp_len=2)
    p = path_from_taps(1.37, 2.21, cfg, gain=0.5 - 0.3j)
    g = _unit_gain_dd(1.37, 2.21, cfg)
    assert np.allclose(channel_derivative(p, "h_re", cfg), g, atol=1e-12)
    assert np.allclose(channel_derivative(p, "h_im", cfg), 1j * g, atol=1e-12)
    assert np.allclose(
        dd_channel([p], cfg).entries, p.gain * g, atol=1e-12
    )


def test_delay_doppler_derivatives_match_finite_differences():
    cfg = make_config(M=4, N=4, cp_len=2)
    gain = 0.5 - 0.3j
    l, k = 1.37, 2.21
    p = path_from_taps(l, k, cfg, gain=gain)
    step = 1e-5

    fd_l = gain * (_unit_gain_dd(l + step, k, cfg) - _unit_gain_dd(l - step, k, cfg)) / (2 * step)
    an_l = channel_derivative(p, "tau", cfg, tap_units=True)
    assert np.max(np.abs(fd_l - an_l)) / np.max(np.abs(an_l)) < 1e-6

    fd_k = gain * (_unit_gain_dd(l, k + step, cfg) - _unit_gain_dd(l, k - step, cfg)) / (2 * step)
    an_k = channel_derivative(p, "nu", cfg, tap_units=True)
    assert np.max(np.abs(fd_k - an_k)) / np.max(np.abs(an_k)) < 1e-6


def test_finite_difference_error_shrinks_with_step():
    cfg = make_config(M=4, N=4, cp_len=2)
    l, k = 0.83, 1.61
    p = path_from_taps(l, k, cfg)
    an = channel_derivative(p, "tau", cfg, tap_units=True)
    errs = []
    for step in (1e-3, 1e-4, 1e-5):
        fd = (_unit_gain_dd(l + step, k, cfg) - _unit_gain_dd(l - step, k, cfg)) / (2 * step)
        errs.append(np.max(np.abs(fd - an)))
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] / np.max(np.abs(an)) < 1e-7


def test_physical_unit_derivatives_scale_from_tap_units():
    cfg = make_config(M=4, N=4, cp_len=2)
    p = path_from_taps(1.37, 2.21, cfg, gain=0.5 - 0.3j)
    tau_t = channel_derivative(p, "tau", cfg, tap_units=True)
    nu_t = channel_derivative(p, "nu", cfg, tap_units=True)
    assert np.allclose(
        channel_derivative(p, "tau", cfg), cfg.M * cfg.delta_f * tau_t, atol=1e-9
    )
    assert np.allclose(
        channel_derivative(p, "nu", cfg), cfg.N * cfg.T * nu_t, atol=1e-9
    )


def test_derivative_stack_order_and_values():
    cfg = make_config(M=4, N=4, cp_len=2)
    p = path_from_taps(1.37, 2.21, cfg, gain=0.5 - 0.3j)
    stack = derivative_stack(p, cfg)
    assert DERIVATIVE_ORDER == ("h_re", "h_im", "nu", "tau")
    for name, mat in zip(DERIVATIVE_ORDER, stack):
        assert np.allclose(mat, channel_derivative(p, name, cfg), atol=1e-12)


def test_derivative_guards():
    cfg = make_config(M=4, N=4, cp_len=2)
    with pytest.raises(ValueError, match="half-integer"):
        channel_derivative(path_from_taps(1.5, 2.0, cfg), "tau", cfg)
    with pytest.raises(ValueError, match="edge"):
        channel_derivative(path_from_taps(1e-9, 2.0, cfg), "tau", cfg)
    with pytest.raises(ValueError, match="edge"):
        channel_derivative(path_from_taps(1.2, 3.0 - 1e-9, cfg), "nu", cfg)
    with pytest.raises(ValueError, match="unknown"):
        channel_derivative(path_from_taps(1.2, 2.0, cfg), "delay", cfg)
