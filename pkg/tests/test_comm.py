import math

import numpy as np
import pytest

from otfs_isac.comm import (
    beta,
    complexity_report,
    expected_mse,
    mmse_expected_mse,
    mmse_receiver,
    monte_carlo_link,
    receiver_complexity,
    regularized_inverse,
    zf_preeq,
)
from otfs_isac.otfs import FrameConfig, map_symbols


def make_config(M=4, N=4, **kw):
    kw.setdefault("delta_f", 15e3)
    kw.setdefault("f0", 3e9)
    kw.setdefault("cp_len", min(2, M - 1))
    return FrameConfig(M=M, N=N, **kw)


def random_channel(rng, mn, spread=0.2):
    # well-conditioned perturbation of the identity
    return np.eye(mn) + spread * (rng.normal(size=(mn, mn)) + 1j * rng.normal(size=(mn, mn))) / np.sqrt(mn)


def test_beta_noiseless_identity():
    cfg = make_config(sigma2_u=0.0)
    eye = np.eye(cfg.mn)
    assert beta(eye, eye, cfg) == pytest.approx(1.0, abs=1e-12)
    assert beta(eye, 2 * eye, cfg) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(ValueError, match="undefined"):
        beta(eye, np.zeros_like(eye), cfg)


def test_beta_normalizes_received_power():
    cfg = make_config(M=2, N=2)
    rng = np.random.default_rng(4)
    h = random_channel(rng, cfg.mn)
    p = random_channel(rng, cfg.mn)
    b = beta(h, p, cfg)
    hp = h @ p
    acc = 0.0
    draws = 10_000
    sigma = np.sqrt(cfg.sigma2_u / 2)
    for _ in range(draws):
        s = map_symbols(rng.integers(0, 2, size=2 * cfg.mn), 2, cfg)
        y = hp @ s + sigma * (rng.normal(size=cfg.mn) + 1j * rng.normal(size=cfg.mn))
        acc += np.sum(np.abs(b * y) ** 2)
    assert acc / draws == pytest.approx(cfg.mn * cfg.sigma2_s, rel=0.02)


def test_beta_unitary_invariance():
    cfg = make_config()
    rng = np.random.default_rng(8)
    h = random_channel(rng, cfg.mn)
    p = random_channel(rng, cfg.mn)
    q, _ = np.linalg.qr(rng.normal(size=(cfg.mn, cfg.mn))
                        + 1j * rng.normal(size=(cfg.mn, cfg.mn)))
    assert beta(q @ h, p, cfg) == pytest.approx(beta(h, p, cfg), rel=1e-12)
    assert np.linalg.norm(q @ h @ p) == pytest.approx(np.linalg.norm(h @ p), rel=1e-12)


def test_expected_mse_limits():
    cfg0 = make_config(sigma2_u=0.0)
    eye = np.eye(cfg0.mn)
    assert expected_mse(eye, eye, cfg0) == pytest.approx(0.0, abs=1e-9)
    cfg = make_config()
    assert expected_mse(eye, np.zeros_like(eye), cfg) == pytest.approx(2 * cfg.mn * cfg.sigma2_s)


def test_expected_mse_matches_monte_carlo():
    cfg = make_config(M=2, N=2)
    rng = np.random.default_rng(15)
    h = random_channel(rng, cfg.mn)
    p = random_channel(rng, cfg.mn)
    report = monte_carlo_link(h, p, cfg, n_frames=20_000, seed=99)
    assert abs(report.mse_mc - report.mse_closed) < 3 * report.mse_stderr
    assert report.mse_closed > 0


def test_qpsk_ber_matches_awgn_curve():
    # identity channel at 7 dB symbol SNR; direct receiver is exactly
    # the scalar AWGN link, so BER must follow Q(sqrt(Es/N0)) per rail
    cfg = make_config()
    es_n0 = 10 ** 0.7
    gain = np.sqrt(es_n0 * cfg.sigma2_u / cfg.sigma2_s)
    report = monte_carlo_link(np.eye(cfg.mn), gain * np.eye(cfg.mn), cfg,
                              n_frames=3000, seed=31)
    ber_oracle = 0.5 * math.erfc(np.sqrt(es_n0) / np.sqrt(2.0))
    assert ber_oracle > 1e-4
    assert report.ber == pytest.approx(ber_oracle, rel=0.2)


def test_noiseless_zero_forcing_is_error_free():
    cfg = make_config(sigma2_u=0.0)
    rng = np.random.default_rng(23)
    h = random_channel(rng, cfg.mn)
    p = zf_preeq(h, cfg)
    report = monte_carlo_link(h, p, cfg, n_frames=50, seed=7)
    assert report.ber == 0.0
    assert report.mse_mc < 1e-18


def test_mmse_receiver_baselines():
    cfg = make_config()
    rng = np.random.default_rng(42)
    # scalar Wiener shrinkage on the identity channel
    y = rng.normal(size=cfg.mn) + 1j * rng.normal(size=cfg.mn)
    shat = mmse_receiver(np.eye(cfg.mn), y, cfg)
    assert np.allclose(shat, y * cfg.sigma2_s / (cfg.sigma2_s + cfg.sigma2_u), atol=1e-12)
    # noiseless limit: exact inversion
    cfg0 = make_config(sigma2_u=0.0)
    h = random_channel(rng, cfg0.mn)
    s = map_symbols(rng.integers(0, 2, size=2 * cfg0.mn), 2, cfg0)
    assert np.allclose(mmse_receiver(h, h @ s, cfg0), s, atol=1e-8)


def test_mmse_never_worse_than_zf_receiver():
    cfg = make_config()
    rng = np.random.default_rng(5)
    for _ in range(20):
        h = random_channel(rng, cfg.mn)
        zf_mse = cfg.sigma2_u * np.real(np.trace(np.linalg.inv(h.conj().T @ h)))
        assert mmse_expected_mse(h, cfg) <= zf_mse + 1e-12
    # empirical agreement with the closed form on one instance
    h = random_channel(rng, cfg.mn)
    errs = np.empty(4000)
    sigma = np.sqrt(cfg.sigma2_u / 2)
    for t in range(4000):
        s = map_symbols(rng.integers(0, 2, size=2 * cfg.mn), 2, cfg)
        y = h @ s + sigma * (rng.normal(size=cfg.mn) + 1j * rng.normal(size=cfg.mn))
        errs[t] = np.sum(np.abs(mmse_receiver(h, y, cfg) - s) ** 2)
    stderr = errs.std(ddof=1) / np.sqrt(errs.size)
    assert abs(errs.mean() - mmse_expected_mse(h, cfg)) < 3 * stderr


def test_zf_preeq_normalization_and_residual():
    cfg = make_config()
    eye = np.eye(cfg.mn)
    assert np.allclose(zf_preeq(eye, cfg), eye, atol=1e-12)
    assert np.allclose(zf_preeq(2 * eye, cfg), eye, atol=1e-12)
    rng = np.random.default_rng(77)
    h = random_channel(rng, cfg.mn)
    p = zf_preeq(h, cfg)
    assert np.linalg.norm(p) ** 2 == pytest.approx(cfg.p_max, abs=1e-9)
    hp = h @ p
    scale = np.trace(hp) / cfg.mn
    assert np.max(np.abs(hp / scale - eye)) < 1e-6


def test_regularized_inverse_policy():
    rng = np.random.default_rng(3)
    a = np.eye(6) + 0.1 * rng.normal(size=(6, 6))
    inv, flagged = regularized_inverse(a)
    assert not flagged
    assert np.allclose(inv @ a, np.eye(6), atol=1e-10)
    bad = np.diag([1.0, 1e-12, 1.0, 1.0])
    inv2, flagged2 = regularized_inverse(bad)
    assert flagged2
    assert np.all(np.isfinite(inv2))
    with pytest.raises(ValueError, match="square"):
        regularized_inverse(np.ones((3, 2)))


def test_zf_mse_vanishes_with_noise():
    rng = np.random.default_rng(19)
    values = []
    for s2u in (1e-2, 1e-4, 1e-6):
        cfg = make_config(sigma2_u=s2u)
        h = random_channel(np.random.default_rng(19), cfg.mn)
        values.append(expected_mse(h, zf_preeq(h, cfg), cfg))
    assert values[0] > values[1] > values[2]
    assert values[2] < 1e-4


def test_receiver_complexity_counts():
    assert receiver_complexity(16, 16, 2, "conventional") == 16_778_240
    assert receiver_complexity(16, 16, 2, "preeq") == 1_024
    assert receiver_complexity(2, 2, 2, "conventional") == 80
    assert receiver_complexity(2, 2, 2, "preeq") == 16
    rep = complexity_report(2, 2, 2)
    assert rep["reduction_percent"] == pytest.approx(80.0)
    reductions = [complexity_report(m, m, 2)["reduction_percent"] for m in (2, 4, 8, 16)]
    assert reductions == sorted(reductions)
    with pytest.raises(ValueError, match="scheme"):
        receiver_complexity(4, 4, 2, "other")
