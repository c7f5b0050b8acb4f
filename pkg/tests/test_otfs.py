"""Frame config, Gray mapping, and unitary DD/TD transform tests."""

import numpy as np
import pytest

from otfs_isac.otfs import (
    FrameConfig, dd_to_td, dd_to_td_matrix, demap_symbols, dft_matrix,
    map_symbols, td_to_dd, td_to_dd_matrix, _dd_to_td,
)


def small_config(M=4, N=4, **kw):
    return FrameConfig(M=M, N=N, cp_len=kw.pop("cp_len", min(2, M - 1)), **kw)


def test_config_validation():
    cfg = FrameConfig()
    assert cfg.T * cfg.delta_f == pytest.approx(1.0)
    assert cfg.mn == 256 and cfg.p_max == 256.0
    with pytest.raises(ValueError, match="2x2"):
        FrameConfig(M=1, N=4)
    with pytest.raises(ValueError, match="cp_len"):
        FrameConfig(M=4, N=4, cp_len=4)
    with pytest.raises(ValueError, match="reciprocal"):
        FrameConfig(T=1e-3)
    with pytest.raises(ValueError, match="positive"):
        FrameConfig(sigma2_s=0.0)
    with pytest.raises(ValueError, match="nonnegative"):
        FrameConfig(sigma2_u=-0.1)
    # zero noise powers are legal: they model noiseless reference links
    assert FrameConfig(sigma2_u=0.0).sigma2_u == 0.0


def test_qpsk_gray_corner():
    cfg = small_config(M=2, N=2)
    s = map_symbols(np.zeros(2 * 4, dtype=int), 2, cfg)
    assert np.allclose(s, (1 + 1j) / np.sqrt(2) * np.ones(4))


def test_constellation_average_power_exact():
    cfg = small_config(M=2, N=2)
    for order in (2, 4):
        # all bit patterns for one symbol, uniform average power = sigma2_s
        patterns = [(np.arange(2 ** order) >> k) & 1 for k in range(order - 1, -1, -1)]
        bits = np.stack(patterns, axis=1)
        pts = np.array(
            [map_symbols(np.tile(row, cfg.mn), order, cfg)[0] for row in bits]
        )
        assert np.mean(np.abs(pts) ** 2) == pytest.approx(cfg.sigma2_s, abs=1e-12)
        # Gray property: adjacent levels along each axis differ by one bit
        assert len(np.unique(pts)) == 2 ** order


def test_map_demap_round_trip_all_orders():
    cfg = small_config()
    rng = np.random.default_rng(23)
    for order in (2, 4):
        bits = rng.integers(0, 2, size=order * cfg.mn)
        assert np.array_equal(demap_symbols(map_symbols(bits, order, cfg), order, cfg), bits)


def test_demap_nearest_point():
    cfg = small_config(M=2, N=2)
    y = np.full(4, (0.9 + 1.1j) / np.sqrt(2))
    assert np.array_equal(demap_symbols(y, 2, cfg)[:2], [0, 0])


def test_ber_at_20db_small():
    cfg = small_config()
    rng = np.random.default_rng(31)
    n_frames = 500
    bits = rng.integers(0, 2, size=(n_frames, 2 * cfg.mn))
    sigma = np.sqrt(10 ** (-20 / 10) / 2)
    errs = 0
    for row in bits:
        s = map_symbols(row, 2, cfg)
        y = s + sigma * (rng.normal(size=s.size) + 1j * rng.normal(size=s.size))
        errs += np.count_nonzero(demap_symbols(y, 2, cfg) != row)
    assert errs / bits.size < 1e-3


def test_mapper_rejects_bad_input():
    cfg = small_config()
    with pytest.raises(ValueError, match="bits"):
        map_symbols(np.zeros(3), 2, cfg)
    with pytest.raises(ValueError, match="order"):
        map_symbols(np.zeros(6 * cfg.mn), 6, cfg)
    with pytest.raises(ValueError, match="0/1"):
        map_symbols(np.full(2 * cfg.mn, 2), 2, cfg)


def test_dd_to_td_basis_vector():
    cfg = small_config(M=2, N=2, cp_len=1)
    x = np.zeros(4, dtype=complex)
    x[0] = 1.0
    assert np.allclose(dd_to_td(x, cfg), np.array([1, 0, 1, 0]) / np.sqrt(2))


def test_transforms_unitary_and_inverse():
    cfg = small_config(M=8, N=4)
    rng = np.random.default_rng(41)
    for _ in range(10):
        x = rng.normal(size=cfg.mn) + 1j * rng.normal(size=cfg.mn)
        d = dd_to_td(x, cfg)
        assert np.linalg.norm(d) == pytest.approx(np.linalg.norm(x), abs=1e-12)
        assert np.allclose(td_to_dd(d, cfg), x, atol=1e-12)
        assert np.linalg.norm(td_to_dd(x, cfg)) == pytest.approx(np.linalg.norm(x), abs=1e-12)


def test_fft_equals_kronecker_matrix():
    for M, N in ((2, 2), (4, 8), (8, 8)):
        K = dd_to_td_matrix(M, N)
        rng = np.random.default_rng(M * 10 + N)
        x = rng.normal(size=M * N) + 1j * rng.normal(size=M * N)
        assert np.allclose(_dd_to_td(x, M, N), K @ x, atol=1e-10)
        assert np.allclose(td_to_dd_matrix(M, N) @ K, np.eye(M * N), atol=1e-10)


def test_composition_identity_on_all_basis_vectors():
    for M, N in ((2, 2), (4, 4), (8, 8)):
        K = td_to_dd_matrix(M, N) @ dd_to_td_matrix(M, N)
        assert np.allclose(K, np.eye(M * N), atol=1e-12)


def test_degenerate_single_doppler_bin_is_identity():
    x = np.arange(5.0) + 1j
    assert np.allclose(_dd_to_td(x, 5, 1), x, atol=1e-15)


def test_dft_matrix_unitary():
    F = dft_matrix(6)
    assert np.allclose(F @ F.conj().T, np.eye(6), atol=1e-12)
