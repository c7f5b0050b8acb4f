"""Communication-side metrics: closed-form and Monte-Carlo MSE of the
scaled direct receiver, MMSE and zero-forcing baselines, BER, and the
receiver complexity model.

The intended receiver applies only the power normalization beta to the
received DD frame and demaps; all equalization effort lives in the
transmit-side pre-equalizer, which is what makes the low-complexity
receiver possible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .otfs import FrameConfig, demap_symbols, map_symbols

INV_COND_LIMIT = 1e10
INV_RIDGE_SCALE = 1e-9


@dataclass(frozen=True)
class LinkReport:
    mse_closed: float
    mse_mc: float
    mse_stderr: float
    ber: float
    beta: float
    snr_tx_db: float
    n_frames: int


def beta(h: np.ndarray, p: np.ndarray, config: FrameConfig) -> float:
    """Receive power normalization: E|beta*y|^2 = MN*sigma_s^2."""
    hp2 = float(np.linalg.norm(h @ p) ** 2)
    mn = config.mn
    denom = config.sigma2_s * hp2 + mn * config.sigma2_u
    if denom <= 0:
        raise ValueError("normalization undefined: zero effective channel and zero noise")
    return float(np.sqrt(mn * config.sigma2_s / denom))


def expected_mse(h: np.ndarray, p: np.ndarray, config: FrameConfig) -> float:
    """Closed-form frame MSE of the beta-scaled direct receiver:
    2*MN*sigma_s^2 - 2*beta*sigma_s^2*Re tr(H P)."""
    b = beta(h, p, config)
    mn = config.mn
    return float(2.0 * mn * config.sigma2_s
                 - 2.0 * b * config.sigma2_s * np.real(np.trace(h @ p)))


def monte_carlo_link(h: np.ndarray, p: np.ndarray, config: FrameConfig,
                     n_frames: int = 1000, order: int = 2, seed: int = 0) -> LinkReport:
    """Simulate s -> P s -> H -> +noise -> beta scaling -> demap."""
    if n_frames < 1:
        raise ValueError("need at least one frame")
    rng = np.random.default_rng(seed)
    mn = config.mn
    b = beta(h, p, config)
    hp = h @ p
    sq_err = np.empty(n_frames)
    bit_err = 0
    nbits = order * mn
    sigma_u = np.sqrt(config.sigma2_u / 2.0)
    for t in range(n_frames):
        bits = rng.integers(0, 2, size=nbits)
        s = map_symbols(bits, order, config)
        y = hp @ s
        if config.sigma2_u > 0:
            y = y + sigma_u * (rng.normal(size=mn) + 1j * rng.normal(size=mn))
        z = b * y
        sq_err[t] = float(np.sum(np.abs(z - s) ** 2))
        bit_err += int(np.sum(demap_symbols(z, order, config) != bits))
    mse_mc = float(np.mean(sq_err))
    stderr = float(np.std(sq_err, ddof=1) / np.sqrt(n_frames)) if n_frames > 1 else 0.0
    snr_tx = float(np.linalg.norm(p) ** 2 / (mn * config.sigma2_u)) if config.sigma2_u > 0 else np.inf
    return LinkReport(
        mse_closed=expected_mse(h, p, config),
        mse_mc=mse_mc,
        mse_stderr=stderr,
        ber=bit_err / (nbits * n_frames),
        beta=b,
        snr_tx_db=10.0 * np.log10(snr_tx) if np.isfinite(snr_tx) else np.inf,
        n_frames=n_frames,
    )


def mmse_receiver(h: np.ndarray, y: np.ndarray, config: FrameConfig) -> np.ndarray:
    """Linear MMSE estimate (H^H H + (sigma_u^2/sigma_s^2) I)^-1 H^H y.

    Conventional-receiver baseline: needs full CSI and an MN x MN solve
    at the receiver, which the pre-equalized link avoids.
    """
    mn = config.mn
    a = h.conj().T @ h + (config.sigma2_u / config.sigma2_s) * np.eye(mn)
    try:
        return np.linalg.solve(a, h.conj().T @ y)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"MMSE system singular (noiseless with rank-deficient channel): {exc}")


def mmse_expected_mse(h: np.ndarray, config: FrameConfig) -> float:
    """Closed-form frame MSE of the linear MMSE receiver:
    sigma_s^2 tr((I + (sigma_s^2/sigma_u^2) H^H H)^-1)."""
    if config.sigma2_u <= 0:
        raise ValueError("MMSE closed form needs positive noise power")
    mn = config.mn
    a = np.eye(mn) + (config.sigma2_s / config.sigma2_u) * (h.conj().T @ h)
    return float(config.sigma2_s * np.real(np.trace(np.linalg.inv(a))))


def regularized_inverse(mat: np.ndarray) -> tuple[np.ndarray, bool]:
    """Tikhonov-stabilized inverse: (A^H A + ridge I)^-1 A^H with
    ridge = INV_RIDGE_SCALE*tr(A^H A)/n, applied only when the condition
    number exceeds INV_COND_LIMIT. Returns (inverse, flagged)."""
    mat = np.asarray(mat, dtype=complex)
    n = mat.shape[0]
    if mat.shape != (n, n):
        raise ValueError(f"expected a square matrix, got {mat.shape}")
    gram = mat.conj().T @ mat
    cond = np.linalg.cond(mat)
    if np.isfinite(cond) and cond <= INV_COND_LIMIT:
        return np.linalg.inv(mat), False
    ridge = INV_RIDGE_SCALE * float(np.real(np.trace(gram))) / n
    return np.linalg.solve(gram + ridge * np.eye(n), mat.conj().T), True


def zf_preeq(h: np.ndarray, config: FrameConfig) -> np.ndarray:
    """Zero-forcing pre-equalizer: channel inverse scaled onto the full
    power budget, sqrt(P_max) * H^-1 / ||H^-1||_F."""
    inv, _ = regularized_inverse(h)
    return float(np.sqrt(config.p_max)) / np.linalg.norm(inv) * inv


def receiver_complexity(M: int, N: int, o: int, scheme: str) -> int:
    """Complex multiplications per frame at the receiver. The
    conventional receiver pays an MN x MN equalization solve plus
    demapping; the pre-equalized receiver only demaps."""
    mn = M * N
    demap = (2 ** o) * mn
    if scheme == "conventional":
        return mn ** 3 + demap
    if scheme == "preeq":
        return demap
    raise ValueError(f"unknown scheme '{scheme}'")


def complexity_report(M: int, N: int, o: int) -> dict:
    conv = receiver_complexity(M, N, o, "conventional")
    pre = receiver_complexity(M, N, o, "preeq")
    return {
        "M": M, "N": N, "order": o,
        "conventional": conv,
        "preeq": pre,
        "reduction_percent": 100.0 * (1.0 - pre / conv),
    }
