"""OTFS frame configuration, Gray QAM mapping, and the unitary
delay-Doppler <-> time-domain transforms.

Vectors over the DD grid are vectorized column by column: entry (m, n) of
the M x N grid sits at index n*M + m. Both transforms use the unitary
(1/sqrt(N)) DFT convention so they are isometries; the DD->TD map is
(F_N^H kron I_M) and the TD->DD map is its inverse (F_N kron I_M).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

SPEED_OF_LIGHT = 3.0e8  # m/s


@dataclass(frozen=True)
class FrameConfig:
    """OTFS grid geometry and radio constants."""

    M: int = 16                 # delay bins
    N: int = 16                 # Doppler bins
    delta_f: float = 15e3      # subcarrier spacing, Hz
    f0: float = 3e9            # carrier frequency, Hz
    cp_len: int = 4            # cyclic prefix length L, samples
    T: float = None            # slot duration, s (defaults to 1/delta_f)
    c: float = SPEED_OF_LIGHT
    sigma2_s: float = 1.0      # symbol power
    sigma2_u: float = 0.1      # UE-side noise power
    sigma2_a: float = 0.01     # AP-side noise power
    p_max: float = None        # transmit power budget (defaults to M*N)

    def __post_init__(self):
        if self.T is None:
            object.__setattr__(self, "T", 1.0 / self.delta_f)
        if self.p_max is None:
            object.__setattr__(self, "p_max", float(self.M * self.N))
        if self.M < 2 or self.N < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.M}x{self.N}")
        if not 0 <= self.cp_len < self.M:
            raise ValueError(f"cp_len must lie in [0, M), got {self.cp_len}")
        if abs(self.T * self.delta_f - 1.0) > 1e-12:
            raise ValueError("slot duration must be the reciprocal of delta_f")
        if self.sigma2_s <= 0 or self.p_max <= 0:
            raise ValueError("symbol power and power budget must be positive")
        if self.sigma2_u < 0 or self.sigma2_a < 0:
            raise ValueError("noise powers must be nonnegative")
        if self.f0 <= 0 or self.delta_f <= 0:
            raise ValueError("frequencies must be positive")

    @property
    def mn(self) -> int:
        return self.M * self.N

    @property
    def wavelength(self) -> float:
        return self.c / self.f0

    @property
    def slot_period(self) -> float:
        """Frame duration N*T: the parameter sampling period."""
        return self.N * self.T


# ---- symbol mapping ---------------------------------------------------------

# Gray-coded per-axis levels: index by the bit pair (b_hi, b_lo)
_GRAY2 = {(0, 0): -3.0, (0, 1): -1.0, (1, 1): 1.0, (1, 0): 3.0}
_GRAY2_LEVELS = np.array([-3.0, -1.0, 1.0, 3.0])
_GRAY2_BITS = [(0, 0), (0, 1), (1, 1), (1, 0)]


def map_symbols(bits, order: int, config: FrameConfig) -> np.ndarray:
    """Gray-map a bit sequence onto M*N constellation symbols.

    order 2 = QPSK, order 4 = 16-QAM; average symbol power sigma2_s.
    """
    bits = np.asarray(bits).reshape(-1)
    mn = config.mn
    if order not in (2, 4):
        raise ValueError(f"modulation order must be 2 or 4, got {order}")
    if bits.size != order * mn:
        raise ValueError(f"need {order * mn} bits for order {order}, got {bits.size}")
    if np.any((bits != 0) & (bits != 1)):
        raise ValueError("bits must be 0/1")
    b = bits.reshape(mn, order)
    amp = np.sqrt(config.sigma2_s)
    if order == 2:
        # one bit per axis, 0 -> +1, 1 -> -1
        i = 1.0 - 2.0 * b[:, 0]
        q = 1.0 - 2.0 * b[:, 1]
        return amp / np.sqrt(2.0) * (i + 1j * q)
    # 16-QAM: two Gray bits per axis, levels {-3,-1,1,3}/sqrt(10)
    idx_i = 2 * b[:, 0] + b[:, 1]
    idx_q = 2 * b[:, 2] + b[:, 3]
    lut = np.empty(4)
    for k, (hi, lo) in enumerate(_GRAY2_BITS):
        lut[2 * hi + lo] = _GRAY2[(hi, lo)]
    return amp / np.sqrt(10.0) * (lut[idx_i] + 1j * lut[idx_q])


def demap_symbols(symbols, order: int, config: FrameConfig) -> np.ndarray:
    """Minimum-distance hard decision back to bits (inverse of map_symbols)."""
    y = np.asarray(symbols).reshape(-1)
    amp = np.sqrt(config.sigma2_s)
    out = np.empty((y.size, order), dtype=np.uint8)
    if order == 2:
        out[:, 0] = (y.real < 0)
        out[:, 1] = (y.imag < 0)
        return out.reshape(-1)
    if order != 4:
        raise ValueError(f"modulation order must be 2 or 4, got {order}")
    a = amp / np.sqrt(10.0)
    for col, axis in ((0, y.real), (2, y.imag)):
        # nearest of {-3,-1,1,3}*a via the midpoint thresholds
        idx = np.digitize(axis, [-2.0 * a, 0.0, 2.0 * a])
        hi_lo = np.array(_GRAY2_BITS, dtype=np.uint8)[idx]
        out[:, col] = hi_lo[:, 0]
        out[:, col + 1] = hi_lo[:, 1]
    return out.reshape(-1)


# ---- DD <-> TD transforms ---------------------------------------------------


def dft_matrix(n: int) -> np.ndarray:
    """Unitary n-point DFT matrix."""
    idx = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(idx, idx) / n) / np.sqrt(n)


@lru_cache(maxsize=None)
def dd_to_td_matrix(M: int, N: int) -> np.ndarray:
    """Explicit (F_N^H kron I_M) operator, for tests and matrix conjugation."""
    return np.kron(dft_matrix(N).conj().T, np.eye(M))


@lru_cache(maxsize=None)
def td_to_dd_matrix(M: int, N: int) -> np.ndarray:
    return np.kron(dft_matrix(N), np.eye(M))


def _unvec(x, M, N):
    return np.asarray(x).reshape((M, N), order="F")


def _dd_to_td(x, M: int, N: int) -> np.ndarray:
    X = _unvec(x, M, N)
    return np.fft.ifft(X, axis=1, norm="ortho").reshape(-1, order="F")


def _td_to_dd(r, M: int, N: int) -> np.ndarray:
    R = _unvec(r, M, N)
    return np.fft.fft(R, axis=1, norm="ortho").reshape(-1, order="F")


def dd_to_td(x, config: FrameConfig) -> np.ndarray:
    """Apply (F_N^H kron I_M): DD symbol vector -> TD sample vector."""
    x = np.asarray(x)
    if x.size != config.mn:
        raise ValueError(f"expected length {config.mn}, got {x.size}")
    return _dd_to_td(x, config.M, config.N)


def td_to_dd(r, config: FrameConfig) -> np.ndarray:
    """Apply (F_N kron I_M): TD sample vector -> DD symbol vector."""
    r = np.asarray(r)
    if r.size != config.mn:
        raise ValueError(f"expected length {config.mn}, got {r.size}")
    return _td_to_dd(r, config.M, config.N)
