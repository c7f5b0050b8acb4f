"""Delay-Doppler channel matrices from physical path parameters.

Per-path time-domain model: h * exp(-j2pi*l*k/MN) * Delta(k) * (Psi(l) +
Psi_cp(l)), where l = tau*M*delta_f and k = nu*N*T are fractional delay
and Doppler taps, Delta is the diagonal Doppler ramp, Psi the
sinc-interpolated delay shift and Psi_cp the cyclic-prefix wrap band.
The DD-domain form conjugates by the unitary Kronecker DFT operators.

Index conventions were fixed by requiring exact agreement with the
brute-force ``oracle_cp_transmission`` simulation at every integer tap:
the wrap-band entry is sinc(MN - (j-i) - l) (argument zero at
j-i = MN-l), and the Doppler ramp is referenced to the first post-CP
sample. Derivatives are analytic; the round(l) split of Delta is treated
as locally constant, so taps near half-integers are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .otfs import FrameConfig, dd_to_td_matrix, td_to_dd_matrix

_EPS_TAP = 1e-6  # guard band for derivative validity


@dataclass(frozen=True)
class PathParams:
    """One propagation path: complex attenuation, delay (s), Doppler (Hz)."""

    gain: complex
    delay: float
    doppler: float
    kind: str = "communication"  # or "sensing"

    def __post_init__(self):
        if abs(self.gain) <= 0.0:
            raise ValueError("path gain must be nonzero")
        if self.kind not in ("communication", "sensing"):
            raise ValueError(f"unknown path kind '{self.kind}'")

    def taps(self, config: FrameConfig) -> tuple[float, float]:
        """Fractional (l, k) grid taps for this path."""
        return self.delay * config.M * config.delta_f, self.doppler * config.N * config.T


@dataclass(frozen=True)
class ChannelMatrix:
    domain: str                      # "td" | "dd"
    entries: np.ndarray              # MN x MN complex
    paths: tuple[PathParams, ...]
    per_path: tuple[np.ndarray, ...]  # same-domain single-path terms


def _split_index(l: float) -> int:
    # round-half-up keeps the split deterministic at exact .5 boundaries
    return int(np.floor(l + 0.5))


def _delta_exponents(l: float, mn: int) -> np.ndarray:
    """Diagonal exponents e with Delta = diag(eta^e), eta = exp(j2pi k/MN)."""
    split = _split_index(l)
    e = np.empty(mn)
    e[: mn - split] = np.arange(mn - split)
    e[mn - split:] = -l + np.arange(split)
    return e


def doppler_matrix(k: float, l: float, config: FrameConfig) -> np.ndarray:
    """Diagonal Doppler ramp Delta(k); the tail of round(l) entries wraps
    to eta^(-l+m) so integer taps reduce to a pure cyclic ramp."""
    mn = config.mn
    if not 0 <= l <= config.M - 1:
        raise ValueError(f"delay tap {l} outside [0, {config.M - 1}]")
    e = _delta_exponents(l, mn)
    return np.diag(np.exp(2j * np.pi * k * e / mn))


def delay_matrix(l: float, config: FrameConfig) -> np.ndarray:
    """Sinc-interpolated delay shift: entry (i, j) = sinc(i - j - l)."""
    if not 0 <= l <= config.M - 1:
        raise ValueError(f"delay tap {l} outside [0, {config.M - 1}]")
    idx = np.arange(config.mn)
    return np.sinc(idx[:, None] - idx[None, :] - l)


def cp_matrix(l: float, config: FrameConfig) -> np.ndarray:
    """Cyclic-prefix wrap band: sinc(MN - (j-i) - l) where j-i >= MN-1-L,
    zero elsewhere. The argument peaks (=1) at j-i = MN-l for integer l,
    which is what an explicit CP transmission produces."""
    if not 0 <= l <= config.M - 1:
        raise ValueError(f"delay tap {l} outside [0, {config.M - 1}]")
    mn = config.mn
    idx = np.arange(mn)
    d = idx[None, :] - idx[:, None]  # j - i
    band = d >= mn - 1 - config.cp_len
    return np.where(band, np.sinc(mn - d - l), 0.0)


def _validate_taps(paths: Iterable[PathParams], config: FrameConfig):
    for p_idx, path in enumerate(paths):
        l, k = path.taps(config)
        if not 0 <= l <= config.M - 1 or not 0 <= k <= config.N - 1:
            raise ValueError(
                f"path {p_idx}: taps (l={l:.4g}, k={k:.4g}) outside the "
                f"[0,{config.M - 1}] x [0,{config.N - 1}] grid"
            )


def _td_single_path(path: PathParams, config: FrameConfig) -> np.ndarray:
    l, k = path.taps(config)
    mn = config.mn
    phase = np.exp(-2j * np.pi * l * k / mn)
    diag = np.exp(2j * np.pi * k * _delta_exponents(l, mn) / mn)
    shift = delay_matrix(l, config) + cp_matrix(l, config)
    return path.gain * phase * (diag[:, None] * shift)


def td_channel(paths, config: FrameConfig) -> ChannelMatrix:
    """Time-domain channel: sum of per-path twisted shift terms."""
    paths = tuple(paths)
    if not paths:
        raise ValueError("need at least one path")
    _validate_taps(paths, config)
    per_path = tuple(_td_single_path(p, config) for p in paths)
    return ChannelMatrix("td", sum(per_path), paths, per_path)


def _to_dd(mat_td: np.ndarray, config: FrameConfig) -> np.ndarray:
    W_dd = td_to_dd_matrix(config.M, config.N)
    W_td = dd_to_td_matrix(config.M, config.N)
    return W_dd @ mat_td @ W_td


def dd_channel(paths, config: FrameConfig) -> ChannelMatrix:
    """Delay-Doppler channel: unitary conjugation of the TD form."""
    td = td_channel(paths, config)
    per_path = tuple(_to_dd(m, config) for m in td.per_path)
    return ChannelMatrix("dd", sum(per_path), td.paths, per_path)


# ---- analytic derivatives ---------------------------------------------------


def _dsinc(x: np.ndarray) -> np.ndarray:
    """d/dx sinc(x) = (cos(pi x) - sinc(x))/x, series-expanded near 0."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-4
    safe = np.where(small, 1.0, x)
    out = (np.cos(np.pi * x) - np.sinc(x)) / safe
    series = -(np.pi ** 2) * x / 3.0 + (np.pi ** 4) * x ** 3 / 30.0
    return np.where(small, series, out)


def _check_derivative_taps(l: float, k: float, config: FrameConfig):
    if not (_EPS_TAP < l < config.M - 1 - _EPS_TAP):
        raise ValueError(f"delay tap {l} too close to the grid edge for derivatives")
    if not (_EPS_TAP < k < config.N - 1 - _EPS_TAP):
        raise ValueError(f"Doppler tap {k} too close to the grid edge for derivatives")
    if abs((l % 1.0) - 0.5) <= _EPS_TAP:
        raise ValueError(
            f"delay tap {l} sits on a half-integer split of the Doppler ramp; "
            "derivative undefined across the piecewise boundary"
        )


def _g_and_partials(path: PathParams, config: FrameConfig):
    """Unit-gain DD matrix G and its partials in tap units (dG/dl, dG/dk)."""
    l, k = path.taps(config)
    _check_derivative_taps(l, k, config)
    mn = config.mn
    split = _split_index(l)
    e = _delta_exponents(l, mn)
    diag = np.exp(2j * np.pi * k * e / mn)
    tail = np.zeros(mn)
    tail[mn - split:] = 1.0

    psi = delay_matrix(l, config)
    idx = np.arange(mn)
    diff = idx[:, None] - idx[None, :]
    dpsi = -_dsinc(diff - l)
    d = -diff  # j - i
    band = d >= mn - 1 - config.cp_len
    psi_cp = np.where(band, np.sinc(mn - d - l), 0.0)
    dpsi_cp = np.where(band, -_dsinc(mn - d - l), 0.0)

    phase = np.exp(-2j * np.pi * l * k / mn)
    S = psi + psi_cp
    dS = dpsi + dpsi_cp
    base = diag[:, None] * S
    w = 2j * np.pi / mn

    t = phase * base
    # d/dl: phase factor, the eta^(-l+m) tail of Delta, and every sinc entry
    dt_dl = phase * ((-w * k) * base + (-w * k) * (tail * diag)[:, None] * S
                     + diag[:, None] * dS)
    # d/dk: phase factor and the eta exponents of Delta
    dt_dk = phase * ((-w * l) * base + (w * e * diag)[:, None] * S)
    return _to_dd(t, config), _to_dd(dt_dl, config), _to_dd(dt_dk, config)


def channel_derivative(path: PathParams, wrt: str, config: FrameConfig,
                       tap_units: bool = False) -> np.ndarray:
    """DD-domain derivative of the per-path matrix h*G(tau, nu).

    Parameters
    ----------
    wrt : one of "h_re", "h_im", "tau", "nu"
    tap_units : if True, "tau"/"nu" differentiate with respect to the
        grid taps (l, k) instead of seconds/Hz — the same matrices scaled
        by 1/(M*delta_f) and 1/(N*T); useful for conditioning.
    """
    g, dg_dl, dg_dk = _g_and_partials(path, config)
    if wrt == "h_re":
        return g
    if wrt == "h_im":
        return 1j * g
    if wrt == "tau":
        scale = 1.0 if tap_units else config.M * config.delta_f
        return path.gain * scale * dg_dl
    if wrt == "nu":
        scale = 1.0 if tap_units else config.N * config.T
        return path.gain * scale * dg_dk
    raise ValueError(f"unknown derivative target '{wrt}'")


DERIVATIVE_ORDER = ("h_re", "h_im", "nu", "tau")  # estimation-parameter order


def derivative_stack(path: PathParams, config: FrameConfig,
                     tap_units: bool = False) -> list[np.ndarray]:
    """All four parameter derivatives in estimation order."""
    g, dg_dl, dg_dk = _g_and_partials(path, config)
    s_tau = 1.0 if tap_units else config.M * config.delta_f
    s_nu = 1.0 if tap_units else config.N * config.T
    return [g, 1j * g, path.gain * s_nu * dg_dk, path.gain * s_tau * dg_dl]


# ---- brute-force reference --------------------------------------------------


def oracle_cp_transmission(d, path: PathParams, config: FrameConfig) -> np.ndarray:
    """Explicit CP transmission for integer taps: prepend the last L
    samples, shift by l over the extended sequence, apply the Doppler
    ramp (origin at the first post-CP sample), scale, drop the CP.

    Ground truth for the matrix model's index conventions.
    """
    d = np.asarray(d, dtype=complex).reshape(-1)
    mn = config.mn
    if d.size != mn:
        raise ValueError(f"expected {mn} samples, got {d.size}")
    l, k = path.taps(config)
    if abs(l - round(l)) > 1e-9 or abs(k - round(k)) > 1e-9:
        raise ValueError(f"oracle needs integer taps, got (l={l}, k={k})")
    l, k = int(round(l)), int(round(k))
    if l > config.cp_len:
        raise ValueError(
            f"delay tap {l} exceeds the CP length {config.cp_len}; "
            "inter-frame interference is outside the model"
        )
    ext = np.concatenate([d[mn - config.cp_len:], d]) if config.cp_len else d
    n = np.arange(mn)
    delayed = ext[n + config.cp_len - l] if config.cp_len else d[(n - l) % mn]
    ramp = np.exp(2j * np.pi * k * n / mn)
    return path.gain * np.exp(-2j * np.pi * l * k / mn) * ramp * delayed
