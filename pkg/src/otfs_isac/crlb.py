"""Fisher information and CRLB of the sensing parameter vector.

The parameter vector stacks, per sensing path, (Re h, Im h, nu, tau).
The Fisher information for the DD observation y = H(xi) P s + w with
w ~ CN(0, sigma_A^2 I) and known s statistics is

    I_ij = (2 sigma_s^2 / sigma_A^2) Re tr(D_i P P^H D_j^H),

with D_i the per-parameter channel derivative. The CRLB is the inverse.

Physical-unit FIMs mix entries spanning ~30 orders of magnitude (tau in
seconds against Re h of order one), so raw condition numbers say nothing
about actual collinearity. Inversion therefore works on the diagonally
equilibrated matrix F_eq = S F S, S = diag(F)^{-1/2}: its conditioning
is invariant to parameter units, the ridge trigger fires only on genuine
degeneracy, and the inverse maps back exactly as S F_eq^{-1} S.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channel import PathParams, derivative_stack
from .otfs import SPEED_OF_LIGHT, FrameConfig, map_symbols

COND_LIMIT = 1e12
RIDGE_SCALE = 1e-9

# per-path offsets inside the stacked parameter vector
_IDX_NU = 2
_IDX_TAU = 3


@dataclass(frozen=True)
class FisherInfo:
    entries: np.ndarray          # 4P x 4P real symmetric
    paths: tuple[PathParams, ...]
    config: FrameConfig
    tap_units: bool = False      # True: derivatives taken w.r.t. (l, k) taps

    @property
    def num_paths(self) -> int:
        return len(self.paths)


@dataclass(frozen=True)
class CRLBMatrix:
    entries: np.ndarray          # inverse FIM, same parameterization as input
    crlb_tau: np.ndarray         # s^2, per path
    crlb_nu: np.ndarray          # Hz^2, per path
    crlb_range: np.ndarray       # m^2, per path, two-way geometry
    crlb_velocity: np.ndarray    # (m/s)^2, per path, two-way geometry
    regularized: bool
    cond: float                  # of the equilibrated FIM


def _derivative_products(paths, preeq, config, tap_units):
    mats = []
    for path in paths:
        if path.kind != "sensing":
            raise ValueError("Fisher information is defined over sensing paths")
        mats.extend(d @ preeq for d in derivative_stack(path, config, tap_units=tap_units))
    return mats


def fim(paths, preeq: np.ndarray, config: FrameConfig, tap_units: bool = False) -> FisherInfo:
    """Closed-form Fisher information for the given pre-equalizer."""
    paths = tuple(paths)
    if not paths:
        raise ValueError("need at least one sensing path")
    preeq = np.asarray(preeq, dtype=complex)
    if preeq.shape != (config.mn, config.mn):
        raise ValueError(f"pre-equalizer must be {config.mn}x{config.mn}, got {preeq.shape}")
    mats = _derivative_products(paths, preeq, config, tap_units)
    n = len(mats)
    entries = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            # Re tr(A_i A_j^H) over complex matrices
            v = np.sum(mats[i].real * mats[j].real) + np.sum(mats[i].imag * mats[j].imag)
            entries[i, j] = entries[j, i] = v
    entries *= 2.0 * config.sigma2_s / config.sigma2_a
    return FisherInfo(entries, paths, config, tap_units)


def fim_monte_carlo(paths, preeq: np.ndarray, config: FrameConfig,
                    num_draws: int = 10_000, seed: int = 0,
                    tap_units: bool = False) -> FisherInfo:
    """Pre-expectation estimator: averages Re{(D_j P s)^H (D_i P s)} over
    random QPSK frames. Slow; used to validate the closed form."""
    paths = tuple(paths)
    mats = np.stack(_derivative_products(paths, preeq, config, tap_units))
    n = mats.shape[0]
    rng = np.random.default_rng(seed)
    acc = np.zeros((n, n))
    chunk = 512
    done = 0
    while done < num_draws:
        b = min(chunk, num_draws - done)
        bits = rng.integers(0, 2, size=(b, 2 * config.mn))
        s = np.stack([map_symbols(row, 2, config) for row in bits])
        a = np.einsum("imk,bk->bim", mats, s)
        acc += np.einsum("bim,bjm->ij", a, a.conj()).real
        done += b
    entries = (2.0 / config.sigma2_a) * acc / num_draws
    entries = 0.5 * (entries + entries.T)
    return FisherInfo(entries, paths, config, tap_units)


def crlb(info: FisherInfo, ridge: float = 0.0) -> CRLBMatrix:
    """Invert the Fisher information.

    A user ridge is added as FIM + ridge*I before equilibration. With
    ridge = 0 and equilibrated condition number above COND_LIMIT, an
    automatic ridge of RIDGE_SCALE * tr(F_eq)/n (= RIDGE_SCALE, since the
    equilibrated diagonal is all ones) is applied and the result flagged.
    """
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    f = np.asarray(info.entries, dtype=float)
    f = 0.5 * (f + f.T)
    n = f.shape[0]
    a = f + ridge * np.eye(n) if ridge else f
    d = np.diag(a)
    s = 1.0 / np.sqrt(np.where(d > 0, d, 1.0))
    a_eq = a * np.outer(s, s)
    cond = float(np.linalg.cond(a_eq))
    regularized = ridge > 0
    if not np.isfinite(cond) or cond > COND_LIMIT:
        if ridge == 0:
            a_eq = a_eq + (RIDGE_SCALE * np.trace(a_eq) / n) * np.eye(n)
            regularized = True
    c_eq = np.linalg.inv(a_eq)
    c = c_eq * np.outer(s, s)
    c = 0.5 * (c + c.T)

    cfg = info.config
    diag_c = np.diag(c)
    var_nu = diag_c[_IDX_NU::4].copy()
    var_tau = diag_c[_IDX_TAU::4].copy()
    if info.tap_units:
        var_nu = var_nu / (cfg.N * cfg.T) ** 2
        var_tau = var_tau / (cfg.M * cfg.delta_f) ** 2
    crlb_range = (SPEED_OF_LIGHT / 2.0) ** 2 * var_tau
    crlb_velocity = (SPEED_OF_LIGHT / (2.0 * cfg.f0)) ** 2 * var_nu
    return CRLBMatrix(c, var_tau, var_nu, crlb_range, crlb_velocity, regularized, cond)


def sensing_objective(bound: CRLBMatrix, range_ref: float = 1.0,
                      velocity_ref: float = 1.0) -> float:
    """Dimensionless scalarization: sum over paths of range and velocity
    CRLBs, each normalized by a squared reference scale. Attenuation
    entries are nuisance parameters and excluded."""
    if range_ref <= 0 or velocity_ref <= 0:
        raise ValueError("reference scales must be positive")
    return float(np.sum(bound.crlb_range) / range_ref ** 2
                 + np.sum(bound.crlb_velocity) / velocity_ref ** 2)
