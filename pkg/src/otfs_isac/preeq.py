"""Dual-branch residual network that designs the pre-equalization matrix.

Inputs are real [Re; Im] stacks of the inverted (possibly imperfect) CSI
communication channel and of the sensing-path derivative matrices, both
in tap units so all entries live on comparable scales. Two dense branches
(one per input family) meet in a fusion stack whose output is added to
the flattened channel inverse: a zero-weight network therefore emits
exactly the zero-forcing pre-equalizer, and training only has to learn a
correction on top of it. The last step projects onto the power budget,
P_hat = sqrt(P_max) * P / ||P||_F.

The training objective blends the two link-level figures of merit,

    L2 = rho_c * MSE/mse_ref + (1 - rho_c) * SENS/crlb_ref + rho_l * sum ||w||^2,

where SENS is the range/velocity CRLB scalarization of the true sensing
path and the refs are each instance's values at its zero-forcing point,
so both terms start near one and rho_c keeps its meaning across scenes.
The propagation channel inside the loss is always the true one; only the
network inputs carry predicted or outdated CSI. Everything runs on the
reverse-mode tape, including the CRLB: the Fisher matrix is assembled in
tap units and inverted on-tape, with the equilibrated-conditioning ridge
policy of the sensing bound applied as a frozen constant (gradients flow
through the Fisher entries, not through the trigger).
"""

from __future__ import annotations

from copy import deepcopy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .channel import ChannelMatrix, PathParams, dd_channel, derivative_stack
from .comm import expected_mse, regularized_inverse
from .containers import load_weights, save_weights
from .crlb import COND_LIMIT, RIDGE_SCALE, FisherInfo, crlb, sensing_objective
from .otfs import SPEED_OF_LIGHT, FrameConfig

_WIDTHS = (128, 256, 512)
_BRANCHES = ("comm", "sens", "fuse")
_CLAMP_MARGIN = 1e-3  # taps kept this far inside the grid when clamping
_HALF_GUARD = 1e-5    # nudge distance off half-integer delay taps


@dataclass(frozen=True)
class PreEqConfig:
    dropout: float = 0.1      # rate after the first two dense layers
    lr: float = 1e-3          # Adamax step size
    batch_size: int = 16
    epochs: int = 60
    rho_l: float = 1e-6       # weight-norm regularization
    init_scale: float = 1e-3  # uniform init half-width
    val_fraction: float = 0.125
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("training hyperparameters must be positive")
        if self.rho_l < 0 or self.init_scale <= 0:
            raise ValueError("rho_l must be nonnegative and init_scale positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass
class PreEqNetwork:
    config: PreEqConfig
    mn: int
    weights: dict = field(repr=False)


@dataclass(frozen=True)
class PreEqInputs:
    """Real-stacked network inputs, each shaped (2 MN, MN)."""

    inv_channel: np.ndarray
    d_tau: np.ndarray
    d_nu: np.ndarray

    def __post_init__(self):
        for name in ("inv_channel", "d_tau", "d_nu"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            object.__setattr__(self, name, a)
            if a.ndim != 2 or a.shape[0] != 2 * a.shape[1]:
                raise ValueError(f"{name} must be a (2n, n) real stack, got {a.shape}")
            if a.shape != self.inv_channel.shape:
                raise ValueError("input stacks must share one shape")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} contains non-finite entries")

    @property
    def mn(self) -> int:
        return self.inv_channel.shape[1]

    @property
    def comm_flat(self) -> np.ndarray:
        return self.inv_channel.reshape(-1)

    @property
    def sens_flat(self) -> np.ndarray:
        return np.concatenate([self.d_tau.reshape(-1), self.d_nu.reshape(-1)])


@dataclass(frozen=True)
class PreEqInstance:
    """One training/evaluation example: imperfect-CSI inputs, true channel."""

    inputs: PreEqInputs
    h_true: np.ndarray        # (MN, MN) complex DD propagation channel
    d_true: np.ndarray        # (P_S, 4, MN, MN) complex tap-unit derivatives
    mse_ref: float            # expected MSE at the instance's ZF point
    crlb_ref: float           # sensing objective at the instance's ZF point
    meta: dict = field(default_factory=dict)


@dataclass(frozen=True)
class PreEqEval:
    mse_c: float              # mean expected MSE over instances
    sensing: float            # mean range/velocity CRLB scalarization
    rmse_velocity: float      # mean sqrt(velocity CRLB), m/s
    rmse_range: float         # mean sqrt(range CRLB), m
    norm_mse: float           # mean MSE / mse_ref
    norm_sensing: float       # mean sensing / crlb_ref


@dataclass(frozen=True)
class InferenceResult:
    preeq: np.ndarray         # (MN, MN) complex, ||.||_F^2 = P_max
    clamped: bool             # some predicted tap was pulled into range
    inverse_regularized: bool  # CSI inversion needed a ridge


# ---------------------------------------------------------------------------
# input assembly
# ---------------------------------------------------------------------------


def stack_complex(z: np.ndarray) -> np.ndarray:
    """[Re; Im] stack along the row dimension."""
    z = np.asarray(z, dtype=complex)
    if z.ndim != 2:
        raise ValueError("expected a matrix")
    return np.vstack([z.real, z.imag])


def unstack_complex(stack: np.ndarray) -> np.ndarray:
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 2 or stack.shape[0] % 2:
        raise ValueError("expected a (2n, m) real stack")
    half = stack.shape[0] // 2
    return stack[:half] + 1j * stack[half:]


def assemble_inputs(inv: np.ndarray, d_tau: np.ndarray, d_nu: np.ndarray) -> PreEqInputs:
    mats = [np.asarray(m, dtype=complex) for m in (inv, d_tau, d_nu)]
    shape = mats[0].shape
    if len(shape) != 2 or shape[0] != shape[1]:
        raise ValueError(f"inputs must be square matrices, got {shape}")
    if any(m.shape != shape for m in mats):
        raise ValueError("inverse and derivative matrices must share one shape")
    return PreEqInputs(*(stack_complex(m) for m in mats))


# ---------------------------------------------------------------------------
# CSI processing
# ---------------------------------------------------------------------------


def reconstruct_paths(params: np.ndarray, kinds, config: FrameConfig):
    """Path objects from (n_paths, 4) rows of (Re h, Im h, tau, nu).

    Out-of-grid taps are clamped into the usable range and delay taps
    sitting on a half-integer split are nudged off it, so a bad
    prediction degrades the design instead of halting it. Returns
    (paths, clamped flag).
    """
    params = np.atleast_2d(np.asarray(params, dtype=np.float64))
    kinds = tuple(kinds)
    if params.shape != (len(kinds), 4):
        raise ValueError(f"expected ({len(kinds)}, 4) parameter rows, got {params.shape}")
    l_scale = config.M * config.delta_f
    k_scale = config.N * config.T
    clamped = False
    paths = []
    for row, kind in zip(params, kinds):
        gain = complex(row[0], row[1])
        if gain == 0:
            gain = complex(1e-30, 0.0)
            clamped = True
        l, k = row[2] * l_scale, row[3] * k_scale
        lc = float(np.clip(l, _CLAMP_MARGIN, config.M - 1 - _CLAMP_MARGIN))
        kc = float(np.clip(k, _CLAMP_MARGIN, config.N - 1 - _CLAMP_MARGIN))
        clamped = clamped or lc != l or kc != k
        if abs((lc % 1.0) - 0.5) <= _HALF_GUARD:
            lc += 2.0 * _HALF_GUARD
            clamped = True
        paths.append(PathParams(gain, lc / l_scale, kc / k_scale, kind))
    return paths, clamped


def reconstruct_channel(params: np.ndarray, kinds, config: FrameConfig):
    """DD matrix of the communication paths in a predicted parameter set."""
    paths, clamped = reconstruct_paths(params, kinds, config)
    comm = [p for p in paths if p.kind == "communication"]
    if not comm:
        raise ValueError("no communication paths to reconstruct")
    return dd_channel(comm, config), clamped


def invert_csi(h) -> tuple[np.ndarray, bool]:
    """Tikhonov-guarded inverse of a (reconstructed) channel matrix."""
    entries = h.entries if isinstance(h, ChannelMatrix) else np.asarray(h, dtype=complex)
    if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
        raise ValueError("channel matrix must be square")
    return regularized_inverse(entries)


def derivative_inputs(path: PathParams, config: FrameConfig):
    """(d_tau, d_nu) tap-unit derivative matrices of one sensing path."""
    stack = derivative_stack(path, config, tap_units=True)
    return stack[3], stack[2]


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


def _layer_dims(mn: int) -> dict:
    sq = mn * mn
    dims = {}
    for branch, d_in, d_out in (
        ("comm", 2 * sq, sq), ("sens", 4 * sq, sq), ("fuse", 2 * sq, 2 * sq),
    ):
        sizes = (d_in, *_WIDTHS, d_out)
        for j in range(4):
            dims[f"{branch}.w{j}"] = (sizes[j], sizes[j + 1])
            dims[f"{branch}.b{j}"] = (sizes[j + 1],)
    return dims


def init_network(config: PreEqConfig, mn: int) -> PreEqNetwork:
    """Glorot trunks, tiny fusion head.

    Only the last linear layer is drawn at U(+-init_scale); it alone sets the
    residual magnitude, so the network starts within a fraction of a percent
    of the plain ZF pre-equalizer while every hidden layer already carries
    O(1) features.  An all-tiny init would also start at ZF but the residual
    then has to grow through seven near-zero factors and the loss barely
    moves within the epoch budget.
    """
    rng = np.random.default_rng(config.seed)
    weights = {}
    for name, shape in _layer_dims(mn).items():
        if not name.split(".")[1].startswith("w"):
            weights[name] = np.zeros(shape)
        elif name == "fuse.w3":
            weights[name] = rng.uniform(-config.init_scale, config.init_scale, shape)
        else:
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            weights[name] = rng.uniform(-limit, limit, shape)
    return PreEqNetwork(config, mn, weights)


def _dropout_masks(rng, batch: int, rate: float) -> dict:
    keep = 1.0 - rate
    masks = {}
    for branch in _BRANCHES:
        for j in (0, 1):
            draw = rng.random((batch, _WIDTHS[j]))
            masks[f"{branch}.m{j}"] = (draw < keep).astype(np.float64) / keep
    return masks


def _np_branch(weights, branch: str, x: np.ndarray, masks) -> np.ndarray:
    for j in range(4):
        x = x @ weights[f"{branch}.w{j}"] + weights[f"{branch}.b{j}"]
        if j < 3:
            x = np.maximum(x, 0.0)
            if masks is not None and j < 2:
                x = x * masks[f"{branch}.m{j}"]
    return x


def _np_forward(weights, xc: np.ndarray, xs: np.ndarray, masks=None) -> np.ndarray:
    c = _np_branch(weights, "comm", xc, masks)
    s = _np_branch(weights, "sens", xs, masks)
    fused = _np_branch(weights, "fuse", np.concatenate([c, s], axis=1), masks)
    return fused + xc


def forward(net: PreEqNetwork, inputs: PreEqInputs, dropout_active: bool = False,
            rng=None) -> np.ndarray:
    """Raw network output as a (2MN, MN) real stack."""
    if inputs.mn != net.mn:
        raise ValueError(f"network built for MN={net.mn}, inputs have MN={inputs.mn}")
    masks = None
    if dropout_active and net.config.dropout > 0:
        if rng is None:
            raise ValueError("dropout_active requires an rng")
        masks = _dropout_masks(rng, 1, net.config.dropout)
    out = _np_forward(net.weights, inputs.comm_flat[None, :],
                      inputs.sens_flat[None, :], masks)
    return out[0].reshape(2 * net.mn, net.mn)


def _tape_branch(tape, wvars, branch: str, x, masks):
    for j in range(4):
        x = ad.affine(x, wvars[f"{branch}.w{j}"], wvars[f"{branch}.b{j}"])
        if j < 3:
            x = ad.relu(x)
            if masks is not None and j < 2:
                x = ad.mul(x, tape.constant(masks[f"{branch}.m{j}"]))
    return x


def _tape_forward(tape, wvars, xc, xs, masks):
    c = _tape_branch(tape, wvars, "comm", xc, masks)
    s = _tape_branch(tape, wvars, "sens", xs, masks)
    fused = _tape_branch(tape, wvars, "fuse", ad.concat([c, s], axis=1), masks)
    return ad.add(fused, xc)


# ---------------------------------------------------------------------------
# power normalization
# ---------------------------------------------------------------------------


def normalize_power(p_stack: np.ndarray, p_max: float) -> np.ndarray:
    """Project a real stack onto the power budget and reassemble it.

    P_tilde = sqrt(P_max) * P / ||P||_F on the stack; the top half becomes
    the real part, the bottom half the imaginary part. The stack norm
    equals the complex Frobenius norm, so ||P_hat||_F^2 = P_max.
    """
    p_stack = np.asarray(p_stack, dtype=np.float64)
    if p_stack.ndim != 2 or p_stack.shape[0] != 2 * p_stack.shape[1]:
        raise ValueError(f"expected a (2n, n) stack, got {p_stack.shape}")
    if p_max <= 0:
        raise ValueError("power budget must be positive")
    norm = np.linalg.norm(p_stack)
    if norm == 0:
        raise ValueError("cannot normalize an all-zero pre-equalizer")
    return unstack_complex(np.sqrt(p_max) / norm * p_stack)


def _tape_normalize(tape, stack, p_max: float, mn: int) -> ad.CxVar:
    norm = ad.sqrt(ad.sumsq(stack))
    scaled = ad.scale(ad.div(stack, norm), float(np.sqrt(p_max)))
    return ad.CxVar(ad.narrow(scaled, 0, 0, mn), ad.narrow(scaled, 0, mn, mn))


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def sensing_objective_from_derivatives(d_all, p: np.ndarray, config: FrameConfig,
                                       range_ref: float = 1.0,
                                       velocity_ref: float = 1.0):
    """Scalarized CRLB from precomputed tap-unit derivative matrices.

    Same math as the Fisher/CRLB pipeline, but bypassing path objects so
    it can share derivative matrices with the on-tape loss. Returns
    (objective, CRLBMatrix).
    """
    d_all = np.asarray(d_all, dtype=complex)
    if d_all.ndim == 3:
        d_all = d_all[None]
    if d_all.ndim != 4 or d_all.shape[1] != 4:
        raise ValueError("expected (n_paths, 4, MN, MN) derivative matrices")
    mats = [d @ p for per_path in d_all for d in per_path]
    n = len(mats)
    entries = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            v = np.sum(mats[i].real * mats[j].real) + np.sum(mats[i].imag * mats[j].imag)
            entries[i, j] = entries[j, i] = v
    entries *= 2.0 * config.sigma2_s / config.sigma2_a
    bound = crlb(FisherInfo(entries, (), config, tap_units=True))
    return sensing_objective(bound, range_ref, velocity_ref), bound


def _tape_mse(tape, phat: ad.CxVar, h_true: np.ndarray, config: FrameConfig):
    hp = ad.cx_matmul(ad.cx_constant(tape, h_true), phat)
    mn = config.mn
    denom = ad.add(ad.scale(ad.cx_frob2(hp), config.sigma2_s),
                   tape.constant(np.asarray(mn * config.sigma2_u, dtype=np.float64)))
    beta = ad.sqrt(ad.div(tape.constant(np.asarray(mn * config.sigma2_s, dtype=np.float64)),
                          denom))
    return ad.sub(tape.constant(np.asarray(2.0 * mn * config.sigma2_s)),
                  ad.scale(ad.mul(beta, ad.cx_trace_re(hp)), 2.0 * config.sigma2_s))


def _tape_sensing(tape, phat: ad.CxVar, d_true: np.ndarray, config: FrameConfig):
    d_true = np.asarray(d_true, dtype=complex)
    mats = [ad.cx_matmul(ad.cx_constant(tape, d), phat)
            for per_path in d_true for d in per_path]
    n = len(mats)
    gain = 2.0 * config.sigma2_s / config.sigma2_a
    cells = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(i, n):
            v = ad.scale(ad.cx_inner_re(mats[i], mats[j]), gain)
            cells[i][j] = cells[j][i] = v
    fvar = ad.reshape(ad.stack_scalars([cells[i][j] for i in range(n) for j in range(n)]),
                      (n, n))
    # ridge policy of the sensing bound, frozen at the current value so the
    # trigger does not enter the gradient
    f_np = fvar.value
    d = np.diag(f_np)
    dc = np.where(d > 0, d, 1.0)
    s = 1.0 / np.sqrt(dc)
    a_eq = f_np * np.outer(s, s)
    cond = float(np.linalg.cond(a_eq))
    if not np.isfinite(cond) or cond > COND_LIMIT:
        lam = RIDGE_SCALE * float(np.trace(a_eq)) / n
        fvar = ad.add(fvar, tape.constant(lam * np.diag(dc)))
    flat = ad.reshape(ad.inverse(fvar), (n * n,))
    k_range = (SPEED_OF_LIGHT / 2.0) ** 2 / (config.M * config.delta_f) ** 2
    k_vel = (SPEED_OF_LIGHT / (2.0 * config.f0)) ** 2 / (config.N * config.T) ** 2
    obj = None
    for p_i in range(n // 4):
        term = ad.add(
            ad.scale(ad.narrow(flat, 0, (4 * p_i + 3) * (n + 1), 1), k_range),
            ad.scale(ad.narrow(flat, 0, (4 * p_i + 2) * (n + 1), 1), k_vel),
        )
        obj = term if obj is None else ad.add(obj, term)
    return obj


def batch_loss(tape, wvars, instances, rho_c: float, rho_l: float,
               config: FrameConfig, masks=None):
    """Mean weighted objective of a batch as a tape Var.

    wvars maps weight names to tape Vars (leaves during training); inputs
    and the true channel/derivatives enter as constants.
    """
    if not instances:
        raise ValueError("need at least one instance")
    if not 0.0 <= rho_c <= 1.0 or rho_l < 0:
        raise ValueError("need 0 <= rho_c <= 1 and rho_l >= 0")
    mn = instances[0].inputs.mn
    xc = tape.constant(np.stack([inst.inputs.comm_flat for inst in instances]))
    xs = tape.constant(np.stack([inst.inputs.sens_flat for inst in instances]))
    out = _tape_forward(tape, wvars, xc, xs, masks)
    total = None
    for b, inst in enumerate(instances):
        stack = ad.reshape(ad.narrow(out, 0, b, 1), (2 * mn, mn))
        phat = _tape_normalize(tape, stack, config.p_max, mn)
        term = None
        if rho_c > 0:
            mse = ad.div(_tape_mse(tape, phat, inst.h_true, config),
                         tape.constant(np.asarray(inst.mse_ref)))
            term = ad.scale(mse, rho_c)
        if rho_c < 1:
            sens = ad.div(_tape_sensing(tape, phat, inst.d_true, config),
                          tape.constant(np.asarray(inst.crlb_ref)))
            sens = ad.scale(sens, 1.0 - rho_c)
            term = sens if term is None else ad.add(term, sens)
        total = term if total is None else ad.add(total, term)
    loss = ad.scale(total, 1.0 / len(instances))
    if rho_l > 0:
        reg = None
        for name in sorted(wvars):
            q = ad.sumsq(wvars[name])
            reg = q if reg is None else ad.add(reg, q)
        loss = ad.add(loss, ad.scale(reg, rho_l))
    return ad.vsum(loss)


def make_instance(inputs: PreEqInputs, h_true: np.ndarray, d_true,
                  config: FrameConfig, meta: dict | None = None) -> PreEqInstance:
    """Bundle one example and freeze its zero-forcing reference values."""
    h_true = np.asarray(h_true, dtype=complex)
    if h_true.shape != (config.mn, config.mn) or inputs.mn != config.mn:
        raise ValueError("instance shapes must match the frame configuration")
    d_true = np.asarray(d_true, dtype=complex)
    if d_true.ndim == 3:
        d_true = d_true[None]
    p0 = normalize_power(inputs.inv_channel, config.p_max)
    mse_ref = expected_mse(h_true, p0, config)
    crlb_ref, _ = sensing_objective_from_derivatives(d_true, p0, config)
    if not (np.isfinite(mse_ref) and mse_ref > 0 and np.isfinite(crlb_ref) and crlb_ref > 0):
        raise ValueError("degenerate references at the zero-forcing point")
    return PreEqInstance(inputs, h_true, d_true, float(mse_ref), float(crlb_ref),
                         meta or {})


# ---------------------------------------------------------------------------
# training and evaluation
# ---------------------------------------------------------------------------


def _instance_arrays(instances):
    xc = np.stack([inst.inputs.comm_flat for inst in instances])
    xs = np.stack([inst.inputs.sens_flat for inst in instances])
    return xc, xs


def evaluate_preeq(net: PreEqNetwork, instances, config: FrameConfig) -> PreEqEval:
    """Dropout-off evaluation of the mean link metrics over instances."""
    if not instances:
        raise ValueError("need at least one instance")
    xc, xs = _instance_arrays(instances)
    out = _np_forward(net.weights, xc, xs)
    mse = sens = rmse_v = rmse_r = n_mse = n_sens = 0.0
    for b, inst in enumerate(instances):
        phat = normalize_power(out[b].reshape(2 * net.mn, net.mn), config.p_max)
        m = expected_mse(inst.h_true, phat, config)
        s, bound = sensing_objective_from_derivatives(inst.d_true, phat, config)
        mse += m
        sens += s
        rmse_v += float(np.mean(np.sqrt(bound.crlb_velocity)))
        rmse_r += float(np.mean(np.sqrt(bound.crlb_range)))
        n_mse += m / inst.mse_ref
        n_sens += s / inst.crlb_ref
    k = len(instances)
    return PreEqEval(mse / k, sens / k, rmse_v / k, rmse_r / k, n_mse / k, n_sens / k)


def _weight_norm(weights) -> float:
    return float(sum(np.sum(w * w) for w in weights.values()))


def _dataset_l2(net, instances, rho_c, rho_l, config) -> float:
    ev = evaluate_preeq(net, instances, config)
    return rho_c * ev.norm_mse + (1.0 - rho_c) * ev.norm_sensing \
        + rho_l * _weight_norm(net.weights)


def train_preeq(net: PreEqNetwork, instances, rho_c: float,
                config: FrameConfig) -> np.ndarray:
    """Adamax on the mean weighted objective; returns the convergence trace.

    Trace rows: (epoch, MSE_C, sqrt velocity CRLB, train L2, held-out L2,
    best held-out L2 so far), with an epoch-0 row recording the network
    before any update. The weights ending up in the network are the ones
    with the best held-out L2. Raises on divergence.
    """
    if not instances:
        raise ValueError("need at least one instance")
    if not 0.0 <= rho_c <= 1.0:
        raise ValueError("rho_c must lie in [0, 1]")
    cfg = net.config
    instances = list(instances)
    rng_shuffle = np.random.default_rng(cfg.seed + 1)
    rng_drop = np.random.default_rng(cfg.seed + 2)
    n = len(instances)
    if n >= 4:
        n_val = min(max(1, round(cfg.val_fraction * n)), n - 1)
        perm = rng_shuffle.permutation(n)
        val_set = [instances[i] for i in perm[:n_val]]
        train_set = [instances[i] for i in perm[n_val:]]
    else:
        train_set = val_set = instances

    beta1, beta2, eps = 0.9, 0.999, 1e-8
    mom = {k: np.zeros_like(v) for k, v in net.weights.items()}
    umax = {k: np.zeros_like(v) for k, v in net.weights.items()}
    step = 0

    def snapshot(epoch):
        ev = evaluate_preeq(net, train_set, config)
        reg = cfg.rho_l * _weight_norm(net.weights)
        train_l2 = rho_c * ev.norm_mse + (1 - rho_c) * ev.norm_sensing + reg
        val_l2 = train_l2 if val_set is train_set else \
            _dataset_l2(net, val_set, rho_c, cfg.rho_l, config)
        return ev, train_l2, val_l2

    ev, train_l2, val_l2 = snapshot(0)
    best_val = val_l2
    best_weights = deepcopy(net.weights)
    rows = [(0, ev.mse_c, ev.rmse_velocity, train_l2, val_l2, best_val)]

    for epoch in range(1, cfg.epochs + 1):
        order = rng_shuffle.permutation(len(train_set))
        for start in range(0, order.size, cfg.batch_size):
            batch = [train_set[i] for i in order[start:start + cfg.batch_size]]
            masks = _dropout_masks(rng_drop, len(batch), cfg.dropout) \
                if cfg.dropout > 0 else None
            tape = ad.Tape()
            wvars = {k: tape.leaf(v) for k, v in net.weights.items()}
            loss = batch_loss(tape, wvars, batch, rho_c, cfg.rho_l, config, masks)
            if not np.all(np.isfinite(loss.value)):
                raise RuntimeError(
                    f"training diverged: non-finite loss at epoch {epoch} "
                    f"(lr={cfg.lr}); lower the learning rate"
                )
            grads = tape.backward(loss)
            step += 1
            c1 = 1.0 - beta1 ** step
            for k in net.weights:
                g = grads[wvars[k].nid]
                mom[k] = beta1 * mom[k] + (1 - beta1) * g
                umax[k] = np.maximum(beta2 * umax[k], np.abs(g))
                net.weights[k] = net.weights[k] - (cfg.lr / c1) * mom[k] / (umax[k] + eps)
        ev, train_l2, val_l2 = snapshot(epoch)
        if val_l2 < best_val:
            best_val = val_l2
            best_weights = deepcopy(net.weights)
        rows.append((epoch, ev.mse_c, ev.rmse_velocity, train_l2, val_l2, best_val))
    net.weights = best_weights
    return np.asarray(rows)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def infer(net: PreEqNetwork, params: np.ndarray, kinds,
          config: FrameConfig) -> InferenceResult:
    """Full CSI-to-pre-equalizer pipeline, one forward pass, dropout off."""
    paths, clamped = reconstruct_paths(params, kinds, config)
    comm = [p for p in paths if p.kind == "communication"]
    sens = [p for p in paths if p.kind == "sensing"]
    if not comm or not sens:
        raise ValueError("need communication paths and a sensing path")
    inv, flagged = invert_csi(dd_channel(comm, config))
    d_tau, d_nu = derivative_inputs(sens[0], config)
    stack = forward(net, assemble_inputs(inv, d_tau, d_nu))
    return InferenceResult(normalize_power(stack, config.p_max), clamped, flagged)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def save_network(path, net: PreEqNetwork, extra_meta: dict | None = None):
    meta = {
        "model": "preeq-net",
        "mn": int(net.mn),
        "config": {k: (float(v) if isinstance(v, float) else int(v))
                   for k, v in asdict(net.config).items()},
    }
    if extra_meta:
        meta.update(extra_meta)
    return save_weights(path, meta, net.weights)


def load_network(path) -> tuple[PreEqNetwork, dict]:
    header, params = load_weights(path)
    if header.get("model") != "preeq-net":
        raise ValueError(f"{path} does not hold a pre-equalization network")
    config = PreEqConfig(**header["config"])
    mn = int(header["mn"])
    expected = set(_layer_dims(mn))
    if set(params) != expected:
        raise ValueError(f"{path}: weight names do not match the architecture")
    return PreEqNetwork(config, mn, params), header
