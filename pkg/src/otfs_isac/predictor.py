"""Parameter-level channel forecasting with a doubly-residual stack.

One univariate model per channel-parameter type (Re h, Im h, tau, nu),
with weights shared across all path slots of that type. Each model is a
stack of fully-connected blocks: a four-layer rectifier trunk feeding two
linear heads, a backcast of the input window and a one-slot forecast.
Blocks are chained by the doubly-residual rule: block ell+1 sees the
running residual (input minus the sum of earlier backcasts) and the model
prediction is the sum of all block forecasts.

Series are z-scored per (parameter, path-slot) pair using train-split
statistics only; the raw magnitudes span many orders (gains ~1e-4 vs
delays ~1e-6 s vs Doppler ~1e2 Hz) and a shared model needs comparable
inputs. The network always operates in the normalized domain;
denormalization happens at the prediction boundary.
"""

from __future__ import annotations

from copy import deepcopy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .containers import load_weights, save_weights

_STD_FLOOR = 1e-15
_MAPE_GUARD = 1e-12  # targets below guard * series scale are excluded

_TRUNK_LAYERS = 4
_BLOCK_KEYS = (
    "w0", "b0", "w1", "b1", "w2", "b2", "w3", "b3",
    "vb", "cb", "vf", "cf",
)


@dataclass(frozen=True)
class PredictorConfig:
    lookback: int = 12      # window length, slots
    hidden: int = 64        # trunk width
    n_stacks: int = 6
    n_blocks: int = 3       # blocks per stack
    lr: float = 1e-3        # initial Adam step size
    batch_size: int = 256
    max_epochs: int = 400
    patience: int = 10      # epochs without validation improvement
    lr_decay: float = 0.5   # plateau decay factor
    lr_patience: int = 5    # plateau epochs before a decay
    min_lr: float = 1e-6
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if min(self.lookback, self.hidden, self.n_stacks, self.n_blocks) < 1:
            raise ValueError("architecture sizes must be positive")
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("training hyperparameters must be positive")
        if self.patience < 1:
            raise ValueError("patience must be at least one epoch")
        if not 0.0 < self.lr_decay <= 1.0 or self.lr_patience < 1:
            raise ValueError("lr_decay must lie in (0, 1] with lr_patience >= 1")
        if not 0.0 < self.min_lr <= self.lr:
            raise ValueError("min_lr must lie in (0, lr]")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")

    @property
    def total_blocks(self) -> int:
        return self.n_stacks * self.n_blocks


@dataclass
class ForecastModel:
    """Block weights plus the normalization stats the model was built for.

    norm_mean/norm_std hold one entry per path slot the model serves, in
    the slot order of the dataset.
    """

    config: PredictorConfig
    blocks: list = field(repr=False)
    norm_mean: np.ndarray = field(repr=False)
    norm_std: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.norm_mean = np.atleast_1d(np.asarray(self.norm_mean, dtype=np.float64))
        self.norm_std = np.atleast_1d(np.asarray(self.norm_std, dtype=np.float64))
        if self.norm_mean.shape != self.norm_std.shape:
            raise ValueError("normalization stats must share a shape")
        if np.any(self.norm_std <= 0):
            raise ValueError("normalization std must be positive")


@dataclass(frozen=True)
class MapeReport:
    percent: float
    n_used: int
    n_excluded: int


def series_stats(series: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-slot mean/std over a (groups, slots, path-slots) train array."""
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 3:
        raise ValueError("expected a (groups, slots, path-slots) array")
    mean = series.mean(axis=(0, 1))
    std = series.std(axis=(0, 1))
    return mean, np.maximum(std, _STD_FLOOR)


def normalize(series, mean, std):
    return (np.asarray(series, dtype=np.float64) - mean) / std


def denormalize(series, mean, std):
    return np.asarray(series, dtype=np.float64) * std + mean


def _glorot(rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _warm_start(blocks, zeta: int, width: int):
    """Start the stack at the persistence solution.

    relu(x) - relu(-x) = x, so a trunk whose first layer carries the
    paired-sign copy of the window and whose later layers pass it
    through lets a linear head read x[-1] exactly. The first block gets
    that construction; every head starts at zero, so the initial model
    is exactly the persistence map and training can only improve on it.
    Zero backcasts keep the full window flowing into every block.
    """
    first = blocks[0]
    first["w0"][:, :2 * zeta] = 0.0
    first["w0"][:, :zeta] += np.eye(zeta)
    first["w0"][:, zeta:2 * zeta] -= np.eye(zeta)
    for j in range(1, _TRUNK_LAYERS):
        w = np.zeros((width, width))
        w[:2 * zeta, :2 * zeta] = np.eye(2 * zeta)
        first[f"w{j}"] = w
    for blk in blocks:
        blk["vb"] = np.zeros_like(blk["vb"])
        blk["vf"] = np.zeros_like(blk["vf"])
    first["vf"][zeta - 1, 0] = 1.0
    first["vf"][2 * zeta - 1, 0] = -1.0


def init_model(config: PredictorConfig, norm_mean, norm_std) -> ForecastModel:
    """Seeded Glorot trunks; warm-started at persistence when the trunk
    is wide enough (hidden >= 2 * lookback) to embed the paired-sign
    copy of the window, plain random heads otherwise."""
    rng = np.random.default_rng(config.seed)
    zeta, width = config.lookback, config.hidden
    blocks = []
    for _ in range(config.total_blocks):
        blk = {"w0": _glorot(rng, zeta, width), "b0": np.zeros(width)}
        for j in range(1, _TRUNK_LAYERS):
            blk[f"w{j}"] = _glorot(rng, width, width)
            blk[f"b{j}"] = np.zeros(width)
        blk["vb"] = _glorot(rng, width, zeta)
        blk["cb"] = np.zeros(zeta)
        blk["vf"] = _glorot(rng, width, 1)
        blk["cf"] = np.zeros(1)
        blocks.append(blk)
    if width >= 2 * zeta:
        _warm_start(blocks, zeta, width)
    return ForecastModel(config, blocks, norm_mean, norm_std)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def forward_parts(blocks, windows: np.ndarray):
    """Batched forward returning (forecasts, backcasts, final residual).

    windows: (batch, lookback) normalized. Backcasts come out stacked as
    (n_blocks, batch, lookback); their sum plus the final residual equals
    the input windows exactly.
    """
    x = np.atleast_2d(np.asarray(windows, dtype=np.float64))
    resid = x
    pred = np.zeros(x.shape[0])
    backs = []
    for blk in blocks:
        h = resid
        for j in range(_TRUNK_LAYERS):
            h = np.maximum(h @ blk[f"w{j}"] + blk[f"b{j}"], 0.0)
        back = h @ blk["vb"] + blk["cb"]
        backs.append(back)
        pred = pred + (h @ blk["vf"] + blk["cf"])[:, 0]
        resid = resid - back
    return pred, np.stack(backs, axis=0), resid


def block_forward(block, window: np.ndarray):
    """(backcast, forecast) of a single block on one window."""
    window = np.asarray(window, dtype=np.float64)
    h = window
    for j in range(_TRUNK_LAYERS):
        h = np.maximum(h @ block[f"w{j}"] + block[f"b{j}"], 0.0)
    return h @ block["vb"] + block["cb"], h @ block["vf"] + block["cf"]


def model_forward(model: ForecastModel, window: np.ndarray) -> float:
    """One-step prediction in the normalized domain."""
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (model.config.lookback,):
        raise ValueError(
            f"window must have length {model.config.lookback}, got {window.shape}"
        )
    pred, _, _ = forward_parts(model.blocks, window[None, :])
    return float(pred[0])


def predict_windows(model: ForecastModel, windows: np.ndarray) -> np.ndarray:
    """Batched normalized-domain predictions, (batch,)."""
    pred, _, _ = forward_parts(model.blocks, windows)
    return pred


def predict_next(model: ForecastModel, window: np.ndarray, slot: int = 0) -> float:
    """Raw-domain prediction from a raw window of path slot ``slot``."""
    mean, std = model.norm_mean[slot], model.norm_std[slot]
    z = model_forward(model, normalize(window, mean, std))
    return float(denormalize(z, mean, std))


def persistence_baseline(window) -> float:
    """Carry the last observed value forward one slot."""
    window = np.asarray(window, dtype=np.float64)
    if window.size == 0:
        raise ValueError("persistence needs at least one observation")
    return float(window.reshape(-1)[-1])


def fit_linear_ar(series: np.ndarray, lookback: int) -> np.ndarray:
    """Least-squares AR(lookback) with intercept on normalized series.

    Returns (lookback + 1,) coefficients; the last entry is the intercept.
    """
    X, y, _ = make_windows(np.atleast_2d(series), lookback)
    design = np.hstack([X, np.ones((X.shape[0], 1))])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return coef


def linear_ar_predict(coef: np.ndarray, window: np.ndarray) -> float:
    window = np.asarray(window, dtype=np.float64)
    if window.shape != (coef.size - 1,):
        raise ValueError(f"window must have length {coef.size - 1}")
    return float(window @ coef[:-1] + coef[-1])


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def make_windows(series: np.ndarray, lookback: int):
    """Sliding (window, target) pairs plus the source-series index of each."""
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 2:
        raise ValueError("expected a (n_series, n_slots) array")
    n_series, length = series.shape
    if length < lookback + 1:
        raise ValueError(
            f"series of length {length} cannot form lookback-{lookback} windows; "
            f"need at least {lookback + 1} slots"
        )
    view = np.lib.stride_tricks.sliding_window_view(series, lookback + 1, axis=1)
    X = view[..., :lookback].reshape(-1, lookback)
    y = view[..., -1].reshape(-1)
    sid = np.repeat(np.arange(n_series), length - lookback)
    return X.copy(), y.copy(), sid


def _tape_prediction(tape, wvars, x):
    resid = x
    pred = None
    for blk in wvars:
        h = resid
        for j in range(_TRUNK_LAYERS):
            h = ad.relu(ad.affine(h, blk[f"w{j}"], blk[f"b{j}"]))
        back = ad.affine(h, blk["vb"], blk["cb"])
        fore = ad.affine(h, blk["vf"], blk["cf"])
        resid = ad.sub(resid, back)
        pred = fore if pred is None else ad.add(pred, fore)
    return pred


def _batch_loss(blocks, X, y) -> float:
    pred, _, _ = forward_parts(blocks, X)
    return float(np.mean((pred - y) ** 2))


def _val_split(n_series, n_windows, sid, val_fraction, rng):
    if n_series >= 2:
        n_val = min(max(1, round(val_fraction * n_series)), n_series - 1)
        order = rng.permutation(n_series)
        return np.isin(sid, order[:n_val])
    if n_windows < 2:
        raise ValueError("need at least two windows to hold out validation")
    mask = np.zeros(n_windows, dtype=bool)
    mask[-max(1, round(val_fraction * n_windows)):] = True
    return mask


def train_predictor(model: ForecastModel, series: np.ndarray) -> np.ndarray:
    """Adam on mean squared one-step error over sliding windows.

    series: (n_series, n_slots) already normalized. A seed-controlled
    fraction of the series is held out; training stops when the held-out
    loss has not improved for ``patience`` epochs and the best weights are
    restored. The step size starts at cfg.lr and halves (cfg.lr_decay)
    after cfg.lr_patience plateau epochs, down to cfg.min_lr; without the
    decay, Adam's loss floor sits far above the one-step differences of
    slowly drifting series. Returns the loss curve, rows of
    (epoch, train loss, validation loss, best validation so far).
    """
    cfg = model.config
    series = np.asarray(series, dtype=np.float64)
    if series.ndim == 1:
        series = series[None, :]
    X, y, sid = make_windows(series, cfg.lookback)
    rng = np.random.default_rng(cfg.seed + 1)
    val_mask = _val_split(series.shape[0], X.shape[0], sid, cfg.val_fraction, rng)
    train_idx = np.flatnonzero(~val_mask)
    X_val, y_val = X[val_mask], y[val_mask]

    beta1, beta2, eps = 0.9, 0.999, 1e-8
    mom = [{k: np.zeros_like(v) for k, v in blk.items()} for blk in model.blocks]
    sec = [{k: np.zeros_like(v) for k, v in blk.items()} for blk in model.blocks]
    step = 0
    best_val = np.inf
    best_blocks = deepcopy(model.blocks)
    wait = 0
    stall = 0
    lr = cfg.lr
    history = []

    for epoch in range(1, cfg.max_epochs + 1):
        order = train_idx[rng.permutation(train_idx.size)]
        loss_sum = 0.0
        for start in range(0, order.size, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            tape = ad.Tape()
            wvars = [
                {k: tape.leaf(v) for k, v in blk.items()} for blk in model.blocks
            ]
            xb = tape.constant(X[idx])
            yb = tape.constant(y[idx][:, None])
            pred = _tape_prediction(tape, wvars, xb)
            loss = ad.scale(ad.sumsq(ad.sub(pred, yb)), 1.0 / idx.size)
            grads = tape.backward(loss)
            step += 1
            c1 = 1.0 - beta1 ** step
            c2 = 1.0 - beta2 ** step
            for bi, blk in enumerate(model.blocks):
                for k in blk:
                    g = grads[wvars[bi][k].nid]
                    mom[bi][k] = beta1 * mom[bi][k] + (1 - beta1) * g
                    sec[bi][k] = beta2 * sec[bi][k] + (1 - beta2) * g * g
                    blk[k] = blk[k] - lr * (mom[bi][k] / c1) / (
                        np.sqrt(sec[bi][k] / c2) + eps
                    )
            loss_sum += float(loss.value) * idx.size
        train_loss = loss_sum / order.size
        val_loss = _batch_loss(model.blocks, X_val, y_val)
        if val_loss < best_val:
            best_val = val_loss
            best_blocks = deepcopy(model.blocks)
            wait = 0
            stall = 0
        else:
            wait += 1
            stall += 1
            if stall >= cfg.lr_patience and lr > cfg.min_lr:
                lr = max(lr * cfg.lr_decay, cfg.min_lr)
                stall = 0
                wait = 0  # the decayed rate gets a fresh patience window
        history.append((epoch, train_loss, val_loss, best_val))
        if wait >= cfg.patience:
            break
    model.blocks = best_blocks
    return np.asarray(history)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def mape_report(truth, pred) -> MapeReport:
    """Mean absolute percentage error with a small-denominator guard."""
    truth = np.asarray(truth, dtype=np.float64).reshape(-1)
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    if truth.shape != pred.shape:
        raise ValueError("truth and prediction must have the same length")
    scale = np.max(np.abs(truth)) if truth.size else 0.0
    if scale == 0.0:
        raise ValueError("MAPE undefined: every target is zero")
    keep = np.abs(truth) >= _MAPE_GUARD * scale
    percent = 100.0 * float(np.mean(np.abs(truth[keep] - pred[keep]) / np.abs(truth[keep])))
    return MapeReport(percent, int(keep.sum()), int((~keep).sum()))


def evaluate_mape(model: ForecastModel, series: np.ndarray) -> MapeReport:
    """One-step-ahead MAPE on raw (groups, slots, path-slots) series."""
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 3 or series.shape[2] != model.norm_mean.size:
        raise ValueError("series must be (groups, slots, path-slots) matching the stats")
    zeta = model.config.lookback
    truths, preds = [], []
    for p in range(series.shape[2]):
        z = normalize(series[:, :, p], model.norm_mean[p], model.norm_std[p])
        X, y, _ = make_windows(z, zeta)
        zp = predict_windows(model, X)
        truths.append(denormalize(y, model.norm_mean[p], model.norm_std[p]))
        preds.append(denormalize(zp, model.norm_mean[p], model.norm_std[p]))
    return mape_report(np.concatenate(truths), np.concatenate(preds))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def save_model(path, model: ForecastModel, extra_meta: dict | None = None):
    meta = {
        "model": "forecast-stack",
        "config": {k: (float(v) if isinstance(v, float) else int(v))
                   for k, v in asdict(model.config).items()},
    }
    if extra_meta:
        meta.update(extra_meta)
    params = {"norm.mean": model.norm_mean, "norm.std": model.norm_std}
    for i, blk in enumerate(model.blocks):
        for k in _BLOCK_KEYS:
            params[f"b{i:02d}.{k}"] = blk[k]
    return save_weights(path, meta, params)


def load_model(path) -> tuple[ForecastModel, dict]:
    header, params = load_weights(path)
    if header.get("model") != "forecast-stack":
        raise ValueError(f"{path} does not hold a forecast model")
    config = PredictorConfig(**header["config"])
    blocks = []
    for i in range(config.total_blocks):
        blocks.append({k: params[f"b{i:02d}.{k}"] for k in _BLOCK_KEYS})
    model = ForecastModel(config, blocks, params["norm.mean"], params["norm.std"])
    return model, header
