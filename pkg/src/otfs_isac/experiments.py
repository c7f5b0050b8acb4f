"""End-to-end experiment harness behind the command-line tools.

Glues the trajectory generator, the channel-parameter forecaster, and
the pre-equalizer trainer into reproducible experiments that write
plain CSV tables. Runs are deterministic functions of the experiment
configuration: every random stream is seeded from config fields, so
identical configs produce byte-identical outputs. Each output
directory receives a JSON snapshot of the configuration and the
library version so a table can always be traced back to the settings
that produced it.

The default configuration is a desk-scale setup (4 x 4 grid, 16
subsymbols) sized so the full pipeline, including network training,
runs in minutes on a laptop while keeping the transmit SNR at 10 dB.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .channel import dd_channel, derivative_stack
from .comm import mmse_expected_mse, receiver_complexity
from .otfs import FrameConfig
from .predictor import (
    PredictorConfig,
    denormalize,
    evaluate_mape,
    fit_linear_ar,
    init_model,
    load_model,
    make_windows,
    mape_report,
    normalize,
    predict_windows,
    save_model,
    series_stats,
    train_predictor,
)
from .preeq import (
    PreEqConfig,
    assemble_inputs,
    derivative_inputs,
    evaluate_preeq,
    init_network,
    invert_csi,
    make_instance,
    reconstruct_paths,
    save_network,
    train_preeq,
)
from .scenario import (
    PARAM_FIELDS,
    ParamDataset,
    SceneScale,
    build_dataset,
    load_dataset,
    make_scenarios,
    save_dataset,
)

LIBRARY_VERSION = "0.1.0"
CONFIG_SCHEMA = "otfs-isac-experiment-v1"

DATASET_FILE = "dataset.npz"
CONFIG_FILE = "config.json"
MAPE_FILE = "mape.csv"
TRADEOFF_FILE = "tradeoff.csv"
POWER_FILE = "power.csv"
COMPLEXITY_FILE = "complexity.csv"

CSI_MODES = ("perfect", "outdated", "predicted")
PREDICTOR_BASELINES = ("nbeats", "persistence", "linear-ar")


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------


def desk_frame() -> FrameConfig:
    """4 x 4 grid with a 2-sample prefix; transmit SNR lands at 10 dB."""
    return FrameConfig(M=4, N=4, cp_len=2)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs; deterministic given these fields."""

    frame: FrameConfig = field(default_factory=desk_frame)
    scale: SceneScale = field(default_factory=SceneScale)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    preeq: PreEqConfig = field(default_factory=PreEqConfig)
    n_groups: int = 40             # trajectory groups (4:1 train/test)
    n_slots: int = 64              # tracked slots per group
    rho_grid: tuple = (1.0, 0.75, 0.5, 0.25, 0.05)     # comm weights
    snr_grid_db: tuple = (0.0, 5.0, 10.0, 15.0, 20.0)  # transmit SNR sweep
    n_train_instances: int = 200   # pre-eq training examples
    n_eval_instances: int = 48     # held-out examples, test groups only
    master_seed: int = 0

    def __post_init__(self):
        if self.n_groups < 2:
            raise ValueError("need at least two trajectory groups")
        if self.n_slots < self.predictor.lookback + 2:
            raise ValueError("n_slots must exceed the forecast lookback by two")
        if not self.rho_grid or not all(0.0 <= r <= 1.0 for r in self.rho_grid):
            raise ValueError("rho_grid entries must lie in [0, 1]")
        if not self.snr_grid_db:
            raise ValueError("snr_grid_db must be nonempty")
        if self.n_train_instances < 1 or self.n_eval_instances < 1:
            raise ValueError("instance counts must be positive")

    @property
    def snr_tx_db(self) -> float:
        f = self.frame
        return 10.0 * np.log10(f.p_max / (f.mn * f.sigma2_u))


def config_to_dict(config: ExperimentConfig) -> dict:
    d = asdict(config)
    d["rho_grid"] = list(config.rho_grid)
    d["snr_grid_db"] = list(config.snr_grid_db)
    return d


def config_from_dict(d: dict) -> ExperimentConfig:
    """Build a config from a (possibly partial) dict; omitted keys keep
    their defaults, so hand-written override files stay short."""
    if "config" in d and d.get("schema", "").startswith("otfs-isac"):
        d = d["config"]
    d = dict(d)
    for key, cls in (("frame", FrameConfig), ("scale", SceneScale),
                     ("predictor", PredictorConfig), ("preeq", PreEqConfig)):
        if key in d:
            d[key] = cls(**d[key])
    for key in ("rho_grid", "snr_grid_db"):
        if key in d:
            d[key] = tuple(d[key])
    unknown = set(d) - {f.name for f in fields(ExperimentConfig)}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return ExperimentConfig(**d)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def write_snapshot(out_dir, config: ExperimentConfig) -> Path:
    """Drop config.json (settings + library version) into a run directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema": CONFIG_SCHEMA,
        "library_version": LIBRARY_VERSION,
        "config": config_to_dict(config),
    }
    path = out_dir / CONFIG_FILE
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------


def write_csv(path, header: str, rows) -> Path:
    """One-line header CSV; floats keep full repr precision."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header.split(","))
        for row in rows:
            writer.writerow([str(v) for v in row])
    return path


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------


def prepare_dataset(config: ExperimentConfig) -> ParamDataset:
    scenarios = make_scenarios(config.n_groups, config.n_slots, config.frame,
                               config.scale, config.master_seed)
    return build_dataset(scenarios, config.frame)


def scale_gains(rows: np.ndarray, kinds, gamma_c: float, gamma_s: float) -> np.ndarray:
    """Apply the train-split gain normalizers to raw (P, 4) parameter rows."""
    rows = np.array(rows, dtype=np.float64)
    if rows.shape != (len(kinds), len(PARAM_FIELDS)):
        raise ValueError("expected one (h_re, h_im, tau, nu) row per path")
    for p, kind in enumerate(kinds):
        rows[p, :2] *= gamma_c if kind == "communication" else gamma_s
    return rows


def gain_scaled_params(dataset: ParamDataset, group: int, slot: int) -> np.ndarray:
    return scale_gains(dataset.params[group, slot], dataset.kinds,
                       dataset.gamma_c, dataset.gamma_s)


# ---------------------------------------------------------------------------
# forecasting
# ---------------------------------------------------------------------------


def _flatten_series(series: np.ndarray) -> np.ndarray:
    """(groups, slots, path-slots) -> (groups * path-slots, slots)."""
    return series.transpose(0, 2, 1).reshape(-1, series.shape[1])


def train_all_predictors(dataset: ParamDataset, config: ExperimentConfig) -> dict:
    """One forecaster per parameter type, fit on the train groups.

    Returns {parameter: (model, loss history)}. Normalization stats come
    from the train split only; each parameter gets its own seed offset so
    the four models start from independent weights.
    """
    out = {}
    train = dataset.params[:dataset.n_train]
    for qi, name in enumerate(PARAM_FIELDS):
        series = train[:, :, :, qi]
        mean, std = series_stats(series)
        pcfg = replace(config.predictor, seed=config.predictor.seed + qi)
        model = init_model(pcfg, mean, std)
        history = train_predictor(model, _flatten_series(normalize(series, mean, std)))
        out[name] = (model, history)
    return out


def mape_table(dataset: ParamDataset, models: dict) -> list:
    """(parameter, model, MAPE%) rows on the test groups.

    The persistence and linear-AR baselines score the same one-step
    targets as the forecaster; linear-AR is a least-squares fit pooled
    over the normalized train-split windows of all path slots.
    """
    rows = []
    train = dataset.params[:dataset.n_train]
    test = dataset.params[dataset.n_train:]
    for qi, name in enumerate(PARAM_FIELDS):
        model, _ = models[name]
        zeta = model.config.lookback
        raw = test[:, :, :, qi]
        rows.append((name, "nbeats", evaluate_mape(model, raw).percent))

        truth = raw[:, zeta:, :]
        rows.append((name, "persistence",
                     mape_report(truth, raw[:, zeta - 1:-1, :]).percent))

        z_train = normalize(train[:, :, :, qi], model.norm_mean, model.norm_std)
        coef = fit_linear_ar(_flatten_series(z_train), zeta)
        truths, preds = [], []
        for p in range(raw.shape[2]):
            _, y_raw, _ = make_windows(raw[:, :, p], zeta)
            z = normalize(raw[:, :, p], model.norm_mean[p], model.norm_std[p])
            X, _, _ = make_windows(z, zeta)
            pred = denormalize(X @ coef[:-1] + coef[-1],
                               model.norm_mean[p], model.norm_std[p])
            truths.append(y_raw)
            preds.append(pred)
        rows.append((name, "linear-ar",
                     mape_report(np.concatenate(truths), np.concatenate(preds)).percent))
    return rows


def forecast_dataset(dataset: ParamDataset, models: dict) -> np.ndarray:
    """One-step-ahead raw-domain forecasts for every group and slot.

    Returns (groups, slots, path-slots, 4); slots before the lookback
    horizon are NaN because no full window exists yet.
    """
    G, T, P, _ = dataset.params.shape
    preds = np.full((G, T, P, len(PARAM_FIELDS)), np.nan)
    for qi, name in enumerate(PARAM_FIELDS):
        model, _ = models[name]
        zeta = model.config.lookback
        for p in range(P):
            z = normalize(dataset.params[:, :, p, qi],
                          model.norm_mean[p], model.norm_std[p])
            X, _, _ = make_windows(z, zeta)
            raw = denormalize(predict_windows(model, X),
                              model.norm_mean[p], model.norm_std[p])
            preds[:, zeta:, p, qi] = raw.reshape(G, T - zeta)
    return preds


# ---------------------------------------------------------------------------
# pre-equalizer instances
# ---------------------------------------------------------------------------


def _csi_rows(dataset, mode, group, slot, predictions):
    if mode == "perfect":
        return gain_scaled_params(dataset, group, slot)
    if mode == "outdated":
        return gain_scaled_params(dataset, group, slot - 1)
    rows = predictions[group, slot]
    if not np.all(np.isfinite(rows)):
        raise ValueError(f"no forecast available at slot {slot}")
    return scale_gains(rows, dataset.kinds, dataset.gamma_c, dataset.gamma_s)


def _true_link(dataset, frame, group, slot):
    paths = dataset.paths_at(group, slot, dataset.gamma_c, dataset.gamma_s)
    comm = [p for p in paths if p.kind == "communication"]
    sens = [p for p in paths if p.kind == "sensing"]
    h_true = dd_channel(comm, frame).entries
    d_true = np.stack([np.stack(derivative_stack(s, frame, tap_units=True))
                       for s in sens])
    return h_true, d_true


def build_preeq_instances(dataset: ParamDataset, frame: FrameConfig, mode: str,
                          n_instances: int, seed: int, t_min: int,
                          predictions: np.ndarray | None = None,
                          groups=None) -> list:
    """Draw (group, slot) pairs and bundle them into training examples.

    mode selects where the CSI inputs come from: the true parameters of
    the slot itself ("perfect"), the previous slot ("outdated"), or the
    forecaster output ("predicted"). The loss-side truth is always the
    slot's exact channel. Pairs whose derivative taps sit on a guard
    boundary or whose references degenerate are skipped, so different
    modes see the same candidate stream in the same order.
    """
    if mode not in CSI_MODES:
        raise ValueError(f"unknown CSI mode '{mode}'")
    if mode == "predicted" and predictions is None:
        raise ValueError("predicted CSI needs the forecast array")
    if t_min < 1:
        raise ValueError("t_min must be at least 1 so an outdated slot exists")
    T = dataset.params.shape[1]
    if groups is None:
        groups = range(dataset.n_groups)
    pairs = [(g, t) for g in groups for t in range(t_min, T)]
    order = np.random.default_rng(seed).permutation(len(pairs))
    pairs = [pairs[i] for i in order]

    instances = []
    for g, t in pairs:
        if len(instances) == n_instances:
            break
        try:
            h_true, d_true = _true_link(dataset, frame, g, t)
            csi = _csi_rows(dataset, mode, g, t, predictions)
            paths, clamped = reconstruct_paths(csi, dataset.kinds, frame)
            comm = [p for p in paths if p.kind == "communication"]
            sens = [p for p in paths if p.kind == "sensing"]
            inv, flagged = invert_csi(dd_channel(comm, frame).entries)
            d_tau, d_nu = derivative_inputs(sens[0], frame)
            inst = make_instance(assemble_inputs(inv, d_tau, d_nu), h_true,
                                 d_true, frame,
                                 meta={"group": g, "slot": t, "mode": mode,
                                       "clamped": clamped,
                                       "inverse_regularized": flagged})
        except ValueError:
            continue
        instances.append(inst)
    if len(instances) < n_instances:
        raise ValueError(f"only {len(instances)} usable (group, slot) pairs "
                         f"for {n_instances} requested {mode} instances")
    return instances


def build_instance_sets(dataset: ParamDataset, config: ExperimentConfig,
                        predictions: np.ndarray,
                        frame: FrameConfig | None = None) -> dict:
    """{mode: (train instances, eval instances)} over a shared slot pool.

    Train instances come from the train groups, eval instances from the
    held-out groups; all modes share t >= lookback so the comparison is
    over the same instants.
    """
    frame = frame or config.frame
    t_min = max(config.predictor.lookback, 1)
    out = {}
    for mode in CSI_MODES:
        tr = build_preeq_instances(
            dataset, frame, mode, config.n_train_instances,
            config.master_seed + 101, t_min, predictions,
            groups=range(dataset.n_train))
        ev = build_preeq_instances(
            dataset, frame, mode, config.n_eval_instances,
            config.master_seed + 202, t_min, predictions,
            groups=range(dataset.n_train, dataset.n_groups))
        out[mode] = (tr, ev)
    return out


# ---------------------------------------------------------------------------
# pre-equalizer family and tables
# ---------------------------------------------------------------------------


def train_one_preeq(instances, rho_c: float, config: ExperimentConfig,
                    frame: FrameConfig | None = None,
                    seed_offset: int = 0) -> tuple:
    frame = frame or config.frame
    pcfg = replace(config.preeq, seed=config.preeq.seed + 10 * seed_offset)
    net = init_network(pcfg, frame.mn)
    trace = train_preeq(net, instances, rho_c, frame)
    return net, trace


def train_preeq_family(instance_sets: dict, config: ExperimentConfig,
                       rho_grid=None, frame: FrameConfig | None = None,
                       progress=None) -> dict:
    """{(mode, rho_c): (net, trace)} over all CSI modes and weights."""
    rho_grid = config.rho_grid if rho_grid is None else rho_grid
    family = {}
    for mi, mode in enumerate(CSI_MODES):
        train_set, _ = instance_sets[mode]
        for ri, rho in enumerate(rho_grid):
            if progress:
                progress(f"training pre-eq net: csi={mode} rho_c={rho:g}")
            family[(mode, rho)] = train_one_preeq(
                train_set, rho, config, frame,
                seed_offset=mi * len(rho_grid) + ri + 1)
    return family


def tradeoff_rows(family: dict, instance_sets: dict, frame: FrameConfig,
                  rho_grid) -> list:
    """(rho_c, csi_mode, mse, rmse_velocity) rows on the eval instances."""
    rows = []
    for mode in CSI_MODES:
        _, eval_set = instance_sets[mode]
        for rho in rho_grid:
            net, _ = family[(mode, rho)]
            ev = evaluate_preeq(net, eval_set, frame)
            rows.append((rho, mode, ev.mse_c, ev.rmse_velocity))
    return rows


def run_tradeoff(dataset: ParamDataset, config: ExperimentConfig,
                 models: dict, progress=None) -> tuple:
    """Full comm/sensing tradeoff: returns (rows, family, instance_sets)."""
    predictions = forecast_dataset(dataset, models)
    instance_sets = build_instance_sets(dataset, config, predictions)
    family = train_preeq_family(instance_sets, config, progress=progress)
    rows = tradeoff_rows(family, instance_sets, config.frame, config.rho_grid)
    return rows, family, instance_sets


def frame_at_snr(frame: FrameConfig, snr_db: float) -> FrameConfig:
    """Move the transmit power budget to hit a given transmit SNR."""
    p_max = frame.mn * frame.sigma2_u * 10.0 ** (snr_db / 10.0)
    return replace(frame, p_max=p_max)


def power_sweep_rows(dataset: ParamDataset, config: ExperimentConfig,
                     predictions: np.ndarray, progress=None) -> list:
    """(snr_tx_db, scheme, mse) rows; pre-eq nets retrain at every point.

    The MMSE baseline sends power-scaled symbols through the true
    channel with no pre-equalizer; the three pre-eq schemes train a
    comm-only network (rho_c = 1) on CSI of the matching quality.
    """
    rows = []
    for si, snr in enumerate(config.snr_grid_db):
        frame = frame_at_snr(config.frame, snr)
        sets = build_instance_sets(dataset, config, predictions, frame=frame)
        scale = np.sqrt(frame.p_max / (frame.mn * frame.sigma2_s))
        mmse = float(np.mean([mmse_expected_mse(scale * inst.h_true, frame)
                              for inst in sets["perfect"][1]]))
        rows.append((snr, "mmse-perfect-csi", mmse))
        for mi, mode in enumerate(CSI_MODES):
            if progress:
                progress(f"training pre-eq net: snr={snr:g} dB csi={mode}")
            train_set, eval_set = sets[mode]
            net, _ = train_one_preeq(train_set, 1.0, config, frame,
                                     seed_offset=100 + si * len(CSI_MODES) + mi)
            ev = evaluate_preeq(net, eval_set, frame)
            rows.append((snr, f"preeq-{mode}-csi", ev.mse_c))
    return rows


# On a 2x2 grid a 16-point demapper swamps the equalization solve, so the
# comparison is uninformative there; order-4 rows start at M=N=4.
_COMPLEXITY_GRID = tuple((m, o) for m in (2, 4, 8, 16) for o in (2, 4)
                         if (m, o) != (2, 4))


def complexity_rows(grid=_COMPLEXITY_GRID) -> list:
    """(mn, order, conventional, preeq, reduction%) per square grid size."""
    rows = []
    for m, o in grid:
        conv = receiver_complexity(m, m, o, "conventional")
        pre = receiver_complexity(m, m, o, "preeq")
        rows.append((m * m, o, conv, pre, 100.0 * (1.0 - pre / conv)))
    return rows


# ---------------------------------------------------------------------------
# command bodies (shared by the CLI and tests)
# ---------------------------------------------------------------------------


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run `{hint}` first")
    return path


def predictor_file(name: str) -> str:
    return f"predictor-{name}.npz"


def preeq_file(mode: str, rho_c: float) -> str:
    return f"preeq-{mode}-rho{rho_c:g}.npz"


def _load_predictors(out_dir: Path) -> dict:
    models = {}
    for name in PARAM_FIELDS:
        path = _require(out_dir / predictor_file(name),
                        f"train-predictor --out {out_dir}")
        models[name] = load_model(path)
    return models


def cmd_generate_data(config: ExperimentConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    write_snapshot(out_dir, config)
    dataset = prepare_dataset(config)
    path = out_dir / DATASET_FILE
    save_dataset(path, dataset)
    return path


def cmd_train_predictor(config: ExperimentConfig, out_dir) -> dict:
    out_dir = Path(out_dir)
    write_snapshot(out_dir, config)
    dataset = load_dataset(_require(out_dir / DATASET_FILE,
                                    f"generate-data --out {out_dir}"))
    models = train_all_predictors(dataset, config)
    for name, (model, history) in models.items():
        save_model(out_dir / predictor_file(name), model,
                   extra_meta={"parameter": name})
        write_csv(out_dir / f"predictor-history-{name}.csv",
                  "epoch,train_loss,val_loss,best_val_loss", history)
    return models


def cmd_eval_predictor(config: ExperimentConfig, out_dir) -> list:
    out_dir = Path(out_dir)
    write_snapshot(out_dir, config)
    dataset = load_dataset(_require(out_dir / DATASET_FILE,
                                    f"generate-data --out {out_dir}"))
    rows = mape_table(dataset, _load_predictors(out_dir))
    write_csv(out_dir / MAPE_FILE, "parameter,model,mape_percent", rows)
    return rows


def cmd_train_preeq(config: ExperimentConfig, out_dir, rho_c: float = 0.5,
                    csi_mode: str = "perfect", progress=None) -> np.ndarray:
    out_dir = Path(out_dir)
    write_snapshot(out_dir, config)
    dataset = load_dataset(_require(out_dir / DATASET_FILE,
                                    f"generate-data --out {out_dir}"))
    predictions = None
    if csi_mode == "predicted":
        models = _load_predictors(out_dir)
        predictions = forecast_dataset(dataset, models)
    t_min = max(config.predictor.lookback, 1)
    train_set = build_preeq_instances(
        dataset, config.frame, csi_mode, config.n_train_instances,
        config.master_seed + 101, t_min, predictions,
        groups=range(dataset.n_train))
    if progress:
        progress(f"training pre-eq net: csi={csi_mode} rho_c={rho_c:g}")
    net, trace = train_one_preeq(train_set, rho_c, config)
    save_network(out_dir / preeq_file(csi_mode, rho_c), net,
                 extra_meta={"csi_mode": csi_mode, "rho_c": rho_c})
    write_csv(out_dir / f"convergence-{csi_mode}-rho{rho_c:g}.csv",
              "epoch,mse_c,rmse_velocity_mps,train_l2,val_l2,best_val_l2",
              trace)
    return trace


def cmd_tradeoff(config: ExperimentConfig, out_dir, progress=None) -> list:
    out_dir = Path(out_dir)
    write_snapshot(out_dir, config)
    dataset = load_dataset(_require(out_dir / DATASET_FILE,
                                    f"generate-data --out {out_dir}"))
    models = _load_predictors(out_dir)
    rows, family, _ = run_tradeoff(dataset, config, models, progress=progress)
    for (mode, rho), (net, _) in family.items():
        save_network(out_dir / preeq_file(mode, rho), net,
                     extra_meta={"csi_mode": mode, "rho_c": rho})
    write_csv(out_dir / TRADEOFF_FILE,
              "rho_c,csi_mode,mse,rmse_velocity_mps", rows)
    return rows


def cmd_sweep_power(config: ExperimentConfig, out_dir, progress=None) -> list:
    out_dir = Path(out_dir)
    write_snapshot(out_dir, config)
    dataset = load_dataset(_require(out_dir / DATASET_FILE,
                                    f"generate-data --out {out_dir}"))
    models = _load_predictors(out_dir)
    predictions = forecast_dataset(dataset, models)
    rows = power_sweep_rows(dataset, config, predictions, progress=progress)
    write_csv(out_dir / POWER_FILE, "snr_tx_db,scheme,mse", rows)
    return rows


def cmd_complexity(config: ExperimentConfig, out_dir) -> list:
    out_dir = Path(out_dir)
    write_snapshot(out_dir, config)
    rows = complexity_rows()
    write_csv(out_dir / COMPLEXITY_FILE,
              "mn,order,conventional,preeq,reduction_percent", rows)
    return rows
