"""Synthetic scene geometry: UE trajectories around a fixed AP, per-slot
path parameters, and dataset assembly.

The AP sits at the origin. Each trajectory group is one Scenario: either
an explicit waypoint list (interpolated with piecewise-constant
acceleration) or a circular orbit. Paths are free-space:

  communication: LoS (tau = R/c, nu = f0 v_r/c) plus one path per
      scatterer (segment lengths AP->S and S->UE, attenuation the
      product of per-segment factors lambda/(4 pi R_seg));
  sensing: the UE echo, two-way (tau = 2R/c, nu = 2 f0 v_r/c,
      attenuation (lambda/(4 pi R))^2).

Every path carries the deterministic carrier phase e^{-j 2 pi f0 tau},
which is what makes the attenuation series oscillate slot to slot and
gives the predictor something real to forecast.

The default scene scale keeps the UE receding from both the AP and the
scatterer cluster, so every Doppler tap stays positive and inside the
grid; approaching geometries would need a Doppler-centered grid instead.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .channel import PathParams
from .containers import load_container, save_container
from .otfs import FrameConfig

AP_POSITION = (0.0, 0.0)
SPEED_CAP = 95.0  # m/s
PARAM_FIELDS = ("h_re", "h_im", "tau", "nu")


@dataclass(frozen=True)
class Scenario:
    """One trajectory group: fixed scatterers plus a UE motion model."""

    scatterers: tuple            # ((x, y) meters, ...)
    n_slots: int
    slot_period: float           # s, normally the frame duration N*T
    waypoints: tuple = None      # ((x, y), ...) visited at equal time spacing
    orbit: tuple = None          # (radius m, speed m/s, start angle rad)
    speed_cap: float = SPEED_CAP
    seed: int = 0

    def __post_init__(self):
        if (self.waypoints is None) == (self.orbit is None):
            raise ValueError("specify exactly one of waypoints or orbit")
        if self.waypoints is not None and len(self.waypoints) < 2:
            raise ValueError("need at least two waypoints")
        if self.n_slots < 2:
            raise ValueError("need at least two slots")
        if self.slot_period <= 0:
            raise ValueError("slot period must be positive")


def generate_trajectory(scenario: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """Per-slot positions and velocities, (n_slots, 2) each."""
    s = scenario.n_slots
    t = np.arange(s) * scenario.slot_period
    if scenario.orbit is not None:
        radius, speed, angle0 = scenario.orbit
        if radius <= 0:
            raise ValueError("orbit radius must be positive")
        if abs(speed) > scenario.speed_cap:
            raise ValueError(f"orbit speed {speed} exceeds the {scenario.speed_cap} m/s cap")
        theta = angle0 + (speed / radius) * t
        pos = radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        vel = speed * np.stack([-np.sin(theta), np.cos(theta)], axis=1)
        return pos, vel

    wp = np.asarray(scenario.waypoints, dtype=float)
    k = len(wp)
    total = (s - 1) * scenario.slot_period
    leg = total / (k - 1)
    # piecewise-constant acceleration: each leg's a_i is set to land on
    # the next waypoint given the velocity inherited from the last leg
    v = np.empty((k - 1, 2))
    a = np.empty((k - 1, 2))
    v[0] = (wp[1] - wp[0]) / leg
    for i in range(k - 1):
        if i > 0:
            v[i] = v[i - 1] + a[i - 1] * leg
        a[i] = 2.0 * (wp[i + 1] - wp[i] - v[i] * leg) / leg ** 2
    idx = np.minimum((t / leg).astype(int), k - 2)
    dt = t - idx * leg
    pos = wp[idx] + v[idx] * dt[:, None] + 0.5 * a[idx] * dt[:, None] ** 2
    vel = v[idx] + a[idx] * dt[:, None]
    speeds = np.linalg.norm(vel, axis=1)
    if speeds.max() > scenario.speed_cap:
        raise ValueError(
            f"waypoint timing needs {speeds.max():.1f} m/s, above the "
            f"{scenario.speed_cap} m/s cap; spread the waypoints or add time"
        )
    return pos, vel


def paths_from_geometry(position, velocity, scenario: Scenario,
                        config: FrameConfig) -> tuple[list, list]:
    """Instantaneous (communication, sensing) path lists for one slot."""
    pos = np.asarray(position, dtype=float)
    vel = np.asarray(velocity, dtype=float)
    r = float(np.linalg.norm(pos))
    if r <= 1.0:
        raise ValueError(f"UE range {r:.2f} m too close to the AP")
    lam = config.wavelength
    f0 = config.f0
    c = config.c
    u_r = pos / r
    v_r = float(vel @ u_r)

    def make(gain_mag, tau, nu, kind):
        gain = gain_mag * np.exp(-2j * np.pi * f0 * tau)
        return PathParams(gain=complex(gain), delay=tau, doppler=nu, kind=kind)

    comm = [make(lam / (4 * np.pi * r), r / c, f0 * v_r / c, "communication")]
    for q in scenario.scatterers:
        q = np.asarray(q, dtype=float)
        r1 = float(np.linalg.norm(q))          # AP -> scatterer, static
        d = pos - q
        r2 = float(np.linalg.norm(d))          # scatterer -> UE
        if r1 <= 1.0 or r2 <= 1.0:
            raise ValueError("scatterer too close to the AP or the UE")
        rate = float(vel @ (d / r2))           # d(r1+r2)/dt
        gain_mag = (lam / (4 * np.pi * r1)) * (lam / (4 * np.pi * r2))
        comm.append(make(gain_mag, (r1 + r2) / c, f0 * rate / c, "communication"))
    sensing = [make((lam / (4 * np.pi * r)) ** 2, 2 * r / c, 2 * f0 * v_r / c, "sensing")]

    for path in comm + sensing:
        l, k = path.taps(config)
        if not 0 <= l <= config.M - 1 or not 0 <= k <= config.N - 1:
            raise ValueError(
                f"path taps (l={l:.3g}, k={k:.3g}) fall outside the "
                f"{config.M}x{config.N} grid; shrink the scene ranges or "
                "speeds to keep delays and Dopplers on-grid"
            )
    return comm, sensing


# ---- scene randomization ----------------------------------------------------


@dataclass(frozen=True)
class SceneScale:
    """Default geometry that keeps taps in-grid for 15 kHz / 3 GHz frames.

    Trajectories start well away from the AP and recede at a bounded
    radial speed with light lateral drift.
    """

    range_min: float = 250.0          # m, initial UE distance
    range_max: float = 380.0
    radial_speed_min: float = 25.0    # m/s, outward
    radial_speed_max: float = 60.0
    lateral_speed_max: float = 5.0    # m/s drift across the radial
    scatterer_radius_min: float = 30.0
    scatterer_radius_max: float = 120.0
    n_scatterers: int = 2
    n_waypoints: int = 4


def make_scatterers(scale: SceneScale, seed: int) -> tuple:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(scale.n_scatterers):
        radius = rng.uniform(scale.scatterer_radius_min, scale.scatterer_radius_max)
        angle = rng.uniform(0.0, 2 * np.pi)
        out.append((radius * math.cos(angle), radius * math.sin(angle)))
    return tuple(out)


def outward_scenario(seed: int, scatterers: tuple, n_slots: int,
                     slot_period: float, scale: SceneScale) -> Scenario:
    """Random receding trajectory: radial motion plus lateral jitter."""
    rng = np.random.default_rng(seed)
    r0 = rng.uniform(scale.range_min, scale.range_max)
    heading = rng.uniform(0.0, 2 * np.pi)
    speed = rng.uniform(scale.radial_speed_min, scale.radial_speed_max)
    u = np.array([math.cos(heading), math.sin(heading)])
    u_perp = np.array([-u[1], u[0]])
    k = scale.n_waypoints
    total = (n_slots - 1) * slot_period
    times = np.linspace(0.0, total, k)
    lateral_rates = rng.uniform(-scale.lateral_speed_max, scale.lateral_speed_max, size=k - 1)
    offsets = np.concatenate([[0.0], np.cumsum(lateral_rates * np.diff(times))])
    points = [(r0 + speed * t) * u + off * u_perp for t, off in zip(times, offsets)]
    return Scenario(
        scatterers=scatterers,
        n_slots=n_slots,
        slot_period=slot_period,
        waypoints=tuple(tuple(p) for p in points),
        seed=seed,
    )


def make_scenarios(n_groups: int, n_slots: int, config: FrameConfig,
                   scale: SceneScale = SceneScale(), master_seed: int = 0) -> list:
    """One fixed scatterer layout, n_groups distinct trajectories."""
    scatterers = make_scatterers(scale, master_seed)
    base = master_seed * 1_000_003 + 1
    return [
        outward_scenario(base + i, scatterers, n_slots, config.slot_period, scale)
        for i in range(n_groups)
    ]


# ---- dataset ----------------------------------------------------------------


@dataclass(frozen=True)
class ParamDataset:
    """Per-slot path parameters for every trajectory group.

    params[g, t, p] = (Re h, Im h, tau, nu) for path slot p; the first
    1 + C paths are communication (LoS first), the last is the sensing
    echo. Parameters are stored raw (free-space magnitudes); gamma_c and
    gamma_s are the train-split gain normalizers (1/rms attenuation of
    the LoS and echo paths) that experiments apply before building
    channel matrices, so transmit SNR settings stay meaningful.
    """

    params: np.ndarray           # (G, S, P, 4) float64
    kinds: tuple                 # per path slot
    timestamps: np.ndarray       # (S,) seconds
    group_seeds: np.ndarray      # (G,) int64
    n_train: int
    gamma_c: float
    gamma_s: float
    config: FrameConfig
    meta: dict = field(default_factory=dict)

    @property
    def n_groups(self) -> int:
        return self.params.shape[0]

    @property
    def n_slots(self) -> int:
        return self.params.shape[1]

    @property
    def train_groups(self) -> range:
        return range(self.n_train)

    @property
    def test_groups(self) -> range:
        return range(self.n_train, self.n_groups)

    def paths_at(self, group: int, slot: int, comm_gain: float = 1.0,
                 sensing_gain: float = 1.0) -> list:
        """PathParams for one slot, with optional gain rescaling."""
        out = []
        for p, kind in enumerate(self.kinds):
            h_re, h_im, tau, nu = self.params[group, slot, p]
            g = comm_gain if kind == "communication" else sensing_gain
            out.append(PathParams(gain=g * complex(h_re, h_im), delay=tau,
                                  doppler=nu, kind=kind))
        return out


def train_test_counts(n_groups: int) -> tuple[int, int]:
    """4:1 split by trajectory group."""
    n_train = (4 * n_groups) // 5
    return n_train, n_groups - n_train


def build_dataset(scenarios: Sequence[Scenario], config: FrameConfig) -> ParamDataset:
    """Trace every scenario and collect per-slot path parameters."""
    scenarios = list(scenarios)
    if not scenarios:
        raise ValueError("need at least one scenario")
    seeds = [s.seed for s in scenarios]
    if len(set(seeds)) != len(seeds):
        raise ValueError("trajectory groups must have distinct seeds")
    n_slots = scenarios[0].n_slots
    rows = []
    kinds = None
    for sc in scenarios:
        if sc.n_slots != n_slots:
            raise ValueError("all groups must share the slot count")
        pos, vel = generate_trajectory(sc)
        per_slot = []
        for t in range(n_slots):
            comm, sens = paths_from_geometry(pos[t], vel[t], sc, config)
            paths = comm + sens
            k = tuple(p.kind for p in paths)
            if kinds is None:
                kinds = k
            elif k != kinds:
                raise ValueError("path layout must be identical across groups")
            per_slot.append([
                (p.gain.real, p.gain.imag, p.delay, p.doppler) for p in paths
            ])
        rows.append(per_slot)
    params = np.asarray(rows, dtype=np.float64)
    n_train, _ = train_test_counts(len(scenarios))
    if n_train == 0:
        raise ValueError("need at least two groups so the train split is nonempty")
    los = params[:n_train, :, 0, 0] + 1j * params[:n_train, :, 0, 1]
    echo_idx = kinds.index("sensing")
    echo = params[:n_train, :, echo_idx, 0] + 1j * params[:n_train, :, echo_idx, 1]
    gamma_c = 1.0 / float(np.sqrt(np.mean(np.abs(los) ** 2)))
    gamma_s = 1.0 / float(np.sqrt(np.mean(np.abs(echo) ** 2)))
    return ParamDataset(
        params=params,
        kinds=kinds,
        timestamps=np.arange(n_slots) * scenarios[0].slot_period,
        group_seeds=np.asarray(seeds, dtype=np.int64),
        n_train=n_train,
        gamma_c=gamma_c,
        gamma_s=gamma_s,
        config=config,
        meta={"n_groups": len(scenarios)},
    )


def save_dataset(path, dataset: ParamDataset):
    meta = {
        "frame": asdict(dataset.config),
        "kinds": list(dataset.kinds),
        "n_train": dataset.n_train,
        "gamma_c": dataset.gamma_c,
        "gamma_s": dataset.gamma_s,
        "extra": dataset.meta,
    }
    arrays = {
        "params": dataset.params,
        "timestamps": dataset.timestamps,
        "group_seeds": dataset.group_seeds,
    }
    return save_container(path, "dataset", meta, arrays)


def load_dataset(path) -> ParamDataset:
    header, arrays = load_container(path, kind="dataset")
    return ParamDataset(
        params=arrays["params"],
        kinds=tuple(header["kinds"]),
        timestamps=arrays["timestamps"],
        group_seeds=arrays["group_seeds"],
        n_train=int(header["n_train"]),
        gamma_c=float(header["gamma_c"]),
        gamma_s=float(header["gamma_s"]),
        config=FrameConfig(**header["frame"]),
        meta=header.get("extra", {}),
    )
