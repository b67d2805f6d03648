"""Windowed training data on top of simulated density fields.

A training sample pairs one past/future window split at anchor time ``t_c``:

* sensor tokens ``[x, t, rho, v]`` — interior sensors sampled over the past
  window plus boundary tokens at both road ends sampled over past *and*
  prediction windows (the light schedule is a known control input),
* query tokens — random space-time coordinates inside the prediction window,
  with ground-truth ``(rho, v)`` targets bilinearly interpolated from the
  solver grid.

Coordinates are normalized: positions to ``[0, 1]``, past times to
``[-1, 0]`` and prediction times to ``(0, 1]``, so a single scalar channel
separates history from horizon.  Fields are stored on disk as float32 in a
little-endian container (magic ``DTNO``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .lwr import DensityField, Scenario, SimConfig, greenshields_velocity, sample_scenario, simulate

MAGIC = b"DTNO"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIdddd")

DEFAULT_SENSOR_POSITIONS = tuple(0.5 * k for k in range(1, 10))  # 0.5 .. 4.5 km


@dataclass(frozen=True)
class WindowSpec:
    """Window geometry and token layout shared by training and rollout."""

    delta_past: float = 1.0            # minutes
    delta_pred: float = 1.0            # minutes
    sensor_positions: tuple[float, ...] = DEFAULT_SENSOR_POSITIONS  # km
    sensor_dt: float = 3.0             # seconds
    n_queries_train: int = 256
    rollout_steps: int = 8

    def __post_init__(self):
        if self.delta_past <= 0.0 or self.delta_pred <= 0.0:
            raise ConfigError("window lengths must be positive")
        n = self.delta_past * 60.0 / self.sensor_dt
        if abs(n - round(n)) > 1e-9:
            raise ConfigError("sensor_dt must divide delta_past evenly")

    @property
    def sensor_dt_min(self) -> float:
        return self.sensor_dt / 60.0

    def past_offsets(self) -> np.ndarray:
        """Sample times of the past window relative to t_c (includes both ends)."""
        n = int(round(self.delta_past / self.sensor_dt_min))
        return -self.delta_past + np.arange(n + 1) * self.sensor_dt_min

    def both_window_offsets(self) -> np.ndarray:
        """Sample times spanning past plus prediction window, relative to t_c."""
        n_past = int(round(self.delta_past / self.sensor_dt_min))
        n_pred = int(round(self.delta_pred / self.sensor_dt_min + 1e-9))
        return -self.delta_past + np.arange(n_past + n_pred + 1) * self.sensor_dt_min

    def n_interior_tokens(self) -> int:
        return len(self.sensor_positions) * len(self.past_offsets())


@dataclass
class TrainingSample:
    """One window pair: sensor tokens, query coordinates and their targets."""

    sensors: np.ndarray    # [n_sensors, 4] normalized (x, t, rho, v)
    queries: np.ndarray    # [n_queries, 2] normalized (x, t), t in (0, 1]
    targets: np.ndarray    # [n_queries, 2] (rho, v)
    sim_id: int
    t_c: float


def normalize_position(x, road_length: float):
    return np.asarray(x, dtype=np.float64) / road_length


def denormalize_position(x, road_length: float):
    return np.asarray(x, dtype=np.float64) * road_length


def normalize_time(t, t_c: float, spec: WindowSpec):
    """Map absolute minutes to the signed window coordinate.

    Past times land in [-1, 0] (scaled by delta_past), prediction times in
    (0, 1] (scaled by delta_pred).
    """
    t = np.asarray(t, dtype=np.float64)
    rel = t - t_c
    return np.where(rel <= 0.0, rel / spec.delta_past, rel / spec.delta_pred)


def denormalize_time(tau, t_c: float, spec: WindowSpec):
    tau = np.asarray(tau, dtype=np.float64)
    return t_c + np.where(tau <= 0.0, tau * spec.delta_past, tau * spec.delta_pred)


def nearest_cell_lookup(field: DensityField, x, t):
    """Density at the cell containing x and the time row nearest to t."""
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    ix = np.clip((x / field.dx).astype(np.int64), 0, field.nx - 1)
    it = np.clip(np.round(t / field.dt).astype(np.int64), 0, field.nt - 1)
    return field.rho[it, ix]


def bilinear_lookup(field: DensityField, x, t):
    """Density bilinearly interpolated on cell centers and time rows.

    Coordinates beyond the outermost cell centers clamp to the edge value.
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    fx = np.clip(x / field.dx - 0.5, 0.0, field.nx - 1.0)
    ft = np.clip(t / field.dt, 0.0, field.nt - 1.0)
    ix0 = np.minimum(fx.astype(np.int64), field.nx - 2)
    it0 = np.minimum(ft.astype(np.int64), field.nt - 2)
    wx = fx - ix0
    wt = ft - it0
    rho = field.rho
    return ((1 - wt) * (1 - wx) * rho[it0, ix0]
            + (1 - wt) * wx * rho[it0, ix0 + 1]
            + wt * (1 - wx) * rho[it0 + 1, ix0]
            + wt * wx * rho[it0 + 1, ix0 + 1])


def extract_sensors(field: DensityField, spec: WindowSpec, scenario: Scenario,
                    t_c: float) -> np.ndarray:
    """Normalized sensor tokens for the window anchored at ``t_c``.

    Interior sensors cover the past window only; boundary tokens at x=0 and
    x=road_length cover both windows (their future values realize the known
    inflow/light control).  Values come from nearest-cell lookups; velocity
    follows the fundamental diagram.
    """
    road_length = field.road_length
    if t_c - spec.delta_past < -1e-9 or t_c + spec.delta_pred > field.duration + 1e-9:
        raise ConfigError(f"window at t_c={t_c} outside the simulated range")

    rows = []
    interior_t = t_c + spec.past_offsets()
    for x in spec.sensor_positions:
        rho = nearest_cell_lookup(field, np.full_like(interior_t, x), interior_t)
        rows.append(np.column_stack([
            np.full_like(interior_t, x / road_length),
            normalize_time(interior_t, t_c, spec),
            rho,
            greenshields_velocity(rho),
        ]))
    boundary_t = t_c + spec.both_window_offsets()
    for x in (0.0, road_length):
        rho = nearest_cell_lookup(field, np.full_like(boundary_t, x), boundary_t)
        rows.append(np.column_stack([
            np.full_like(boundary_t, x / road_length),
            normalize_time(boundary_t, t_c, spec),
            rho,
            greenshields_velocity(rho),
        ]))
    return np.concatenate(rows, axis=0)


def sample_queries(field: DensityField, spec: WindowSpec, t_c: float,
                   rng: np.random.Generator,
                   n_queries: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Random prediction-window queries and their interpolated targets.

    Returns normalized coordinates [n, 2] and targets [n, 2]; positions are
    uniform over (0, road_length), times uniform over (t_c, t_c + delta_pred].
    """
    if t_c - spec.delta_past < -1e-9 or t_c + spec.delta_pred > field.duration + 1e-9:
        raise ConfigError(f"window at t_c={t_c} outside the simulated range")
    n = spec.n_queries_train if n_queries is None else n_queries
    road_length = field.road_length
    x = rng.uniform(0.0, road_length, n)
    t = t_c + spec.delta_pred * (1.0 - rng.uniform(0.0, 1.0, n))
    rho = bilinear_lookup(field, x, t)
    v = greenshields_velocity(np.clip(rho, 0.0, 1.0))
    queries = np.column_stack([x / road_length, normalize_time(t, t_c, spec)])
    targets = np.column_stack([rho, v])
    return queries, targets


def anchor_times(total_time: float, spec: WindowSpec) -> np.ndarray:
    """Valid window anchors on a 1-minute stride.

    Each anchor leaves room for the past window and for rollout_steps further
    prediction windows after the first one.
    """
    latest = total_time - spec.delta_pred * (1 + spec.rollout_steps)
    if latest < spec.delta_past:
        return np.array([])
    n = int(np.floor((latest - spec.delta_past) / 1.0 + 1e-9)) + 1
    return spec.delta_past + np.arange(n) * 1.0


def train_split(n_sims: int) -> int:
    """Number of training simulations: 1000/300 at 1300, proportional otherwise."""
    return int(round(n_sims * 1000.0 / 1300.0))


class TrafficDataset:
    """In-memory view over generated fields plus split bookkeeping."""

    def __init__(self, fields: np.ndarray, seeds: np.ndarray, n_train: int,
                 dx: float, dt: float, road_length: float, total_time: float):
        self.fields = fields            # [n_sims, nt, nx] float32
        self.seeds = seeds              # [n_sims] uint64
        self.n_train = n_train
        self.dx = dx
        self.dt = dt
        self.road_length = road_length
        self.total_time = total_time

    @property
    def n_sims(self) -> int:
        return self.fields.shape[0]

    @property
    def train_ids(self) -> range:
        return range(self.n_train)

    @property
    def test_ids(self) -> range:
        return range(self.n_train, self.n_sims)

    def field(self, sim_id: int) -> DensityField:
        return DensityField(rho=self.fields[sim_id].astype(np.float64),
                            dx=self.dx, dt=self.dt)

    def scenario(self, sim_id: int, config: SimConfig) -> Scenario:
        return sample_scenario(config, np.random.default_rng(int(self.seeds[sim_id])))

    def samples(self, split: str, config: SimConfig, spec: WindowSpec, seed: int,
                anchor_stride: int = 1) -> list[TrainingSample]:
        """Build all window samples of a split, deterministically from ``seed``."""
        ids = self.train_ids if split == "train" else self.test_ids
        anchors = anchor_times(self.total_time, spec)[::anchor_stride]
        out = []
        for sim_id in ids:
            field = self.field(sim_id)
            scenario = self.scenario(sim_id, config)
            for t_c in anchors:
                rng = np.random.default_rng(
                    np.random.SeedSequence([seed, sim_id, int(round(t_c * 1000))]))
                sensors = extract_sensors(field, spec, scenario, t_c)
                queries, targets = sample_queries(field, spec, t_c, rng)
                out.append(TrainingSample(sensors=sensors, queries=queries,
                                          targets=targets, sim_id=sim_id, t_c=t_c))
        return out


def build_dataset(n_sims: int, config: SimConfig, spec: WindowSpec,
                  seed: int) -> TrafficDataset:
    """Simulate ``n_sims`` randomized scenarios and assemble the dataset."""
    if n_sims < 1:
        raise ConfigError("n_sims must be >= 1")
    master = np.random.default_rng(seed)
    seeds = master.integers(0, 2 ** 63, size=n_sims, dtype=np.uint64)
    fields = None
    dt = None
    for i, sim_seed in enumerate(seeds):
        scenario = sample_scenario(config, np.random.default_rng(int(sim_seed)))
        sim = simulate(config, scenario, align_dt=spec.sensor_dt_min)
        if fields is None:
            dt = sim.dt
            fields = np.empty((n_sims, sim.nt, sim.nx), dtype=np.float32)
        fields[i] = sim.rho.astype(np.float32)
    return TrafficDataset(fields=fields, seeds=seeds, n_train=train_split(n_sims),
                          dx=config.dx, dt=dt, road_length=config.road_length,
                          total_time=config.total_time)


def save_dataset(dataset: TrafficDataset, path: str) -> None:
    n_sims, nt, nx = dataset.fields.shape
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, VERSION, n_sims, dataset.n_train, nx, nt,
                                  dataset.dx, dataset.dt, dataset.road_length,
                                  dataset.total_time))
            for i in range(n_sims):
                fh.write(struct.pack("<Q", int(dataset.seeds[i])))
                fh.write(dataset.fields[i].astype("<f4").tobytes())
    except OSError as exc:
        raise ConfigError(f"cannot write dataset to {path}: {exc}") from exc


def load_dataset(path: str) -> TrafficDataset:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read dataset from {path}: {exc}") from exc
    if len(raw) < _HEADER.size or raw[:4] != MAGIC:
        raise ContractError(f"{path} is not a dataset file")
    magic, version, n_sims, n_train, nx, nt, dx, dt, road_length, total_time = \
        _HEADER.unpack_from(raw)
    if version != VERSION:
        raise ContractError(f"unsupported dataset version {version}")
    per_sim = 8 + 4 * nt * nx
    if len(raw) != _HEADER.size + n_sims * per_sim:
        raise ContractError(f"{path} has inconsistent length")
    seeds = np.empty(n_sims, dtype=np.uint64)
    fields = np.empty((n_sims, nt, nx), dtype=np.float32)
    offset = _HEADER.size
    for i in range(n_sims):
        seeds[i] = struct.unpack_from("<Q", raw, offset)[0]
        offset += 8
        fields[i] = np.frombuffer(raw, dtype="<f4", count=nt * nx,
                                  offset=offset).reshape(nt, nx)
        offset += 4 * nt * nx
    return TrafficDataset(fields=fields, seeds=seeds, n_train=n_train, dx=dx, dt=dt,
                          road_length=road_length, total_time=total_time)
