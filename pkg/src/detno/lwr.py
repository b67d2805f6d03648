"""First-order LWR traffic model solved with the Godunov finite-volume scheme.

Density lives on ``nx`` uniform cells over a road of length ``road_length``
(cell centers at ``(i + 0.5) * dx``), advanced with the exact Riemann flux of
the concave Greenshields fundamental diagram.  Everything is normalized:
jam density ``rho_max`` and free-flow speed ``v_max`` default to 1.

Boundary handling:

* upstream (x=0): a constant inflow density imposed through a ghost cell,
* downstream (x=L): a traffic light.  RED forces the exit flux to zero via a
  jam-density ghost cell; GREEN is free outflow (zero-gradient ghost).

Randomized scenarios combine a multi-step piecewise-constant initial profile
(steps added on top of the base inflow, then clamped) with an alternating
RED/GREEN phase schedule of 1-2 minute phases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError, DomainError

# Sampling interval (minutes) that simulation time steps align to by default;
# equals the 3 s sensor cadence used downstream.
DEFAULT_ALIGN_DT = 0.05


class LightState(Enum):
    RED = "red"
    GREEN = "green"


@dataclass(frozen=True)
class SimConfig:
    """Physical and numerical parameters of one simulation setup."""

    road_length: float = 5.0     # km
    total_time: float = 25.0     # minutes
    nx: int = 100
    cfl: float = 0.9
    rho_max: float = 1.0
    v_max: float = 1.0
    base_inflow: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.nx < 2:
            raise ConfigError(f"nx must be >= 2, got {self.nx}")
        if not 0.0 < self.cfl <= 1.0:
            raise ConfigError(f"cfl must be in (0, 1], got {self.cfl}")
        if not 0.0 < self.base_inflow < self.rho_max:
            raise ConfigError(
                f"base_inflow must lie in (0, rho_max), got {self.base_inflow}"
            )
        if self.road_length <= 0.0 or self.total_time <= 0.0:
            raise ConfigError("road_length and total_time must be positive")

    @property
    def dx(self) -> float:
        return self.road_length / self.nx

    @property
    def x_centers(self) -> np.ndarray:
        return (np.arange(self.nx) + 0.5) * self.dx


@dataclass
class Scenario:
    """Initial profile steps plus the downstream light schedule.

    ``ic_steps`` is an ordered list of ``(position_km, added_density)``; the
    initial profile equals ``base_inflow`` before the first step and
    ``base_inflow + added_density_i`` from step ``i`` to the next, clamped to
    ``[0, rho_max]``.  ``light_phases`` is a list of ``(duration_min, state)``
    covering the run; ``validate`` checks the contract that sampled scenarios
    satisfy (hand-built scenarios for experiments may be looser, e.g. a single
    permanently-green phase).
    """

    ic_steps: list[tuple[float, float]] = field(default_factory=list)
    light_phases: list[tuple[float, LightState]] = field(default_factory=list)
    upstream_inflow: float = 0.1

    def validate(self, config: SimConfig) -> None:
        positions = [p for p, _ in self.ic_steps]
        if any(not 0.0 < p < config.road_length for p in positions):
            raise ConfigError("ic step positions must lie inside (0, road_length)")
        if any(b <= a for a, b in zip(positions, positions[1:])):
            raise ConfigError("ic step positions must be strictly increasing")
        if any(not 0.0 <= v <= config.rho_max for _, v in self.ic_steps):
            raise ConfigError("ic step densities must lie in [0, rho_max]")
        if not self.light_phases:
            raise ConfigError("scenario has no light phases")
        if any(not 1.0 <= d <= 2.0 for d, _ in self.light_phases):
            raise ConfigError("phase durations must lie in [1, 2] minutes")
        states = [s for _, s in self.light_phases]
        if any(a == b for a, b in zip(states, states[1:])):
            raise ConfigError("light phases must alternate RED/GREEN")
        if sum(d for d, _ in self.light_phases) < config.total_time:
            raise ConfigError("light phases do not cover total_time")
        if not 0.0 <= self.upstream_inflow <= config.rho_max:
            raise ConfigError("upstream_inflow outside [0, rho_max]")

    def light_state(self, t: float) -> LightState:
        """State of the downstream light at time ``t`` (minutes).

        Times beyond the scheduled phases stay in the last phase.
        """
        acc = 0.0
        for duration, state in self.light_phases:
            acc += duration
            if t < acc:
                return state
        return self.light_phases[-1][1]


@dataclass
class DensityField:
    """Dense space-time density solution of one simulation.

    ``rho[j, i]`` is the density of cell ``i`` at time ``j * dt``; row 0 is
    the initial condition.  ``boundary_flux[j] = (F_in, F_out)`` records the
    interface fluxes used for the update from row ``j`` to ``j + 1``.
    """

    rho: np.ndarray          # [nt, nx]
    dx: float                # km
    dt: float                # minutes
    boundary_flux: np.ndarray | None = None  # [nt-1, 2]

    @property
    def nt(self) -> int:
        return self.rho.shape[0]

    @property
    def nx(self) -> int:
        return self.rho.shape[1]

    @property
    def road_length(self) -> float:
        return self.nx * self.dx

    @property
    def duration(self) -> float:
        return (self.nt - 1) * self.dt


def greenshields_velocity(rho, rho_max: float = 1.0, v_max: float = 1.0):
    """Linear velocity-density closure v = v_max * (1 - rho/rho_max)."""
    rho = np.asarray(rho, dtype=np.float64)
    if np.any(rho < 0.0) or np.any(rho > rho_max):
        raise DomainError("density outside [0, rho_max]")
    return v_max * (1.0 - rho / rho_max)


def flux(rho, rho_max: float = 1.0, v_max: float = 1.0):
    """Traffic flow f(rho) = rho * v(rho); concave with peak at rho_max/2."""
    return np.asarray(rho, dtype=np.float64) * greenshields_velocity(rho, rho_max, v_max)


def godunov_flux(rho_left, rho_right, rho_max: float = 1.0, v_max: float = 1.0):
    """Exact Riemann interface flux for the concave Greenshields flow.

    Equivalent to min(f) over [L, R] for L <= R and max(f) over [R, L]
    otherwise; computed in supply/demand form, which realizes exactly that
    min/max for a concave flux.
    """
    rho_left = np.asarray(rho_left, dtype=np.float64)
    rho_right = np.asarray(rho_right, dtype=np.float64)
    for rho in (rho_left, rho_right):
        if np.any(rho < 0.0) or np.any(rho > rho_max):
            raise DomainError("density outside [0, rho_max]")
    return _interface_flux(rho_left, rho_right, rho_max, v_max)


def _interface_flux(rho_left, rho_right, rho_max, v_max):
    # demand of the left state, supply of the right state
    rho_crit = 0.5 * rho_max
    f_peak = rho_crit * v_max * 0.5
    f_left = rho_left * v_max * (1.0 - rho_left / rho_max)
    f_right = rho_right * v_max * (1.0 - rho_right / rho_max)
    demand = np.where(rho_left < rho_crit, f_left, f_peak)
    supply = np.where(rho_right > rho_crit, f_right, f_peak)
    return np.minimum(demand, supply)


def cfl_dt(config: SimConfig) -> float:
    """Largest stable time step: cfl * dx / max|f'| with max|f'| = v_max."""
    return config.cfl * config.dx / config.v_max


def step(state: np.ndarray, scenario: Scenario, t: float, dt: float,
         config: SimConfig) -> np.ndarray:
    """Advance one Godunov step; light state is sampled at time ``t``."""
    if dt > cfl_dt(config) * (1.0 + 1e-12):
        raise ConfigError(f"dt={dt} violates the CFL bound {cfl_dt(config)}")
    state = np.asarray(state, dtype=np.float64)
    if np.any(state < 0.0) or np.any(state > config.rho_max):
        raise DomainError("state outside [0, rho_max]")
    new_state, _, _ = _step_unchecked(state, scenario, t, dt, config)
    return new_state


def _step_unchecked(state, scenario, t, dt, config):
    red = scenario.light_state(t) is LightState.RED
    ghost_up = scenario.upstream_inflow
    ghost_down = config.rho_max if red else state[-1]
    padded = np.empty(state.size + 2)
    padded[0] = ghost_up
    padded[1:-1] = state
    padded[-1] = ghost_down
    f = _interface_flux(padded[:-1], padded[1:], config.rho_max, config.v_max)
    new_state = state - (dt / config.dx) * (f[1:] - f[:-1])
    # Godunov + CFL is monotone, so the bounds hold analytically; the clip
    # only removes last-ulp rounding excursions.
    np.clip(new_state, 0.0, config.rho_max, out=new_state)
    return new_state, f[0], f[-1]


def initial_profile(config: SimConfig, scenario: Scenario) -> np.ndarray:
    """Cell-centered initial density from the scenario's step list."""
    rho0 = np.full(config.nx, config.base_inflow)
    x = config.x_centers
    for position, added in scenario.ic_steps:
        rho0[x >= position] = config.base_inflow + added
    return np.clip(rho0, 0.0, config.rho_max)


def simulate(config: SimConfig, scenario: Scenario, *,
             align_dt: float = DEFAULT_ALIGN_DT,
             initial: np.ndarray | None = None) -> DensityField:
    """Run the full simulation and return the dense density field.

    ``dt`` is the largest CFL-stable step that divides ``align_dt`` evenly,
    so sensor sampling times land exactly on solution rows.  ``initial``
    overrides the scenario-derived profile (used by convergence and Riemann
    experiments).
    """
    if align_dt <= 0.0:
        raise ConfigError("align_dt must be positive")
    n_sub = max(1, math.ceil(align_dt / cfl_dt(config) - 1e-12))
    dt = align_dt / n_sub
    nt = math.ceil(config.total_time / dt - 1e-9) + 1

    if initial is None:
        state = initial_profile(config, scenario)
    else:
        state = np.asarray(initial, dtype=np.float64).copy()
        if state.shape != (config.nx,):
            raise ConfigError(f"initial profile must have shape ({config.nx},)")
        if np.any(state < 0.0) or np.any(state > config.rho_max):
            raise DomainError("initial profile outside [0, rho_max]")

    rho = np.empty((nt, config.nx))
    boundary_flux = np.empty((nt - 1, 2))
    rho[0] = state
    for j in range(nt - 1):
        state, f_in, f_out = _step_unchecked(state, scenario, j * dt, dt, config)
        rho[j + 1] = state
        boundary_flux[j, 0] = f_in
        boundary_flux[j, 1] = f_out
    return DensityField(rho=rho, dx=config.dx, dt=dt, boundary_flux=boundary_flux)


def sample_scenario(config: SimConfig, rng: np.random.Generator) -> Scenario:
    """Draw a random scenario: 2-6 IC steps and an alternating light schedule."""
    n_steps = int(rng.integers(2, 7))
    while True:
        positions = np.sort(rng.uniform(0.1 * config.road_length,
                                        0.9 * config.road_length, n_steps))
        if np.all(np.diff(positions) > 0.0):
            break
    values = rng.uniform(0.0, 0.9, n_steps)
    ic_steps = list(zip(positions.tolist(), values.tolist()))

    state = LightState.RED if rng.integers(0, 2) == 0 else LightState.GREEN
    phases: list[tuple[float, LightState]] = []
    covered = 0.0
    while covered < config.total_time:
        duration = float(rng.uniform(1.0, 2.0))
        phases.append((duration, state))
        covered += duration
        state = LightState.GREEN if state is LightState.RED else LightState.RED

    return Scenario(ic_steps=ic_steps, light_phases=phases,
                    upstream_inflow=config.base_inflow)
