import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from detno.errors import ConfigError, DomainError
from detno.lwr import (
    DensityField,
    LightState,
    Scenario,
    SimConfig,
    cfl_dt,
    flux,
    godunov_flux,
    greenshields_velocity,
    initial_profile,
    sample_scenario,
    simulate,
    step,
)


def green_scenario(inflow: float, n_phases: int = 30) -> Scenario:
    """Permanently green downstream light (free outflow)."""
    return Scenario(ic_steps=[], light_phases=[(2.0, LightState.GREEN)] * n_phases,
                    upstream_inflow=inflow)


class TestFundamentalDiagram:
    def test_velocity_endpoints(self):
        assert greenshields_velocity(0.0) == 1.0
        assert greenshields_velocity(1.0) == 0.0
        assert greenshields_velocity(0.5) == 0.5

    def test_velocity_monotone(self):
        rho = np.linspace(0.0, 1.0, 101)
        v = greenshields_velocity(rho)
        assert np.all(np.diff(v) <= 0.0)

    def test_velocity_domain_error(self):
        with pytest.raises(DomainError):
            greenshields_velocity(-0.01)
        with pytest.raises(DomainError):
            greenshields_velocity(1.01)

    def test_flux_values(self):
        assert flux(0.0) == 0.0
        assert flux(0.5) == pytest.approx(0.25, abs=1e-15)
        assert flux(0.2) == pytest.approx(0.16, abs=1e-15)

    def test_flux_peak(self):
        rho = np.linspace(0.0, 1.0, 1001)
        assert flux(rho).max() <= 0.25 + 1e-15


class TestGodunovFlux:
    def test_consistency(self):
        assert godunov_flux(0.5, 0.5) == pytest.approx(0.25, abs=1e-15)

    def test_decreasing_data_spans_critical(self):
        # max of f over [0.2, 0.8] contains the critical density 0.5
        assert godunov_flux(0.8, 0.2) == pytest.approx(0.25, abs=1e-15)

    def test_increasing_data(self):
        assert godunov_flux(0.2, 0.8) == pytest.approx(0.16, abs=1e-15)

    def test_domain_error(self):
        with pytest.raises(DomainError):
            godunov_flux(1.5, 0.0)

    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
    @settings(max_examples=200, deadline=None)
    def test_matches_interval_extremum_oracle(self, left, right):
        # independent oracle: scan the flux over the interval between states
        grid = np.linspace(min(left, right), max(left, right), 2001)
        f = flux(grid)
        expected = f.min() if left <= right else f.max()
        assert godunov_flux(left, right) == pytest.approx(expected, abs=1e-6)

    @given(st.floats(0.0, 1.0))
    @settings(max_examples=200, deadline=None)
    def test_consistency_property(self, rho):
        assert godunov_flux(rho, rho) == pytest.approx(float(flux(rho)), abs=1e-14)


class TestStep:
    def setup_method(self):
        self.config = SimConfig(nx=100)
        self.dt = cfl_dt(self.config)

    def test_uniform_state_is_stationary(self):
        scenario = green_scenario(inflow=0.3)
        state = np.full(100, 0.3)
        out = step(state, scenario, 0.0, self.dt, self.config)
        np.testing.assert_array_equal(out, state)

    def test_cfl_violation(self):
        scenario = green_scenario(inflow=0.3)
        with pytest.raises(ConfigError):
            step(np.full(100, 0.3), scenario, 0.0, 2.0 * self.dt, self.config)

    def test_shock_speed(self):
        # Riemann data 0.1 -> 0.6: shock moving at 0.3 km/min
        config = SimConfig(nx=100)
        scenario = green_scenario(inflow=0.1)
        initial = np.where(config.x_centers < 2.5, 0.1, 0.6)
        sim = simulate(config, scenario, initial=initial)
        t = 5.0
        row = sim.rho[int(round(t / sim.dt))]
        mid = 0.5 * (0.1 + 0.6)
        crossing = np.searchsorted(row, mid)  # row is monotone through the shock
        x_num = config.x_centers[crossing]
        x_exact = 2.5 + 0.3 * t
        assert abs(x_num - x_exact) <= 2.0 * config.dx

    def test_rarefaction_profile(self):
        # Riemann data 0.8 -> 0.2: entropy solution is a linear fan
        config = SimConfig(nx=100)
        scenario = green_scenario(inflow=0.8)
        x0 = 2.5
        initial = np.where(config.x_centers < x0, 0.8, 0.2)
        sim = simulate(config, scenario, initial=initial)
        t = 2.0
        row = sim.rho[int(round(t / sim.dt))]
        x = config.x_centers
        on_fan = (x - x0 > -0.6 * t + 3 * config.dx) & (x - x0 < 0.6 * t - 3 * config.dx)
        exact = 0.5 * (1.0 - (x[on_fan] - x0) / t)
        assert np.max(np.abs(row[on_fan] - exact)) <= 5.0 * config.dx


class TestSimulate:
    def test_equilibrium_constant_field(self):
        config = SimConfig(nx=60)
        scenario = green_scenario(inflow=0.25)
        sim = simulate(config, scenario, initial=np.full(60, 0.25))
        np.testing.assert_array_equal(sim.rho, np.full_like(sim.rho, 0.25))

    def test_mass_balance_total(self):
        config = SimConfig(nx=80, seed=3)
        rng = np.random.default_rng(3)
        scenario = sample_scenario(config, rng)
        sim = simulate(config, scenario)
        mass = sim.rho.sum(axis=1) * sim.dx
        influx = sim.dt * (sim.boundary_flux[:, 0] - sim.boundary_flux[:, 1])
        assert abs((mass[-1] - mass[0]) - influx.sum()) <= 1e-6 * max(mass[0], 1.0)

    def test_mass_balance_per_step(self):
        config = SimConfig(nx=80, seed=4)
        scenario = sample_scenario(config, np.random.default_rng(4))
        sim = simulate(config, scenario)
        mass = sim.rho.sum(axis=1) * sim.dx
        per_step = np.diff(mass)
        expected = sim.dt * (sim.boundary_flux[:, 0] - sim.boundary_flux[:, 1])
        scale = max(mass.max(), 1.0)
        assert np.max(np.abs(per_step - expected)) <= 1e-10 * scale

    def test_permanent_red_forms_queue(self):
        config = SimConfig(nx=100, total_time=25.0)
        scenario = Scenario(ic_steps=[], light_phases=[(2.0, LightState.RED)] * 30,
                            upstream_inflow=0.3)
        sim = simulate(config, scenario, initial=np.full(100, 0.3))
        assert sim.rho[-1, -1] >= 1.0 - 1e-9
        # congestion front (first jammed cell) moves monotonically upstream
        jammed = sim.rho >= 0.95
        front = np.array([np.argmax(j) if j.any() else sim.nx for j in jammed])
        reached = front < sim.nx
        assert np.all(np.diff(front[reached]) <= 0)

    def test_determinism(self):
        config = SimConfig(nx=50, seed=11)
        s1 = sample_scenario(config, np.random.default_rng(11))
        s2 = sample_scenario(config, np.random.default_rng(11))
        f1 = simulate(config, s1)
        f2 = simulate(config, s2)
        np.testing.assert_array_equal(f1.rho, f2.rho)

    def test_dt_divides_alignment_and_satisfies_cfl(self):
        config = SimConfig(nx=100)
        sim = simulate(config, green_scenario(0.2))
        assert sim.dt <= cfl_dt(config) + 1e-15
        n = 0.05 / sim.dt
        assert abs(n - round(n)) < 1e-9
        assert sim.duration >= config.total_time - 1e-9

    def test_shock_l1_error_halves_with_resolution(self):
        errors = []
        for nx in (100, 200):
            config = SimConfig(nx=nx)
            scenario = green_scenario(inflow=0.1)
            initial = np.where(config.x_centers < 2.5, 0.1, 0.6)
            sim = simulate(config, scenario, initial=initial)
            t = 5.0
            row = sim.rho[int(round(t / sim.dt))]
            exact = np.where(config.x_centers < 2.5 + 0.3 * t, 0.1, 0.6)
            errors.append(np.abs(row - exact).sum() * config.dx)
        ratio = errors[0] / errors[1]
        assert 2.0 * 0.8 <= ratio <= 2.0 * 1.2


class TestScenarioSampling:
    def test_deterministic_given_seed(self):
        config = SimConfig()
        a = sample_scenario(config, np.random.default_rng(7))
        b = sample_scenario(config, np.random.default_rng(7))
        assert a == b

    def test_invariants_hold_over_sweep(self):
        config = SimConfig()
        rng = np.random.default_rng(0)
        for _ in range(500):
            scenario = sample_scenario(config, rng)
            scenario.validate(config)
            assert 2 <= len(scenario.ic_steps) <= 6
            for position, value in scenario.ic_steps:
                assert 0.1 * config.road_length < position < 0.9 * config.road_length
                assert 0.0 <= value <= 0.9

    def test_initial_profile_clamped(self):
        config = SimConfig()
        rng = np.random.default_rng(1)
        for _ in range(50):
            scenario = sample_scenario(config, rng)
            rho0 = initial_profile(config, scenario)
            assert np.all(rho0 >= 0.0) and np.all(rho0 <= config.rho_max)

    def test_validate_rejects_bad_phase(self):
        config = SimConfig()
        scenario = Scenario(ic_steps=[(1.0, 0.2), (2.0, 0.4)],
                            light_phases=[(5.0, LightState.GREEN)] * 6,
                            upstream_inflow=0.1)
        with pytest.raises(ConfigError):
            scenario.validate(config)


class TestMaximumPrinciple:
    def test_random_scenarios_stay_bounded(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            config = SimConfig(nx=60, total_time=10.0)
            scenario = sample_scenario(config, rng)
            sim = simulate(config, scenario)
            assert sim.rho.min() >= 0.0
            assert sim.rho.max() <= config.rho_max


def test_config_validation():
    with pytest.raises(ConfigError):
        SimConfig(nx=1)
    with pytest.raises(ConfigError):
        SimConfig(cfl=0.0)
    with pytest.raises(ConfigError):
        SimConfig(base_inflow=0.0)
    with pytest.raises(ConfigError):
        SimConfig(road_length=-1.0)


def test_density_field_properties():
    field = DensityField(rho=np.zeros((11, 4)), dx=0.5, dt=0.1)
    assert field.nt == 11 and field.nx == 4
    assert field.road_length == pytest.approx(2.0)
    assert field.duration == pytest.approx(1.0)
