import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semiclassical_control.curves import ConstantCurve, PiecewiseConstantCurve, SmoothedCurve
from semiclassical_control.errors import PositivityLost
from semiclassical_control.limit_system import (
    COMPONENTS,
    LimitState,
    SolverConfig,
    SystemInput,
    lipschitz_probe,
    plan_time_grid,
    product_norm,
    rhs_full,
    solve_A_characteristics,
    solve_A_spectral,
    solve_R,
    state_norm,
    terminal_error,
)
from semiclassical_control.spectral import PeriodicField, PeriodicGrid, derivative_array

GRID = PeriodicGrid(64)


def field(v, grid=GRID):
    return PeriodicField(grid, np.broadcast_to(np.asarray(v, dtype=float), (grid.n_points,)))


def rest_input(eta=None, xi=None, zeta=None, g0=None, grid=GRID, T=1.0):
    z = np.zeros(grid.n_points)
    return SystemInput(field(1.0 if g0 is None else g0, grid), field(z, grid), field(z, grid), field(z, grid),
                       field(z, grid), T, xi=xi, zeta=zeta, eta=eta)


def const_control(c0_cos1=0.0, c1_sin1=0.0, T=1.0):
    c = np.zeros((2, 1, 2))
    c[0, 0, 1] = c0_cos1
    c[1, 0, 0] = c1_sin1
    return ConstantCurve(c, T)


class TestRightHandSide:
    def test_rest_state_is_stationary(self):
        st_ = rest_input().initial_state()
        d = rhs_full(st_)
        assert np.max(np.abs(d.as_array())) < 1e-14

    def test_matches_written_out_equations(self):
        # the five equations evaluated directly with grid products
        g = GRID
        x = g.x
        u0, u1 = 0.3 * np.sin(x), 0.1 * np.cos(2 * x)
        r0, r1, A = 1 + 0.2 * np.cos(x), 0.1 * np.sin(x), 0.05 * np.cos(3 * x)
        xi = np.stack([0.1 * np.cos(x), 0.2 * np.sin(x)])
        ze = np.stack([0.05 * np.sin(2 * x), -0.1 * np.cos(x)])
        eta = np.stack([0.4 * np.sin(x), 0.3 * np.cos(x)])
        d = lambda f: derivative_array(f, g)
        s = LimitState.from_array(g, np.stack([u0, u1, r0, r1, A]))
        out = rhs_full(s, xi, ze, eta).as_array()
        z0, z1, w0, w1 = u0 + ze[0], u1 + ze[1], u0 + xi[0], u1 + xi[1]
        expected = np.stack([
            eta[0] - d(0.5 * w0**2) - d(r0),
            eta[1] - d(w0 * w1) - d(r1),
            -d(z0 * r0),
            d(A) - d(z0 * r1 + z1 * r0),
            -z0 * d(A) - 2 * d(z0) * A,
        ])
        assert np.max(np.abs(out - expected)) < 1e-12


class TestLinearOracle:
    def test_small_forcing_matches_acoustic_solution(self):
        # rest state + eta0 = a cos x: linearised u_t = a cos x - rho_x, rho_t = -u_x
        # gives rho = 1 + a (1 - cos t) sin x, u = a sin t cos x, up to O(a^2)
        a = 1e-5
        T = 1.0
        tr = solve_R(rest_input(eta=const_control(c0_cos1=a)), time_grid=np.linspace(0.0, T, 201))
        x = GRID.x
        rho_lin = 1.0 + a * (1.0 - np.cos(T)) * np.sin(x)
        u_lin = a * np.sin(T) * np.cos(x)
        term = tr.terminal
        assert np.max(np.abs(term.rho0.values - rho_lin)) < 10 * a**2
        assert np.max(np.abs(term.u0.values - u_lin)) < 10 * a**2


class TestSolver:
    @given(amp=st.floats(0.0, 0.2), mode=st.integers(1, 4), c=st.floats(-0.3, 0.3))
    @settings(max_examples=12, deadline=None)
    def test_mass_conserved(self, amp, mode, c):
        g0 = 1.0 + amp * np.cos(mode * GRID.x)
        inp = rest_input(eta=const_control(c, -c), g0=g0)
        tr = solve_R(inp, time_grid=np.linspace(0.0, 0.5, 101))
        dx = GRID.dx
        for comp in ("rho0", "rho1"):
            m = tr.states[:, COMPONENTS.index(comp)].sum(axis=-1) * dx
            assert np.max(np.abs(m - m[0])) <= 1e-8 * max(abs(m[0]), 1.0)

    def test_fourth_order_in_time(self):
        inp = rest_input(eta=const_control(0.3, 0.2), g0=1.0 + 0.1 * np.cos(GRID.x))
        sols = [solve_R(inp, time_grid=np.linspace(0.0, 1.0, n + 1)).terminal.as_array() for n in (20, 40, 80)]
        e1 = np.max(np.abs(sols[0] - sols[1]))
        e2 = np.max(np.abs(sols[1] - sols[2]))
        assert np.log2(e1 / e2) > 3.5

    def test_rejects_nonpositive_density(self):
        with pytest.raises(PositivityLost):
            solve_R(rest_input(g0=np.cos(GRID.x)))

    def test_zeta_equal_velocity_shift(self):
        # a constant-in-x zeta is not allowed to change mass, and xi = zeta = 0 equals no perturbation
        base = rest_input(eta=const_control(0.1, 0.0))
        zero = ConstantCurve(np.zeros((2, 1, 2)), 1.0)
        times = np.linspace(0.0, 1.0, 51)
        a = solve_R(base, time_grid=times).terminal.as_array()
        b = solve_R(base.with_controls(xi=zero, zeta=zero, eta=base.eta), time_grid=times).terminal.as_array()
        assert np.array_equal(a, b)


class TestTimeGrid:
    def test_contains_breakpoints(self):
        edges = np.array([0.0, 0.3, 0.7, 1.0])
        pc = PiecewiseConstantCurve(edges, np.zeros((3, 2, 1, 2)))
        grid = plan_time_grid(rest_input(xi=pc, zeta=pc), SolverConfig())
        for e in edges:
            assert np.min(np.abs(grid - e)) < 1e-15

    def test_fine_steps_only_in_windows(self):
        edges = np.linspace(0.0, 1.0, 5)
        vals = np.zeros((4, 2, 1, 2))
        vals[::2, 0, 0, 1] = 0.1
        pc = PiecewiseConstantCurve(edges, vals)
        sm = SmoothedCurve(pc, 0.01)
        cfg = SolverConfig()
        grid = plan_time_grid(rest_input(eta=sm.time_derivative()), cfg)
        dts = np.diff(grid)
        assert dts.min() == pytest.approx(0.01 / cfg.steps_per_feature, rel=1e-6)
        # far fewer steps than a uniform grid at the fine step
        assert grid.size < 0.25 / dts.min()


class TestNorms:
    def test_product_norm_is_l2_combination(self):
        assert product_norm([3.0, 4.0]) == pytest.approx(5.0)

    def test_terminal_error_zero_on_target(self):
        st_ = rest_input().initial_state()
        target = {"vhat0": st_.u0, "vhat1": st_.u1, "ghat0": st_.rho0, "ghat1": st_.rho1}
        assert terminal_error(st_, target, GRID) == 0.0

    def test_state_norm_offsets(self):
        # a single cos x in u1 is measured in H^{k-2}
        diff = np.zeros((5, GRID.n_points))
        diff[1] = np.cos(GRID.x)
        assert state_norm(diff, GRID, 3) == pytest.approx(np.sqrt(2 * np.pi))


class TestTransport:
    @given(a=st.floats(-0.4, 0.4), b=st.floats(-0.2, 0.2))
    @settings(max_examples=8, deadline=None)
    def test_spectral_matches_characteristics(self, a, b):
        g = PeriodicGrid(64)
        u = a * np.sin(g.x) + b * np.cos(2 * g.x)
        A0 = PeriodicField(g, 0.3 * np.cos(g.x))
        t = np.linspace(0.0, 0.5, 6)
        s = solve_A_spectral(lambda _: u, A0, t, substeps=20)
        c = solve_A_characteristics(PeriodicField(g, u), A0, t, steps_per_interval=20)
        assert np.max(np.abs(s.samples - c.samples)) < 1e-6


class TestLipschitz:
    def test_ratio_stable_under_scaling(self):
        base = const_control(0.1, 0.1)
        in1 = rest_input(eta=base, g0=1 + 0.1 * np.cos(GRID.x))
        ratios = []
        for d in (1e-3, 1e-4):
            in2 = rest_input(eta=const_control(0.1 + d, 0.1), g0=1 + 0.1 * np.cos(GRID.x))
            ratios.append(lipschitz_probe(in1, in2, k=3).ratio)
        assert ratios[0] == pytest.approx(ratios[1], rel=0.05)


class TestLogging:
    def test_log_records_are_json(self):
        tr = solve_R(rest_input(eta=const_control(0.1)), time_grid=np.linspace(0.0, 1.0, 11))
        recs = [json.loads(line) for line in tr.log_jsonl().splitlines()]
        assert len(recs) == 11
        assert set(recs[0]["H3"]) == set(COMPONENTS)
