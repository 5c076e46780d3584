import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semiclassical_control.curves import ConstantCurve
from semiclassical_control.errors import Instability, VacuumRegion
from semiclassical_control.limit_system import SystemInput, solve_R
from semiclassical_control.semiclassical import (
    GrenierState,
    WaveFunction,
    extract_observables,
    grenier_from_wkb_initial,
    potential_from_eta,
    rho1_equation_residual,
    solve_grenier,
    solve_nls,
    solve_order0,
    solve_order1,
    time_nodes,
    wkb_error_metrics,
)
from semiclassical_control.spectral import PeriodicField, PeriodicGrid, antiderivative_array, derivative_array

GRID = PeriodicGrid(64)
X = GRID.x


def pf(v):
    return PeriodicField(GRID, np.asarray(v))


def control(c0_cos1=0.0, c1_sin1=0.0):
    c = np.zeros((2, 1, 2))
    c[0, 0, 1] = c0_cos1
    c[1, 0, 0] = c1_sin1
    return ConstantCurve(c, 1.0)


class TestNLS:
    @pytest.mark.parametrize("j", [0, 1, 3])
    @pytest.mark.parametrize("f", [0.0, 0.4])
    def test_plane_wave_phase(self, j, f):
        # |psi| = 1 kills the nonlinearity; exact phase exp(-i (hbar j^2/2 + f/hbar) t)
        hbar, T = 0.1, 0.5
        psi0 = WaveFunction(pf(np.exp(1j * j * X)), hbar)
        tr = solve_nls(psi0, lambda t: np.full(X.shape, f), T, dt=1e-3)
        exact = np.exp(1j * j * X) * np.exp(-1j * (0.5 * hbar * j**2 + f / hbar) * T)
        assert np.max(np.abs(tr.terminal.psi.values - exact)) < 1e-10

    @given(amp=st.floats(0.0, 0.3), c=st.floats(-0.5, 0.5))
    @settings(max_examples=10, deadline=None)
    def test_mass_conserved(self, amp, c):
        hbar = 0.125
        psi0 = WaveFunction(pf(np.sqrt(1 + amp * np.cos(X)) * np.exp(1j * np.cos(X) / hbar * 0.1)), hbar)
        tr = solve_nls(psi0, potential_from_eta(control(c, c), hbar, GRID), 0.25, dt=2e-3, store_every=25)
        assert np.max(np.abs(tr.mass - tr.mass[0])) / tr.mass[0] < 1e-12

    def test_mass_guard(self):
        psi0 = WaveFunction(pf(np.ones(64, dtype=complex)), 0.1)
        with pytest.raises(Instability):
            solve_nls(psi0, lambda t: np.full(64, np.nan), 0.01, dt=1e-3)

    def test_second_order_in_time(self):
        hbar = 0.125
        psi0 = WaveFunction(pf(np.sqrt(1 + 0.2 * np.cos(X)).astype(complex)), hbar)
        F = potential_from_eta(control(0.3), hbar, GRID)
        ends = [solve_nls(psi0, F, 0.25, dt=dt).terminal.psi.values for dt in (4e-3, 2e-3, 1e-3)]
        e1 = np.max(np.abs(ends[0] - ends[1]))
        e2 = np.max(np.abs(ends[1] - ends[2]))
        assert 1.7 < np.log2(e1 / e2) < 2.3


class TestGrenier:
    def test_rest_state_is_stationary(self):
        w0 = GrenierState(pf(np.ones(64)), pf(np.zeros(64)), pf(np.zeros(64)), 0.0)
        tr = solve_grenier(w0, None, 0.1, 0.5, dt=1e-2)
        assert np.max(np.abs(tr.states[-1] - tr.states[0])) < 1e-14

    def test_matches_nls(self):
        hbar = 0.125
        a0 = np.sqrt(1 + 0.1 * np.cos(X))
        w0 = grenier_from_wkb_initial(pf(a0), None, pf(0.05 * np.sin(X)), hbar)
        eta = control(0.2, 0.1)
        gt = solve_grenier(w0, eta, hbar, 0.25, dt=5e-4, store_every=100)
        nt = solve_nls(w0.to_wave(hbar), potential_from_eta(eta, hbar, GRID), 0.25, dt=5e-4, store_every=100)
        gap = max(np.max(np.abs(gt.wave(i).psi.values - nt.wave(i).psi.values)) for i in range(len(nt.t_nodes)))
        assert gap < 1e-6

    def test_rejects_negative_hbar(self):
        w0 = GrenierState(pf(np.ones(64)), pf(np.zeros(64)), pf(np.zeros(64)), 0.0)
        with pytest.raises(ValueError):
            solve_grenier(w0, None, -0.1, 0.1)


class TestWKBCascade:
    def test_order0_and_order1_match_limit_system(self):
        # the WKB densities and velocities obey the limit equations with A = 0
        g0 = 1 + 0.1 * np.cos(X)
        g1 = 0.05 * np.cos(X)
        v0 = 0.1 * np.sin(X)
        eta = control(0.2, -0.1)
        T, dt = 0.5, 1e-3
        a0 = np.sqrt(g0)
        wkb = solve_order1(solve_order0(pf(a0), pf(antiderivative_array(v0, GRID)), eta, T, dt=dt), pf(g1 / (2 * a0)), eta)
        z = np.zeros(64)
        inp = SystemInput(pf(g0), pf(g1), pf(v0), pf(z), pf(z), T, eta=eta)
        tr = solve_R(inp, time_grid=np.linspace(0.0, T, round(T / dt) + 1))
        term = tr.terminal
        assert np.max(np.abs(wkb.rho0().samples[-1] - term.rho0.values)) < 1e-8
        assert np.max(np.abs(wkb.u0.samples[-1] - term.u0.values)) < 1e-8
        assert np.max(np.abs(wkb.rho1().samples[-1] - term.rho1.values)) < 1e-8
        assert np.max(np.abs(wkb.u1.samples[-1] - term.u1.values)) < 1e-8

    def test_rho1_balance_and_phase(self):
        a0 = np.sqrt(1 + 0.1 * np.cos(X))
        eta = control(0.2, 0.3)
        w0 = solve_order0(pf(a0), pf(0.05 * np.cos(X)), eta, 0.3, dt=1e-3, store_every=50)
        wkb = solve_order1(w0, pf(np.zeros(64)), eta)
        assert rho1_equation_residual(wkb, eta) < 1e-10
        assert wkb.phase_residual() < 1e-10


class TestObservables:
    def test_density_and_momentum(self):
        hbar = 0.05
        rho = 1 + 0.2 * np.cos(X)
        S = 0.3 * np.sin(X)
        obs = extract_observables(WaveFunction(pf(np.sqrt(rho) * np.exp(1j * S / hbar)), hbar))
        assert np.allclose(obs.rho.values, rho, atol=1e-13)
        assert np.allclose(obs.momentum.values, rho * derivative_array(S, GRID), atol=1e-9)
        assert np.allclose(obs.u.values, 0.3 * np.cos(X), atol=1e-9)

    def test_vacuum(self):
        psi = WaveFunction(pf(np.cos(X / 2) ** 2 + 0j), 0.1)
        assert extract_observables(psi).vacuum
        with pytest.raises(VacuumRegion):
            extract_observables(psi, strict=True)

    def test_wkb_metric_zero_on_exact_profile(self):
        hbar = 0.1
        a = 1 + 0.1 * np.cos(X)
        S0, S1 = 0.2 * np.sin(X), 0.1 * np.cos(X)
        psi = WaveFunction(pf(a * np.exp(1j * S0 / hbar + 1j * S1)), hbar)
        m = wkb_error_metrics(psi, a, S0, S1)
        assert m["s_H3"] < 1e-10


class TestTimeNodes:
    def test_always_stores_final(self):
        times, idx = time_nodes(1.0, 7, 3)
        assert idx.tolist() == [0, 3, 6, 7]
        assert times[-1] == 1.0
