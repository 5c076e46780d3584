import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semiclassical_control.errors import NotInSpace
from semiclassical_control.spectral import PeriodicGrid, derivative_array
from semiclassical_control.trig_algebra import (
    COS,
    SIN,
    OscillatorSchedule,
    TrigPolynomial,
    adjoint_cancellation_residual,
    basis_elements,
    build_oscillator,
    decompose_mode,
    decompose_pair,
    decompose_pair_coeffs,
    exact_product,
    potential_by_quadrature,
    potential_from_control,
    relaxation_metric,
    smooth_oscillator,
)

GRID = PeriodicGrid(256)


def poly_strategy(max_mode):
    return st.lists(
        st.floats(-2.0, 2.0, allow_nan=False), min_size=2 * max_mode, max_size=2 * max_mode
    ).map(lambda v: TrigPolynomial(np.array(v).reshape(max_mode, 2)))


class TestTrigPolynomial:
    def test_values_match_basis(self):
        p = TrigPolynomial.from_terms({(2, "sin"): 1.5, (3, "cos"): -0.5})
        assert np.allclose(p.values(GRID), 1.5 * np.sin(2 * GRID.x) - 0.5 * np.cos(3 * GRID.x), atol=1e-14)

    def test_derivative(self):
        p = TrigPolynomial.from_terms({(2, "sin"): 1.0, (1, "cos"): 2.0})
        assert np.allclose(p.derivative().values(GRID), derivative_array(p.values(GRID), GRID), atol=1e-12)

    @given(p=poly_strategy(4), q=poly_strategy(3))
    @settings(max_examples=40, deadline=None)
    def test_exact_product_matches_grid_product(self, p, q):
        mean, osc = exact_product(p, q)
        grid_prod = p.values(GRID) * q.values(GRID)
        assert np.allclose(mean + osc.values(GRID), grid_prod, atol=1e-12)

    def test_split_and_in_E(self):
        p = TrigPolynomial.from_terms({(1, "sin"): 1.0, (3, "cos"): 1.0})
        low, high = p.split(0)
        assert low.in_E(0) and not high.in_E(1)
        assert high.highest_mode() == 3


class TestBracketDecomposition:
    @pytest.mark.parametrize("n", range(7))
    def test_every_basis_mode(self, n):
        for j, kind, e in basis_elements(n + 2):
            for sign in (1.0, -1.0):
                psi = e * sign
                d = decompose_mode(psi, n)
                assert d.residual(psi, GRID) <= 1e-12
                assert d.phi.in_E(n)
                assert all(f.in_E(n) for f in d.factors)

    @pytest.mark.parametrize("n", [0, 2, 5])
    def test_exact_reconstruction_in_coefficients(self, n):
        # independent route: coefficient convolution, no grid involved
        psi = TrigPolynomial.basis(n + 2, COS, scale=-0.7) + TrigPolynomial.basis(n + 2, SIN, scale=0.3)
        d = decompose_mode(psi, n)
        diff = d.reconstruct_exact().padded(n + 2).coefficients - psi.padded(n + 2).coefficients
        assert np.max(np.abs(diff)) <= 1e-14

    @given(psi=poly_strategy(5))
    @settings(max_examples=40, deadline=None)
    def test_random_E4_elements(self, psi):
        d = decompose_mode(psi, 3)
        assert d.residual(psi, GRID) <= 1e-11
        assert all(f.in_E(3) for f in d.factors)

    def test_lower_modes_pass_through(self):
        psi = TrigPolynomial.from_terms({(1, "sin"): 0.4})
        d = decompose_mode(psi, 0)
        assert d.factors == ()
        assert np.allclose(d.phi.coefficients[0], [0.4, 0.0])

    def test_rejects_out_of_space(self):
        with pytest.raises(NotInSpace):
            decompose_mode(TrigPolynomial.basis(4, SIN), 1)


class TestPairedDecomposition:
    @given(z0=poly_strategy(3), z1=poly_strategy(3))
    @settings(max_examples=40, deadline=None)
    def test_identities_hold(self, z0, z1):
        p = decompose_pair((z0, z1), 1)
        r0, r1 = p.residuals((z0, z1), GRID)
        assert r0 <= 1e-11 and r1 <= 1e-11
        assert p.eta[0].in_E(1) and p.eta[1].in_E(1)
        assert all(a.in_E(1) and b.in_E(1) for a, b in p.pairs)

    def test_coeff_layout(self):
        c = np.zeros((2, 2, 2))
        c[0, 1, COS] = 0.05
        c[1, 1, SIN] = 0.05
        p = decompose_pair_coeffs(c, 0)
        assert p.pair_coeffs().shape == (p.m, 2, 1, 2)
        assert p.eta_coeffs().shape == (2, 1, 2)


class TestOscillator:
    def test_schedule_requires_antisymmetry(self):
        xi = np.ones((2, 1, 1, 2))
        with pytest.raises(ValueError):
            OscillatorSchedule(xi, 2, 1.0)

    def test_mean_zero_over_each_period(self):
        f = np.random.default_rng(1).normal(size=(2, 2, 2, 2))
        s = OscillatorSchedule.from_factors(f, 3, 1.0)
        mu = build_oscillator(s)
        ints = [mu.integral(t) for t in np.linspace(0.0, 1.0, 4)]
        assert all(np.max(np.abs(v)) < 1e-14 for v in ints)

    def test_averaged_quadratic_matches_factors(self):
        # sum_j lam xi^j d xi^j = sum_i f_i d f_i
        f = np.random.default_rng(2).normal(size=(3, 1, 2, 2))
        s = OscillatorSchedule.from_factors(f, 1, 1.0)
        from semiclassical_control.curves import coeffs_to_fields

        xi = coeffs_to_fields(s.xi_list[:, 0], GRID)
        fi = coeffs_to_fields(f[:, 0], GRID)
        lhs = sum(s.lam * v * derivative_array(v, GRID) for v in xi)
        rhs = sum(v * derivative_array(v, GRID) for v in fi)
        assert np.max(np.abs(lhs - rhs)) < 1e-12

    def test_smoothed_vanishes_at_ends(self):
        f = np.ones((1, 2, 1, 2))
        mu = build_oscillator(OscillatorSchedule.from_factors(f, 4, 1.0))
        sm = smooth_oscillator(mu, 2.0)
        assert np.all(sm.coeffs(0.0) == 0.0) and np.all(sm.coeffs(1.0) == 0.0)
        # away from jumps and ramps it equals the step function
        L = mu.feature_time
        t = 1.5 * L
        assert np.allclose(sm.coeffs(t), mu.coeffs(t))


class TestAdjointCancellation:
    @given(seed=st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_cross_terms_cancel(self, seed):
        rng = np.random.default_rng(seed)
        u0 = TrigPolynomial(rng.normal(size=(3, 2))).values(GRID)
        m = int(rng.integers(1, 4))
        xi = rng.normal(scale=0.5, size=(m, 1, 3, 2))
        s = OscillatorSchedule(np.concatenate([xi, -xi]), 2, 1.0)
        assert adjoint_cancellation_residual(u0, s, GRID) <= 1e-12


class TestRelaxation:
    def test_inverse_n_decay(self):
        u0 = 0.5 * np.sin(GRID.x)
        f = np.zeros((1, 2, 1, 2))
        f[0, 0, 0, COS] = 0.2
        ns = [4, 8, 16, 32]
        vals = [relaxation_metric(u0, OscillatorSchedule.from_factors(f, n, 1.0), GRID) for n in ns]
        slope = np.polyfit(np.log(ns), np.log(vals), 1)[0]
        assert -1.2 <= slope <= -0.8


class TestPotential:
    @pytest.mark.parametrize("terms", [{(1, "sin"): 1.0}, {(2, "cos"): 0.5, (3, "sin"): -0.25}])
    def test_against_quadrature(self, terms):
        eta = TrigPolynomial.from_terms(terms)
        g = PeriodicGrid(32)
        F = potential_from_control(eta, g).values
        Fq = potential_by_quadrature(eta)(g.x)
        assert np.max(np.abs(F - Fq)) < 1e-10

    def test_minus_derivative_is_control(self):
        eta = TrigPolynomial.from_terms({(1, "cos"): 0.3, (2, "sin"): 0.7})
        F = potential_from_control(eta, GRID).values
        assert np.allclose(-derivative_array(F, GRID), eta.values(GRID), atol=1e-12)
