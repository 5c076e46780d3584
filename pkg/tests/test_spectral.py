import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semiclassical_control.errors import MeanNotZero
from semiclassical_control.spectral import (
    PeriodicField,
    PeriodicGrid,
    TimeCurve,
    curve_from_csv,
    curve_to_csv,
    derivative,
    field_from_csv,
    field_to_csv,
    l2_in_time,
    l2_norm,
    project_E,
    sobolev_norm,
    time_integral_K,
    trig_interpolate,
    zero_mean_antiderivative,
)

GRID = PeriodicGrid(64)

coeff_lists = st.lists(st.floats(-1.0, 1.0, allow_nan=False), min_size=2, max_size=10)


def trig_field(grid, a, b):
    x = grid.x
    v = np.zeros_like(x)
    for j, (aj, bj) in enumerate(zip(a, b), start=1):
        v += aj * np.cos(j * x) + bj * np.sin(j * x)
    return PeriodicField(grid, v)


class TestGrid:
    @pytest.mark.parametrize("n", [7, 12, 100, 4])
    def test_rejects_bad_sizes(self, n):
        with pytest.raises(ValueError):
            PeriodicGrid(n)

    def test_nodes(self):
        g = PeriodicGrid(8)
        assert g.x[0] == 0.0
        assert g.dx == pytest.approx(2 * np.pi / 8)
        assert g.x[-1] == pytest.approx(2 * np.pi - g.dx)

    def test_dealias_mask_keeps_two_thirds(self):
        g = PeriodicGrid(64)
        # wavenumbers 0..21 satisfy k < 64/3
        assert g.dealias_mask.sum() == 22


class TestDerivative:
    @pytest.mark.parametrize("j", [1, 3, 10])
    def test_sine_derivative_exact(self, j):
        f = PeriodicField.from_function(GRID, lambda x: np.sin(j * x))
        assert derivative(f).allclose(PeriodicField.from_function(GRID, lambda x: j * np.cos(j * x)), atol=1e-11)

    def test_second_derivative_of_gaussian_bump(self):
        # smooth periodic function, compared with its analytic second derivative
        g = PeriodicGrid(128)
        f = PeriodicField.from_function(g, lambda x: np.exp(np.cos(x)))
        exact = np.exp(np.cos(g.x)) * (np.sin(g.x) ** 2 - np.cos(g.x))
        assert np.max(np.abs(derivative(f, 2).values - exact)) < 1e-12

    def test_order_zero_rejected(self):
        with pytest.raises(ValueError):
            derivative(PeriodicField.zeros(GRID), 0)


class TestSobolev:
    def test_l2_of_sine(self):
        f = PeriodicField.from_function(GRID, np.sin)
        assert l2_norm(f) == pytest.approx(np.sqrt(np.pi), rel=1e-13)

    @pytest.mark.parametrize("k", [0, 1, 2, 3])
    def test_mode_j_norm(self, k):
        # ||cos jx||_{H^k}^2 = pi * sum_{i<=k} j^{2i}
        j = 3
        f = PeriodicField.from_function(GRID, lambda x: np.cos(j * x))
        expected = np.sqrt(np.pi * sum(j ** (2 * i) for i in range(k + 1)))
        assert sobolev_norm(f, k) == pytest.approx(expected, rel=1e-13)

    @given(a=coeff_lists, b=coeff_lists)
    @settings(max_examples=40, deadline=None)
    def test_multiplier_matches_derivative_sum(self, a, b):
        # independent route: sum of L2 norms of spectral derivatives
        f = trig_field(GRID, a, b)
        direct = np.sqrt(sum(l2_norm(derivative(f, i)) ** 2 for i in range(1, 3)) + l2_norm(f) ** 2)
        assert sobolev_norm(f, 2) == pytest.approx(direct, rel=1e-10, abs=1e-12)

    @given(a=coeff_lists, b=coeff_lists)
    @settings(max_examples=30, deadline=None)
    def test_monotone_in_k(self, a, b):
        f = trig_field(GRID, a, b)
        norms = [sobolev_norm(f, k) for k in range(4)]
        assert all(n1 <= n2 + 1e-12 for n1, n2 in zip(norms, norms[1:]))


class TestAntiderivative:
    @given(a=coeff_lists, b=coeff_lists)
    @settings(max_examples=40, deadline=None)
    def test_inverts_derivative(self, a, b):
        f = trig_field(GRID, a, b)
        F = zero_mean_antiderivative(f)
        assert abs(F.mean()) < 1e-13
        assert derivative(F).allclose(f, atol=1e-11)

    def test_nonzero_mean_raises(self):
        with pytest.raises(MeanNotZero):
            zero_mean_antiderivative(PeriodicField.from_function(GRID, lambda x: 1.0 + np.sin(x)))


class TestProjection:
    def test_E0_keeps_mode_one_only(self):
        f = PeriodicField.from_function(GRID, lambda x: 2.0 + np.sin(x) + np.cos(2 * x))
        assert project_E(f, 0).allclose(PeriodicField.from_function(GRID, np.sin), atol=1e-13)

    @given(a=coeff_lists, b=coeff_lists, n=st.integers(0, 6))
    @settings(max_examples=30, deadline=None)
    def test_idempotent(self, a, b, n):
        f = trig_field(GRID, a, b)
        p = project_E(f, n)
        assert project_E(p, n).allclose(p, atol=1e-13)


class TestInterpolation:
    def test_off_grid_values(self):
        g = PeriodicGrid(32)
        vals = np.sin(3 * g.x) + 0.5 * np.cos(g.x)
        xs = np.array([0.1, 1.234, 5.9])
        assert np.allclose(trig_interpolate(vals, g, xs), np.sin(3 * xs) + 0.5 * np.cos(xs), atol=1e-13)


class TestSerialization:
    def test_field_round_trip_bitwise(self):
        f = PeriodicField.from_function(GRID, lambda x: np.exp(np.sin(x)))
        g = field_from_csv(field_to_csv(f))
        assert np.array_equal(f.values, g.values)

    def test_complex_field_round_trip(self):
        f = PeriodicField.from_function(GRID, lambda x: np.exp(1j * x))
        assert np.array_equal(field_from_csv(field_to_csv(f)).values, f.values)

    def test_curve_round_trip(self):
        t = np.linspace(0.0, 1.0, 3)
        c = TimeCurve(t, np.stack([np.sin(GRID.x + s) for s in t]), GRID)
        back = curve_from_csv(curve_to_csv(c))
        assert np.array_equal(back.t_nodes, c.t_nodes)
        assert np.array_equal(back.samples, c.samples)


class TestTimeCurves:
    def test_K_of_constant_is_linear(self):
        t = np.linspace(0.0, 2.0, 11)
        c = TimeCurve(t, np.ones((11, 4)))
        assert np.allclose(time_integral_K(c).samples[:, 0], t)

    def test_rejects_nonzero_start(self):
        with pytest.raises(ValueError):
            TimeCurve(np.array([0.5, 1.0]), np.zeros((2, 3)))

    def test_l2_in_time_constant(self):
        t = np.linspace(0.0, 4.0, 9)
        assert l2_in_time(t, np.full(9, 3.0)) == pytest.approx(6.0)
