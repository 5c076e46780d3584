import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semiclassical_control.curves import ConstantCurve
from semiclassical_control.errors import InvalidSpec
from semiclassical_control.spectral import PeriodicField, PeriodicGrid, derivative_array
from semiclassical_control.synthesis import (
    StageControls,
    SynthesisPath,
    SynthesisReport,
    TargetSpec,
    cutoff_profile,
    cutoff_profile_derivative,
    interpolate_trajectory,
    oscillation_insensitivity,
    reduce_stage,
    stageN_construction,
    stageN_controls,
    xi0_pointwise,
    xi1_pointwise,
)

GRID = PeriodicGrid(64)


def make_spec(grid=GRID, g0="1", ghat0="1", g1="0", ghat1="0", eps=1e-2, **kw):
    x = grid.x
    env = {"x": x, "np": np, "cos": np.cos, "sin": np.sin}

    def f(expr):
        return PeriodicField(grid, np.broadcast_to(np.asarray(eval(expr, env), dtype=float), x.shape).copy())

    z = f("0")
    fields = dict(g0=f(g0), g1=f(g1), v0=z, v1=z, ghat0=f(ghat0), ghat1=f(ghat1), vhat0=z, vhat1=z, A0=z)
    fields.update({k: f(v) for k, v in kw.items()})
    return TargetSpec(T=1.0, eps=eps, k=3, **fields)


class TestTargetSpec:
    def test_mass_mismatch_rejected(self):
        with pytest.raises(InvalidSpec):
            make_spec(ghat0="1.1").validate()

    def test_nonpositive_density_rejected(self):
        with pytest.raises(InvalidSpec):
            make_spec(g0="cos(x)", ghat0="cos(x)").validate()

    def test_velocity_mean_rejected(self):
        with pytest.raises(InvalidSpec):
            make_spec(v0="0.1 + sin(x)").validate()

    def test_interpolation_endpoints(self):
        spec = make_spec(ghat0="1 + 0.1*cos(x)", ghat1="0.05*sin(x)")
        tr = interpolate_trajectory(spec)
        assert np.array_equal(tr.rho(0.0)[0], spec.g0.values)
        assert np.allclose(tr.rho(1.0)[1], spec.ghat1.values)
        assert np.allclose(tr.rho_dot[0], 0.1 * np.cos(GRID.x))


class TestPerturbations:
    @given(a=st.floats(-0.3, 0.3), b=st.floats(-0.2, 0.2), c=st.floats(-0.5, 0.5))
    @settings(max_examples=30, deadline=None)
    def test_xi0_solves_continuity(self, a, b, c):
        x = GRID.x
        rho0 = 1 + a * np.cos(x) + b * np.sin(2 * x)
        u0 = c * np.sin(x)
        rho0_t = 0.1 * np.cos(x) - 0.05 * np.sin(3 * x)
        xi0 = xi0_pointwise(rho0, u0, rho0_t, GRID)
        residual = rho0_t + derivative_array(rho0 * (u0 + xi0), GRID)
        assert np.max(np.abs(residual)) < 1e-12
        assert abs(np.mean(xi0)) < 1e-14

    def test_xi1_solves_first_order_continuity(self):
        x = GRID.x
        rho = np.stack([1 + 0.2 * np.cos(x), 0.1 * np.sin(x)])
        u = np.stack([0.3 * np.sin(x), 0.1 * np.cos(x)])
        rho_t = np.stack([0.0 * x, 0.05 * np.cos(2 * x)])
        xi0 = 0.1 * np.sin(2 * x)
        A = 0.02 * np.cos(x)
        xi1 = xi1_pointwise(rho, u, rho_t, xi0, A, GRID)
        d = lambda f: derivative_array(f, GRID)
        residual = rho_t[1] - d(A) + d((u[0] + xi0) * rho[1] + (u[1] + xi1) * rho[0])
        assert np.max(np.abs(residual)) < 1e-12

    def test_closed_loop_residual_vanishes_along_path(self):
        spec = make_spec(ghat0="1 + 0.05*cos(x)", ghat1="0.05*cos(x)")
        path = SynthesisPath(spec, np.linspace(0.0, 1.0, 201))
        assert max(path.closed_loop_residual(t) for t in (0.0, 0.37, 0.8, 1.0)) < 1e-8


class TestCutoff:
    def test_profile_shape(self):
        T, d = 1.0, 0.05
        assert cutoff_profile(0.0, T, d) == 0.0 and cutoff_profile(T, T, d) == 0.0
        assert cutoff_profile(0.5, T, d) == 1.0

    @pytest.mark.parametrize("t", [0.01, 0.03, 0.97])
    def test_derivative_matches_finite_difference(self, t):
        h = 1e-6
        fd = (cutoff_profile(t + h, 1.0, 0.05) - cutoff_profile(t - h, 1.0, 0.05)) / (2 * h)
        assert cutoff_profile_derivative(t, 1.0, 0.05) == pytest.approx(fd, rel=1e-6, abs=1e-8)


class TestStageN:
    def test_hold_scenario_reaches_target(self):
        # target equals initial state: the holding forcing lies in E_0
        spec = make_spec(g0="1 + 0.1*cos(x)", ghat0="1 + 0.1*cos(x)", g1="0.05*cos(x)", ghat1="0.05*cos(x)")
        st_ = stageN_controls(spec, 0, n_steps=200)
        assert st_.terminal_error < 1e-10

    def test_controls_live_in_E_N(self):
        spec = make_spec(ghat0="1 + 0.05*cos(x)", ghat1="0.05*cos(x)")
        res = stageN_construction(spec, 2, n_steps=200, verify=False)
        assert res.controls.eta.max_mode == 3
        assert res.controls.projection_residual(np.linspace(0, 1, 11)) == 0.0
        assert res.pre_projection_residual < 1e-8

    def test_error_drops_with_stage(self):
        spec = make_spec(ghat0="1 + 0.05*cos(x)", ghat1="0.05*cos(x)")
        e0 = stageN_controls(spec, 0, n_steps=200).terminal_error
        e2 = stageN_controls(spec, 2, n_steps=200).terminal_error
        assert e2 < e0


class TestReduction:
    def test_fast_path_when_already_in_E_n(self):
        spec = make_spec()
        c = np.zeros((2, 1, 2))
        c[0, 0, 1] = 0.1
        stage = StageControls(1, ConstantCurve(c, 1.0))
        out = reduce_stage(stage, spec, 0, osc_n=4, verify=False)
        assert out.provenance["kind"] == "fast-path"
        assert out.eta.max_mode == 1

    def test_gap_shrinks_with_oscillations(self):
        spec = make_spec()
        c = np.zeros((2, 2, 2))
        c[0, 1, 1] = 0.02
        c[1, 1, 0] = 0.02
        stage = StageControls(1, ConstantCurve(c, 1.0))
        gaps = [reduce_stage(stage, spec, 0, osc_n=p).provenance["gap"] for p in (4, 8)]
        assert gaps[1] < 0.6 * gaps[0]

    def test_reduced_controls_in_E_n(self):
        spec = make_spec()
        c = np.zeros((2, 2, 2))
        c[0, 1, 1] = 0.05
        out = reduce_stage(StageControls(1, ConstantCurve(c, 1.0)), spec, 0, osc_n=4, verify=False)
        assert out.eta.max_mode == 1
        assert out.eta.coeffs(0.3).shape == (2, 1, 2)


class TestOscillationInsensitivity:
    def test_distance_decreases(self):
        spec = make_spec(g0="1 + 0.1*cos(x)", ghat0="1 + 0.1*cos(x)")
        c = np.zeros((2, 2, 2))
        c[0, 1, 1] = 0.05
        c[1, 1, 0] = 0.05
        rows = oscillation_insensitivity(spec, c, 0, [4, 8])
        assert rows[1]["distance"] < rows[0]["distance"]


class TestReport:
    def test_deterministic_json_drops_timing(self):
        rep = SynthesisReport(1e-2, 0, [{"n": 0, "wall_time": 3.0, "gap": np.float64(0.1)}], 0.001, True, 1.5)
        d = json.loads(rep.to_json())
        assert "wall_time" not in d and "wall_time" not in d["stages"][0]
        assert d["stages"][0]["gap"] == 0.1
