"""Constructive control synthesis for the limit system.

Two parts:

1. ``stageN_controls`` builds E_N-valued forcing that steers the system from
   the initial data to the target. The densities and velocities are
   interpolated affinely in time; perturbations (xi0, xi1) are solved from
   the continuity equations; eta follows from the momentum equations; the
   perturbations are switched off near t = 0 and t = T and their time
   derivative is moved into the forcing, which is then projected onto E_N.

2. ``reduce_stage`` removes the top mode of an E_{n+1}-valued forcing. The
   forcing is averaged on time segments, its top part is rewritten with
   ``decompose_pair``, the resulting pairs drive a fast oscillator whose
   averaged effect reproduces the top part, the oscillator is smoothed, and
   finally it is moved into the forcing as eta_bar + d_t mu.

``full_pipeline`` chains both down to E_0 = span{sin x, cos x}.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .curves import (
    ConstantCurve,
    ControlCurve,
    PiecewiseConstantCurve,
    SampledCurve,
    SmoothedCurve,
    fields_to_coeffs,
    pad_coeffs,
    smooth_step,
    smooth_step_derivative,
)
from .errors import InvalidSpec, OscillationInsufficient, PositivityLost, TargetUnreached
from .limit_system import (
    SolverConfig,
    SystemInput,
    Trajectory,
    density_deviation,
    plan_time_grid,
    rhs_full,
    LimitState,
    solve_A_spectral,
    solve_R,
    terminal_error,
    trajectory_distance,
)
from .spectral import (
    PeriodicField,
    PeriodicGrid,
    TimeCurve,
    antiderivative_array,
    derivative_array,
)
from .trig_algebra import OscillatorSchedule, decompose_pair_coeffs, oscillator_pieces


# ---------------------------------------------------------------------------
# Target data


@dataclass(frozen=True, eq=False)
class TargetSpec:
    g0: PeriodicField
    g1: PeriodicField
    v0: PeriodicField
    v1: PeriodicField
    ghat0: PeriodicField
    ghat1: PeriodicField
    vhat0: PeriodicField
    vhat1: PeriodicField
    A0: PeriodicField
    T: float = 1.0
    eps: float = 1e-2
    k: int = 3

    @property
    def grid(self) -> PeriodicGrid:
        return self.g0.grid

    def validate(self, mass_tol: float = 1e-10) -> None:
        dx = self.grid.dx
        for a, b, label in ((self.g0, self.ghat0, "rho0"), (self.g1, self.ghat1, "rho1")):
            ma, mb = float(np.sum(a.values) * dx), float(np.sum(b.values) * dx)
            if abs(ma - mb) > mass_tol * max(1.0, abs(ma)):
                raise InvalidSpec(f"{label} mass differs between initial ({ma:.12g}) and target ({mb:.12g})")
        if np.min(self.g0.values) <= 0 or np.min(self.ghat0.values) <= 0:
            raise InvalidSpec("initial and target rho0 must be positive")
        for name in ("v0", "v1", "vhat0", "vhat1"):
            f = getattr(self, name)
            if abs(f.mean()) > 1e-10 * (1.0 + f.max_abs()):
                raise InvalidSpec(f"{name} must have zero mean")
        if self.T <= 0:
            raise InvalidSpec("horizon T must be positive")

    @property
    def target(self) -> dict:
        return {"ghat0": self.ghat0, "ghat1": self.ghat1, "vhat0": self.vhat0, "vhat1": self.vhat1}

    def system_input(self, eta: ControlCurve | None = None, xi=None, zeta=None) -> SystemInput:
        return SystemInput(self.g0, self.g1, self.v0, self.v1, self.A0, self.T, xi=xi, zeta=zeta, eta=eta)

    def terminal_error(self, state, k: int | None = None) -> float:
        return terminal_error(state, self.target, self.grid, self.k if k is None else k)


# ---------------------------------------------------------------------------
# Affine interpolation and the perturbations


@dataclass(frozen=True, eq=False)
class InterpolatedTrajectory:
    """rho(t) = ((T - t) g + t ghat)/T and u(t) likewise; arrays of shape (2, N)."""

    spec: TargetSpec

    @property
    def T(self):
        return self.spec.T

    def rho(self, t: float) -> np.ndarray:
        s = self.spec
        th = t / s.T
        return np.stack([(1 - th) * s.g0.values + th * s.ghat0.values, (1 - th) * s.g1.values + th * s.ghat1.values])

    def u(self, t: float) -> np.ndarray:
        s = self.spec
        th = t / s.T
        return np.stack([(1 - th) * s.v0.values + th * s.vhat0.values, (1 - th) * s.v1.values + th * s.vhat1.values])

    @property
    def rho_dot(self) -> np.ndarray:
        s = self.spec
        return np.stack([s.ghat0.values - s.g0.values, s.ghat1.values - s.g1.values]) / s.T

    @property
    def u_dot(self) -> np.ndarray:
        s = self.spec
        return np.stack([s.vhat0.values - s.v0.values, s.vhat1.values - s.v1.values]) / s.T

    def as_time_curves(self, t_nodes) -> tuple[TimeCurve, TimeCurve]:
        t_nodes = np.asarray(t_nodes, dtype=float)
        grid = self.spec.grid
        return (
            TimeCurve(t_nodes, np.stack([self.rho(t) for t in t_nodes]), grid),
            TimeCurve(t_nodes, np.stack([self.u(t) for t in t_nodes]), grid),
        )


def interpolate_trajectory(spec: TargetSpec) -> InterpolatedTrajectory:
    spec.validate()
    return InterpolatedTrajectory(spec)


def _solve_divergence(rhs: np.ndarray, rho0: np.ndarray, grid: PeriodicGrid):
    """Zero-mean xi with d_x(rho0 xi) = rhs; returns (xi, G, c)."""
    if np.min(rho0) <= 0:
        raise PositivityLost("rho0 must be positive")
    G = antiderivative_array(rhs, grid)
    c = -np.mean(G / rho0) / np.mean(1.0 / rho0)
    return (G + c) / rho0, G, c


def _divergence_time_derivative(G, c, G_dot, rho0, rho0_dot):
    """d/dt of (G + c)/rho0 where c keeps the mean zero."""
    P, Q = np.mean(G / rho0), np.mean(1.0 / rho0)
    P_dot = np.mean(G_dot / rho0 - G * rho0_dot / rho0**2)
    Q_dot = np.mean(-rho0_dot / rho0**2)
    c_dot = -(P_dot * Q - P * Q_dot) / Q**2
    return (G_dot + c_dot) / rho0 - (G + c) * rho0_dot / rho0**2


def xi0_pointwise(rho0, u0, rho0_t, grid):
    """xi0 with d(rho0 xi0) = -rho0_t - d(rho0 u0), zero mean."""
    rhs = -rho0_t - derivative_array(rho0 * u0, grid)
    return _solve_divergence(rhs, rho0, grid)[0]


def solve_xi0(rho0_curve: TimeCurve, u0_curve: TimeCurve, rho0_t: TimeCurve | None = None) -> TimeCurve:
    """xi0 at every node of the curves.

    The density time derivative defaults to a second-order finite difference
    along the nodes.
    """
    grid = rho0_curve.grid
    rho = rho0_curve.samples
    if rho0_t is None:
        rt = np.gradient(rho, rho0_curve.t_nodes, axis=0) if len(rho0_curve) > 1 else np.zeros_like(rho)
    else:
        rt = rho0_t.samples
    out = [xi0_pointwise(rho[i], u0_curve.samples[i], rt[i], grid) for i in range(len(rho0_curve))]
    return TimeCurve(rho0_curve.t_nodes, np.stack(out), grid)


def xi1_pointwise(rho, u, rho_t, xi0, A, grid):
    """xi1 with d(rho0 xi1) = dA - rho1_t - d((u0 + xi0) rho1 + u1 rho0), zero mean."""
    rhs = derivative_array(A - (u[0] + xi0) * rho[1] - u[1] * rho[0], grid) - rho_t[1]
    return _solve_divergence(rhs, rho[0], grid)[0]


def solve_xi1(curves: tuple[TimeCurve, TimeCurve], xi0: TimeCurve, A_curve: TimeCurve,
              rho_t: TimeCurve | None = None) -> TimeCurve:
    """xi1 at every node; ``curves`` = (rho curve, u curve) with samples of shape (2, N)."""
    rho_c, u_c = curves
    grid = rho_c.grid
    if rho_t is None:
        rt = np.gradient(rho_c.samples, rho_c.t_nodes, axis=0)
    else:
        rt = rho_t.samples
    out = [
        xi1_pointwise(rho_c.samples[i], u_c.samples[i], rt[i], xi0.samples[i], A_curve.samples[i], grid)
        for i in range(len(rho_c))
    ]
    return TimeCurve(rho_c.t_nodes, np.stack(out), grid)


def eta_pointwise(rho, u, u_t, xi0, xi1, grid):
    """(eta0, eta1) from the momentum equations with perturbations xi."""
    w0 = u[0] + xi0
    w1 = u[1] + xi1
    eta0 = u_t[0] + derivative_array(0.5 * w0 * w0 + rho[0], grid)
    eta1 = u_t[1] + derivative_array(w0 * w1 + rho[1], grid)
    return np.stack([eta0, eta1])


def compute_eta(curves: tuple[TimeCurve, TimeCurve], xi0: TimeCurve, xi1: TimeCurve,
                u_t: TimeCurve | None = None) -> TimeCurve:
    rho_c, u_c = curves
    grid = rho_c.grid
    ut = np.gradient(u_c.samples, u_c.t_nodes, axis=0) if u_t is None else u_t.samples
    out = [
        eta_pointwise(rho_c.samples[i], u_c.samples[i], ut[i], xi0.samples[i], xi1.samples[i], grid)
        for i in range(len(rho_c))
    ]
    return TimeCurve(rho_c.t_nodes, np.stack(out), grid)


class SynthesisPath:
    """All quantities of the construction at arbitrary times, with exact time derivatives.

    ``A`` is obtained by transporting A0 with velocity u0 + xi0 on ``t_nodes``
    (RK4, one step per interval); between nodes it is a cubic Hermite
    interpolant.
    """

    def __init__(self, spec: TargetSpec, t_nodes: np.ndarray):
        self.spec = spec
        self.grid = spec.grid
        self.traj = interpolate_trajectory(spec)
        self.t_nodes = np.asarray(t_nodes, dtype=float)
        self._xi0_cache: dict[float, tuple] = {}
        A_curve = solve_A_spectral(lambda t: self.transport_velocity(t), spec.A0, self.t_nodes, dealias=False)
        self.A_samples = A_curve.samples
        self._A_index = {float(t): i for i, t in enumerate(self.t_nodes)}

    # xi0 and its time derivative
    def _xi0_data(self, t):
        hit = self._xi0_cache.get(t)
        if hit is not None:
            return hit
        grid = self.grid
        rho, u = self.traj.rho(t), self.traj.u(t)
        rd, ud = self.traj.rho_dot, self.traj.u_dot
        rhs = -rd[0] - derivative_array(rho[0] * u[0], grid)
        xi0, G, c = _solve_divergence(rhs, rho[0], grid)
        flux_dot = rd[0] * u[0] + rho[0] * ud[0]
        G_dot = -(flux_dot - np.mean(flux_dot))
        xi0_dot = _divergence_time_derivative(G, c, G_dot, rho[0], rd[0])
        if len(self._xi0_cache) > 8:
            self._xi0_cache.clear()
        self._xi0_cache[t] = (xi0, xi0_dot)
        return xi0, xi0_dot

    def xi0(self, t):
        return self._xi0_data(float(t))[0]

    def transport_velocity(self, t):
        return self.traj.u(t)[0] + self.xi0(t)

    def _A_rhs(self, A, t):
        w = self.transport_velocity(t)
        return -(w * derivative_array(A, self.grid) + 2.0 * derivative_array(w, self.grid) * A)

    def A(self, t):
        t = float(t)
        i = self._A_index.get(t)
        if i is not None:
            return self.A_samples[i]
        j = int(np.clip(np.searchsorted(self.t_nodes, t) - 1, 0, self.t_nodes.size - 2))
        t0, t1 = self.t_nodes[j], self.t_nodes[j + 1]
        h = t1 - t0
        s = (t - t0) / h
        a0, a1 = self.A_samples[j], self.A_samples[j + 1]
        d0, d1 = self._A_rhs(a0, t0), self._A_rhs(a1, t1)
        h00, h10 = 2 * s**3 - 3 * s**2 + 1, s**3 - 2 * s**2 + s
        h01, h11 = -2 * s**3 + 3 * s**2, s**3 - s**2
        return h00 * a0 + h10 * h * d0 + h01 * a1 + h11 * h * d1

    def xi(self, t):
        """(xi0, xi1, d_t xi0, d_t xi1) at time t."""
        t = float(t)
        grid = self.grid
        rho, u = self.traj.rho(t), self.traj.u(t)
        rd, ud = self.traj.rho_dot, self.traj.u_dot
        xi0, xi0_dot = self._xi0_data(t)
        A = self.A(t)
        A_dot = self._A_rhs(A, t)
        flux = (u[0] + xi0) * rho[1] + u[1] * rho[0]
        rhs = derivative_array(A - flux, grid) - rd[1]
        xi1, G, c = _solve_divergence(rhs, rho[0], grid)
        flux_dot = (ud[0] + xi0_dot) * rho[1] + (u[0] + xi0) * rd[1] + ud[1] * rho[0] + u[1] * rd[0]
        # d/dt antiderivative(dA - rho1_t - d flux) = (A_dot - flux_dot) minus its mean
        g_dot = A_dot - flux_dot
        G_dot = g_dot - np.mean(g_dot)
        xi1_dot = _divergence_time_derivative(G, c, G_dot, rho[0], rd[0])
        return xi0, xi1, xi0_dot, xi1_dot

    def eta(self, t, xi0=None, xi1=None):
        t = float(t)
        if xi0 is None:
            xi0, xi1, _, _ = self.xi(t)
        return eta_pointwise(self.traj.rho(t), self.traj.u(t), self.traj.u_dot, xi0, xi1, self.grid)

    def closed_loop_residual(self, t) -> float:
        """Max residual of the closed system (xi = zeta = perturbations) along the interpolated path."""
        t = float(t)
        xi0, xi1, _, _ = self.xi(t)
        rho, u = self.traj.rho(t), self.traj.u(t)
        A = self.A(t)
        state = LimitState.from_array(self.grid, np.stack([u[0], u[1], rho[0], rho[1], A]))
        xi = np.stack([xi0, xi1])
        d = rhs_full(state, xi, xi, self.eta(t, xi0, xi1)).as_array()
        res = [
            d[0] - self.traj.u_dot[0],
            d[1] - self.traj.u_dot[1],
            d[2] - self.traj.rho_dot[0],
            d[3] - self.traj.rho_dot[1],
            d[4] - self._A_rhs(A, t),
        ]
        return float(max(np.max(np.abs(r)) for r in res))


def cutoff_profile(t, T: float, delta: float):
    """chi(t) = r(t/delta) r((T - t)/delta) with r a C-infinity step from 0 to 1 on [0, 1]."""
    return smooth_step(t / delta) * smooth_step((T - t) / delta)


def cutoff_profile_derivative(t, T: float, delta: float):
    return (
        smooth_step_derivative(t / delta) / delta * smooth_step((T - t) / delta)
        - smooth_step(t / delta) * smooth_step_derivative((T - t) / delta) / delta
    )


# ---------------------------------------------------------------------------
# Stage controls


@dataclass(eq=False)
class StageControls:
    n: int
    eta: ControlCurve
    provenance: dict = field(default_factory=dict)
    trajectory: Trajectory | None = None
    terminal_error: float | None = None

    def projection_residual(self, t_nodes) -> float:
        """Largest coefficient outside E_n over the given times."""
        worst = 0.0
        for t in t_nodes:
            c = self.eta.coeffs(float(t))
            if c.shape[1] > self.n + 1:
                worst = max(worst, float(np.max(np.abs(c[:, self.n + 1 :]))))
        return worst

    def coefficient_table(self, t_nodes) -> tuple[list[str], np.ndarray]:
        M = self.n + 1
        header = ["t"]
        for comp in (0, 1):
            for j in range(1, M + 1):
                header += [f"eta{comp}_sin{j}", f"eta{comp}_cos{j}"]
        rows = []
        for t in t_nodes:
            c = pad_coeffs(self.eta.coeffs(float(t)), max(M, self.eta.max_mode))[:, :M]
            rows.append(np.concatenate([[t], c.reshape(-1)]))
        return header, np.array(rows)

    def to_csv(self, t_nodes) -> str:
        header, rows = self.coefficient_table(t_nodes)
        lines = [",".join(header)]
        for r in rows:
            lines.append(",".join(format(float(v), ".17g") for v in r))
        return "\n".join(lines) + "\n"


@dataclass
class StageNResult:
    controls: StageControls
    path: SynthesisPath
    pre_projection_residual: float
    t_nodes: np.ndarray


def stageN_controls(spec: TargetSpec, N: int, delta: float | None = None, n_steps: int = 400,
                    cfg: SolverConfig | None = None, verify: bool = True, sign: int = 1,
                    residual_nodes: int = 21) -> StageControls:
    """E_N-valued forcing P_{E_N}(eta + sign * d_t(chi xi)) and its verification run.

    ``sign`` exists only to compare the two conventions for moving the
    cut-off perturbation into the forcing; +1 is the consistent one.
    """
    return stageN_construction(spec, N, delta, n_steps, cfg, verify, sign, residual_nodes).controls


def stageN_construction(spec: TargetSpec, N: int, delta: float | None = None, n_steps: int = 400,
                        cfg: SolverConfig | None = None, verify: bool = True, sign: int = 1,
                        residual_nodes: int = 21) -> StageNResult:
    spec.validate()
    T = spec.T
    delta = T / 20.0 if delta is None else float(delta)
    grid = spec.grid
    t_steps = np.linspace(0.0, T, n_steps + 1)
    t_samples = np.linspace(0.0, T, 2 * n_steps + 1)
    path = SynthesisPath(spec, t_samples)
    coeffs = []
    for t in t_samples:
        xi0, xi1, xi0_dot, xi1_dot = path.xi(t)
        eta = path.eta(t, xi0, xi1)
        chi = float(cutoff_profile(t, T, delta))
        chi_dot = float(cutoff_profile_derivative(t, T, delta))
        forcing = eta + sign * (chi_dot * np.stack([xi0, xi1]) + chi * np.stack([xi0_dot, xi1_dot]))
        coeffs.append(fields_to_coeffs(forcing, grid, N + 1))
    eta_curve = SampledCurve(t_samples, np.stack(coeffs), feature_time=delta / 4)
    residual = max(path.closed_loop_residual(t) for t in np.linspace(0.0, T, residual_nodes))
    controls = StageControls(
        n=N,
        eta=eta_curve,
        provenance={"kind": "construction", "delta": delta, "n_steps": n_steps, "sign": sign,
                    "pre_projection_residual": residual},
    )
    if verify:
        tr = solve_R(spec.system_input(eta=eta_curve), cfg, time_grid=t_steps)
        controls.trajectory = tr
        controls.terminal_error = spec.terminal_error(tr.terminal)
    return StageNResult(controls, path, residual, t_steps)


def pre_projection_run(result: StageNResult, spec: TargetSpec, cfg: SolverConfig | None = None,
                       cutoff: bool = False, delta: float | None = None) -> Trajectory:
    """Run the closed system with the unprojected perturbations as both xi and zeta."""
    from .curves import GridFieldCurve

    path = result.path
    T = spec.T
    delta = T / 20.0 if delta is None else delta

    def xi_fn(t):
        x0, x1, _, _ = path.xi(t)
        fac = float(cutoff_profile(t, T, delta)) if cutoff else 1.0
        return fac * np.stack([x0, x1])

    xi_curve = GridFieldCurve(xi_fn, T, spec.grid)
    eta_curve = GridFieldCurve(lambda t: path.eta(t), T, spec.grid)
    return solve_R(spec.system_input(eta=eta_curve, xi=xi_curve, zeta=xi_curve), cfg, time_grid=result.t_nodes)


# ---------------------------------------------------------------------------
# One reduction stage


def _coeff_hk_norm(c: np.ndarray, k: int) -> np.ndarray:
    """H^k norm of sum_j c[j,0] sin jx + c[j,1] cos jx, batched over leading axes."""
    j = np.arange(1, c.shape[-2] + 1, dtype=float)
    w = sum(j ** (2 * i) for i in range(k + 1))
    return np.sqrt(np.pi * np.sum(w[:, None] * c**2, axis=(-2, -1)))


def _segment_averages(curve: ControlCurve, edges: np.ndarray, samples_per_segment: int = 16):
    """Segment means (Simpson) and sampled values of a curve on each segment."""
    means, samples = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        ts = np.linspace(a, b, 2 * samples_per_segment + 1)
        vals = np.stack([curve.coeffs(float(t)) for t in ts])
        w = np.ones(ts.size)
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        w *= (b - a) / (3.0 * (ts.size - 1)) / (b - a)
        means.append(np.tensordot(w, vals, axes=(0, 0)))
        samples.append(vals)
    return np.stack(means), samples


def choose_segments(curve: ControlCurve, T: float, tol: float, k: int, n_top: int,
                    max_segments: int = 64, samples_per_segment: int = 16) -> tuple[np.ndarray, np.ndarray, float]:
    """Uniform segmentation: double the count until every segment varies by <= 10% of tol.

    Returns (edges, segment means, achieved max variation). Variation is the
    largest H^k distance between a sample and its segment mean.
    """
    S = 1
    while True:
        edges = np.linspace(0.0, T, S + 1)
        means, samples = _segment_averages(curve, edges, samples_per_segment)
        var = 0.0
        for mval, vals in zip(means, samples):
            var = max(var, float(np.max(_coeff_hk_norm(vals - mval, k))))
        if var <= 0.1 * tol or S >= max_segments:
            return edges, means, var
        S *= 2


def _pad_stack(c: np.ndarray, M: int) -> np.ndarray:
    return pad_coeffs(c, M) if c.shape[-2] <= M else c[..., :M, :]


def reduce_stage(stage_in: StageControls, spec: TargetSpec, n: int, osc_n: int, smooth_m: float = 16.0,
                 tol: float | None = None, cfg: SolverConfig | None = None, verify: bool = True,
                 reference: ControlCurve | None = None, max_segments: int = 64,
                 top_tol: float = 1e-14, fast_samples: int = 257) -> StageControls:
    """Replace E_{n+1}-valued forcing by E_n-valued forcing with (approximately) the same terminal state.

    ``reference`` is the forcing whose trajectory the result is compared
    against (defaults to ``stage_in.eta``).
    """
    T = spec.T
    tol = spec.eps if tol is None else tol
    eta_in = stage_in.eta
    q = n + 2
    probe_t = np.linspace(0.0, T, fast_samples)
    if eta_in.max_mode is not None and eta_in.max_mode >= q:
        top = max(float(np.max(np.abs(eta_in.coeffs(float(t))[:, q - 1 :]))) for t in probe_t)
    else:
        top = 0.0
    if top <= top_tol:
        M = n + 1
        base = eta_in

        class _Projected(ControlCurve):
            def __init__(self):
                self.T, self.n_components, self.max_mode = base.T, base.n_components, M
                self.feature_time = base.feature_time

            @property
            def breakpoints(self):
                return base.breakpoints

            @property
            def piecewise_constant(self):
                return base.piecewise_constant

            def coeffs(self, t):
                return _pad_stack(base.coeffs(t), M)

        out = StageControls(n=n, eta=_Projected(), provenance={"kind": "fast-path", "top_content": top, "gap": 0.0})
        out.trajectory = stage_in.trajectory
        out.terminal_error = stage_in.terminal_error
        out.provenance["gap"] = 0.0
        out.provenance["density_deviation"] = 0.0
        return out

    t_start = time.perf_counter()
    edges, means, variation = choose_segments(eta_in, T, tol, spec.k, q, max_segments)
    means = np.stack([_pad_stack(mv, q) for mv in means])
    M = n + 1
    seg_eta = []
    all_edges = [np.array([0.0])]
    all_values = []
    pairs_used = []
    for s in range(len(means)):
        dec = decompose_pair_coeffs(means[s], n)
        seg_eta.append(dec.eta_coeffs())
        a, b = edges[s], edges[s + 1]
        if dec.m == 0:
            all_edges.append(np.array([b]))
            all_values.append(np.zeros((1, 2, M, 2)))
            pairs_used.append(0)
            continue
        sched = OscillatorSchedule.from_factors(dec.pair_coeffs(), osc_n, b - a)
        e, v = oscillator_pieces(sched, a, b)
        all_edges.append(e[1:])
        all_values.append(v)
        pairs_used.append(dec.m)
    mu = PiecewiseConstantCurve(np.concatenate(all_edges), np.concatenate(all_values))
    L = mu.feature_time
    h = L / (8.0 * smooth_m)
    w = L / (16.0 * smooth_m)
    mu_smooth = SmoothedCurve(mu, h, w)
    seg_eta = np.stack(seg_eta)
    if len(seg_eta) == 1:
        eta_bar = ConstantCurve(seg_eta[0], T)
    else:
        seg_curve = PiecewiseConstantCurve(edges, seg_eta)
        eta_bar = SmoothedCurve(seg_curve, (edges[1] - edges[0]) / (8.0 * smooth_m), 0.0)
    eta_out = eta_bar + mu_smooth.time_derivative()
    prov = {
        "kind": "reduction",
        "osc_n": osc_n,
        "smooth_m": smooth_m,
        "segments": len(means),
        "segment_variation": variation,
        "pairs_per_segment": pairs_used,
        "mollifier_width": h,
        "ramp_width": w,
        "top_content": top,
    }
    out = StageControls(n=n, eta=eta_out, provenance=prov)
    if verify:
        ref = stage_in.eta if reference is None else reference
        cfg = cfg or SolverConfig()
        in_new = spec.system_input(eta=eta_out)
        in_ref = spec.system_input(eta=ref)
        g_new, g_ref = plan_time_grid(in_new, cfg), plan_time_grid(in_ref, cfg)
        times = g_new if g_new.size >= g_ref.size else g_ref
        tr_new = solve_R(in_new, cfg, time_grid=times)
        tr_ref = solve_R(in_ref, cfg, time_grid=times)
        gap = terminal_error(tr_new.terminal, _state_target(tr_ref.terminal), spec.grid, spec.k)
        out.trajectory = tr_new
        out.terminal_error = spec.terminal_error(tr_new.terminal)
        prov["gap"] = gap
        prov["density_deviation"] = density_deviation(tr_new, tr_ref, spec.k)
        prov["n_steps"] = tr_new.n_steps
        prov["min_rho0"] = float(np.min(tr_new.min_rho0))
        prov["reference_terminal_error"] = spec.terminal_error(tr_ref.terminal)
        out._reference_trajectory = tr_ref
    prov["wall_time"] = time.perf_counter() - t_start
    return out


def _state_target(state: LimitState) -> dict:
    return {"ghat0": state.rho0, "ghat1": state.rho1, "vhat0": state.u0, "vhat1": state.u1}


def reduce_with_schedule(stage_in: StageControls, spec: TargetSpec, n: int, tol: float,
                         osc_schedule: Sequence[int] = (4, 8, 16, 32), smooth_m: float = 16.0,
                         cfg: SolverConfig | None = None, reference: ControlCurve | None = None,
                         max_segments: int = 64) -> tuple[StageControls, list[dict]]:
    """Double the oscillation count until the gap meets ``tol`` or stops improving by 10%.

    Raises OscillationInsufficient with the best result if ``tol`` is never met.
    """
    trace = []
    best = None
    prev_gap = None
    for osc_n in osc_schedule:
        out = reduce_stage(stage_in, spec, n, osc_n, smooth_m, tol, cfg, True, reference, max_segments)
        gap = out.provenance["gap"]
        trace.append({"osc_n": osc_n, "gap": gap, "density_deviation": out.provenance["density_deviation"]})
        if best is None or gap < best.provenance["gap"]:
            best = out
        if out.provenance.get("kind") == "fast-path":
            return out, trace
        if gap <= tol:
            return out, trace
        if prev_gap is not None and gap > 0.9 * prev_gap:
            break
        prev_gap = gap
    raise OscillationInsufficient(
        f"stage {n}: best gap {best.provenance['gap']:.3e} above tolerance {tol:.3e}",
        best_gap=best.provenance["gap"],
        best_osc_n=best.provenance.get("osc_n"),
    )


# ---------------------------------------------------------------------------
# Whole pipeline


@dataclass
class SynthesisReport:
    eps: float
    N: int
    stages: list[dict]
    final_error: float
    success: bool
    wall_time: float
    final_controls: StageControls | None = None

    def to_dict(self) -> dict:
        return {
            "eps": self.eps,
            "N": self.N,
            "stages": self.stages,
            "final_error": self.final_error,
            "success": self.success,
            "wall_time": self.wall_time,
        }

    def to_json(self, deterministic: bool = True) -> str:
        d = self.to_dict()
        if deterministic:
            d = _strip_timing(d)
        return json.dumps(_jsonable(d), indent=2, sort_keys=True) + "\n"


def _strip_timing(obj):
    if isinstance(obj, dict):
        return {k: _strip_timing(v) for k, v in obj.items() if k != "wall_time"}
    if isinstance(obj, list):
        return [_strip_timing(v) for v in obj]
    return obj


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def full_pipeline(spec: TargetSpec, N: int, osc_schedule: Sequence[int] = (4, 8, 16, 32),
                  smooth_schedule: Sequence[float] = (16.0,), delta: float | None = None,
                  cfg: SolverConfig | None = None, n_steps: int = 400, max_segments: int = 64,
                  raise_on_failure: bool = True) -> tuple[StageControls, SynthesisReport]:
    """Stage-N construction followed by reductions down to E_0.

    Stage n (n < N) must reproduce the stage-(n+1) terminal state within
    eps * 2^-(N-n+1); the construction itself is budgeted eps/2.
    """
    t_start = time.perf_counter()
    spec.validate()
    eps = spec.eps
    current = stageN_controls(spec, N, delta, n_steps=n_steps, cfg=cfg)
    stages = [
        {
            "n": N,
            "kind": "construction",
            "terminal_error": current.terminal_error,
            "tolerance": eps / 2.0,
            "pre_projection_residual": current.provenance["pre_projection_residual"],
            "n_steps": current.trajectory.n_steps,
            "min_rho0": float(np.min(current.trajectory.min_rho0)),
        }
    ]
    top = current
    for n in range(N - 1, -1, -1):
        tol = eps * 2.0 ** (-(N - n + 1))
        best = None
        record = {"n": n, "tolerance": tol, "attempts": []}
        for sm in smooth_schedule:
            try:
                out, trace = reduce_with_schedule(current, spec, n, tol, osc_schedule, sm, cfg, None, max_segments)
                record["attempts"].append({"smooth_m": sm, "trace": trace, "accepted": True})
                best = out
                break
            except OscillationInsufficient as exc:
                record["attempts"].append({"smooth_m": sm, "best_gap": exc.best_gap, "best_osc_n": exc.best_osc_n,
                                           "accepted": False})
                cand = reduce_stage(current, spec, n, exc.best_osc_n, sm, tol, cfg, True, None, max_segments)
                if best is None or cand.provenance["gap"] < best.provenance["gap"]:
                    best = cand
        prov = dict(best.provenance)
        prov.pop("pairs_per_segment", None)
        record.update(prov)
        record["terminal_error"] = best.terminal_error
        if best.trajectory is not None and top.trajectory is not None and prov.get("kind") == "reduction":
            times = best.trajectory.step_times
            tr_top = solve_R(spec.system_input(eta=top.eta), cfg, time_grid=times)
            record["density_deviation_to_top"] = density_deviation(best.trajectory, tr_top, spec.k)
        stages.append(record)
        current = best
    final_error = current.terminal_error
    success = bool(final_error is not None and final_error <= eps)
    report = SynthesisReport(eps=eps, N=N, stages=stages, final_error=final_error, success=success,
                             wall_time=time.perf_counter() - t_start, final_controls=current)
    if not success and raise_on_failure:
        raise TargetUnreached(f"final terminal error {final_error:.3e} exceeds eps {eps:.3e}",
                              best_error=final_error, report=report)
    return current, report


# ---------------------------------------------------------------------------
# Oscillation insensitivity of the transport perturbation


def oscillation_insensitivity(spec: TargetSpec, control: np.ndarray, n: int, osc_values: Sequence[int],
                              cfg: SolverConfig | None = None, k: int | None = None) -> list[dict]:
    """Distance between R(U^p) (zeta = 0) and R(V^p) (zeta = mu_p) for each oscillation count p.

    ``control`` is a constant E_{n+1} forcing (2, M, 2); its paired
    decomposition gives the oscillator mu_p (used as xi in both inputs)
    and the averaged forcing eta_bar. Distances are sup over the shared
    stored nodes in the H^k x H^{k-2} x H^k x H^{k-2} x H^{k-1} product norm.
    """
    cfg = cfg or SolverConfig()
    k = spec.k if k is None else k
    T = spec.T
    dec = decompose_pair_coeffs(np.asarray(control, dtype=float), n)
    eta_bar = ConstantCurve(dec.eta_coeffs(), T)
    rows = []
    for p in osc_values:
        sched = OscillatorSchedule.from_factors(dec.pair_coeffs(), int(p), T)
        edges, values = oscillator_pieces(sched)
        mu = PiecewiseConstantCurve(edges, values)
        in_V = spec.system_input(eta=eta_bar, xi=mu, zeta=mu)
        in_U = spec.system_input(eta=eta_bar, xi=mu)
        times = plan_time_grid(in_V, cfg)
        tr_U = solve_R(in_U, cfg, time_grid=times)
        tr_V = solve_R(in_V, cfg, time_grid=times)
        rows.append({"osc_n": int(p), "distance": trajectory_distance(tr_U, tr_V, k), "n_steps": tr_U.n_steps})
    return rows
