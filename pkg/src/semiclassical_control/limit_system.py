"""Pseudospectral solver for the coupled limit control system.

State (u0, u1, rho0, rho1, A) on the circle, driven by perturbations xi, zeta
and forcing eta (each a pair of components):

    rho0_t = -d((u0 + zeta0) rho0)
    u0_t   = eta0 - (1/2) d(u0 + xi0)^2 - d rho0
    A_t    = -(u0 + zeta0) dA - 2 d(u0 + zeta0) A
    rho1_t = dA - d((u0 + zeta0) rho1 + (u1 + zeta1) rho0)
    u1_t   = eta1 - d((u0 + xi0)(u1 + xi1)) - d rho1

With xi = zeta = 0 this is the uncontrolled-perturbation system driven by eta
alone. Space: Fourier collocation with two-thirds dealiasing, state stored
as ``rfft`` coefficients. Time: classical RK4.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .curves import ControlCurve
from .errors import BlowUp, Instability, PositivityLost
from .spectral import (
    PeriodicField,
    PeriodicGrid,
    TimeCurve,
    field_to_csv,
    l2_in_time,
    sobolev_norm_array,
    trig_interpolate,
)

COMPONENTS = ("u0", "u1", "rho0", "rho1", "A")
U0, U1, R0, R1, AA = range(5)


@dataclass(frozen=True, eq=False)
class LimitState:
    u0: PeriodicField
    u1: PeriodicField
    rho0: PeriodicField
    rho1: PeriodicField
    A: PeriodicField

    @property
    def grid(self) -> PeriodicGrid:
        return self.u0.grid

    def as_array(self) -> np.ndarray:
        return np.stack([self.u0.values, self.u1.values, self.rho0.values, self.rho1.values, self.A.values])

    @classmethod
    def from_array(cls, grid: PeriodicGrid, arr: np.ndarray) -> "LimitState":
        return cls(*(PeriodicField(grid, arr[i]) for i in range(5)))

    def check(self, tol: float = 1e-10) -> None:
        if abs(self.u0.mean()) > tol or abs(self.u1.mean()) > tol:
            raise ValueError("velocities must have zero mean")
        if np.min(self.rho0.values) <= 0:
            raise PositivityLost("rho0 must be positive")


@dataclass(frozen=True, eq=False)
class SystemInput:
    """Initial data (g0, g1, v0, v1, A0), perturbations xi, zeta and forcing eta.

    Curves are 2-component ``ControlCurve`` objects; ``None`` means zero.
    """

    g0: PeriodicField
    g1: PeriodicField
    v0: PeriodicField
    v1: PeriodicField
    A0: PeriodicField
    T: float
    xi: ControlCurve | None = None
    zeta: ControlCurve | None = None
    eta: ControlCurve | None = None

    @property
    def grid(self) -> PeriodicGrid:
        return self.g0.grid

    def validate(self, tol: float = 1e-10) -> None:
        if np.min(self.g0.values) <= 0:
            raise PositivityLost("initial density g0 must be positive")
        for name in ("v0", "v1"):
            f = getattr(self, name)
            if abs(f.mean()) > max(tol * (1.0 + f.max_abs()), 1e-14):
                raise ValueError(f"{name} must have zero mean")

    def initial_state(self) -> LimitState:
        return LimitState(self.v0, self.v1, self.g0, self.g1, self.A0)

    def with_controls(self, xi=None, zeta=None, eta=None) -> "SystemInput":
        return replace(self, xi=xi, zeta=zeta, eta=eta)


@dataclass
class SolverConfig:
    cfl: float = 0.5
    dt_max: float | None = None
    steps_per_segment: int = 8
    steps_per_feature: int = 16
    max_stored: int = 4097
    blowup_fraction: float = 0.05
    growth_bound: float = 1e8
    dealias: bool = True
    min_steps: int = 16


@dataclass(eq=False)
class Trajectory:
    """Stored states (n_nodes, 5, N) in the order u0, u1, rho0, rho1, A."""

    grid: PeriodicGrid
    t_nodes: np.ndarray
    states: np.ndarray
    step_times: np.ndarray
    min_rho0: np.ndarray
    cfl_numbers: np.ndarray
    n_steps: int

    @property
    def T(self) -> float:
        return float(self.t_nodes[-1])

    def state(self, i: int) -> LimitState:
        return LimitState.from_array(self.grid, self.states[i])

    @property
    def terminal(self) -> LimitState:
        return self.state(-1)

    def component(self, name: str) -> TimeCurve:
        return TimeCurve(self.t_nodes, self.states[:, COMPONENTS.index(name)], self.grid)

    @property
    def curve(self) -> TimeCurve:
        return TimeCurve(self.t_nodes, self.states, None)

    def log_records(self, ks=(1, 2, 3)) -> list[dict]:
        recs = []
        step_idx = np.searchsorted(self.step_times, self.t_nodes, side="left")
        dts = np.diff(self.step_times)
        for i, t in enumerate(self.t_nodes):
            rec = {"t": float(t), "min_rho0": float(np.min(self.states[i, R0]))}
            for k in ks:
                norms = sobolev_norm_array(self.states[i], self.grid, k)
                rec[f"H{k}"] = {c: float(v) for c, v in zip(COMPONENTS, norms)}
            j = min(int(step_idx[i]), dts.size - 1)
            rec["dt"] = float(dts[j]) if dts.size else 0.0
            recs.append(rec)
        return recs

    def log_jsonl(self, ks=(1, 2, 3)) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.log_records(ks))

    def field_csvs(self, every: int = 1) -> dict[str, str]:
        out = {}
        for i in range(0, len(self.t_nodes), every):
            for c, name in enumerate(COMPONENTS):
                out[f"{name}_{i:05d}.csv"] = f"# t={format(float(self.t_nodes[i]), '.17g')}\n" + field_to_csv(
                    PeriodicField(self.grid, self.states[i, c])
                )
        return out


# ---------------------------------------------------------------------------
# Right-hand side


class _SpectralRHS:
    """RHS of the five-field system acting on rfft coefficients."""

    def __init__(self, grid: PeriodicGrid, dealias: bool = True):
        self.grid = grid
        self.n = grid.n_points
        self.ik = grid.ik_real
        self.mask = grid.dealias_mask if dealias else np.ones_like(grid.k_real)
        self.last_min_rho0 = np.inf
        self.last_speed = 0.0

    def __call__(self, S, xi=None, zeta=None, eta=None):
        n, ik = self.n, self.ik
        extra = []
        if zeta is not None:
            zeta_hat = np.fft.rfft(zeta[0])
            extra.append(ik * zeta_hat)
        batch = np.vstack([S, ik * S[AA], ik * S[U0]] + [e[None] for e in extra])
        phys = np.fft.irfft(batch, n=n, axis=-1)
        u0, u1, r0, r1, A, dA, du0 = phys[:7]
        z0 = u0 if zeta is None else u0 + zeta[0]
        z1 = u1 if zeta is None else u1 + zeta[1]
        dz0 = du0 if zeta is None else du0 + phys[7]
        w0 = u0 if xi is None else u0 + xi[0]
        w1 = u1 if xi is None else u1 + xi[1]
        self.last_min_rho0 = float(r0.min())
        self.last_speed = float(np.max(np.abs(z0)) + np.max(np.abs(w0)) + math.sqrt(max(float(r0.max()), 0.0)))
        prods = np.stack(
            [
                z0 * r0,
                0.5 * w0 * w0,
                z0 * r1 + z1 * r0,
                w0 * w1,
                z0 * dA + 2.0 * dz0 * A,
            ]
        )
        P = np.fft.rfft(prods, axis=-1)
        out = np.empty_like(S)
        out[R0] = -ik * P[0]
        out[U0] = -ik * (P[1] + S[R0])
        out[AA] = -P[4]
        out[R1] = ik * (S[AA] - P[2])
        out[U1] = -ik * (P[3] + S[R1])
        if eta is not None:
            eh = np.fft.rfft(eta, axis=-1)
            out[U0] += eh[0]
            out[U1] += eh[1]
        out *= self.mask
        return out


def rhs_full(state: LimitState, xi_t=None, zeta_t=None, eta_t=None) -> LimitState:
    """Time derivative of the state for control values frozen at one instant.

    ``xi_t``, ``zeta_t`` and ``eta_t`` are arrays of shape (2, N) (or None).
    Products are evaluated pointwise without dealiasing, so this is the exact
    collocation right-hand side.
    """
    grid = state.grid
    rhs = _SpectralRHS(grid, dealias=False)
    S = np.fft.rfft(state.as_array(), axis=-1)
    dS = rhs(S, xi_t, zeta_t, eta_t)
    return LimitState.from_array(grid, np.fft.irfft(dS, n=grid.n_points, axis=-1))


# ---------------------------------------------------------------------------
# Time grid planning and control sampling


class _CurveSampler:
    """Evaluates a curve at RK stage times with a tiny memo.

    Piecewise-constant curves are evaluated at the step midpoint for every
    stage, so all stages of a step inside one segment see that segment's value.
    """

    def __init__(self, curve: ControlCurve | None, grid: PeriodicGrid):
        self.curve = curve
        self.grid = grid
        self.pc = curve is not None and curve.piecewise_constant
        self._memo: dict[float, np.ndarray] = {}

    def __call__(self, t_stage: float, t_mid: float):
        if self.curve is None:
            return None
        t = t_mid if self.pc else t_stage
        v = self._memo.get(t)
        if v is None:
            if len(self._memo) > 4:
                self._memo.clear()
            v = self.curve.fields(t, self.grid)
            self._memo[t] = v
        return v


def plan_time_grid(inp: SystemInput, cfg: SolverConfig) -> np.ndarray:
    """Step times on [0, T] aligned with every control breakpoint.

    Smooth controls that report ``feature_windows`` get the fine step
    feature_time / steps_per_feature only inside those windows; elsewhere
    the coarse (CFL and segment) step applies.
    """
    T = inp.T
    grid = inp.grid
    dt = T / cfg.min_steps
    if cfg.dt_max is not None:
        dt = min(dt, cfg.dt_max)
    speed = np.max(np.abs(inp.v0.values)) + math.sqrt(np.max(inp.g0.values))
    bps = []
    windows = []
    for c in (inp.xi, inp.zeta, inp.eta):
        if c is None:
            continue
        # bound the transport speed using the perturbations at a few times
        vals = [np.max(np.abs(c.fields(float(t), grid)[0])) for t in np.linspace(0, T, 9)]
        if c is not inp.eta:
            speed += max(vals)
        if c.piecewise_constant:
            bps.append(np.asarray(c.breakpoints))
            ft = c.feature_time
            if ft:
                dt = min(dt, ft / cfg.steps_per_segment)
        elif c.feature_time:
            win = c.feature_windows
            if win is None:
                dt = min(dt, c.feature_time / cfg.steps_per_feature)
            elif len(win):
                windows.append((np.asarray(win), c.feature_time / cfg.steps_per_feature))
    dt = min(dt, cfg.cfl * grid.dx / max(speed, 1e-12))
    fine = []
    for win, dt_f in windows:
        if dt_f < dt:
            bps.append(win.ravel())
            fine.append((win, dt_f))
    edges = np.unique(np.concatenate([[0.0, T]] + bps)) if bps else np.array([0.0, T])
    edges = edges[(edges >= 0) & (edges <= T)]
    pieces = []
    for a, b in zip(edges[:-1], edges[1:]):
        h = dt
        mid = 0.5 * (a + b)
        for win, dt_f in fine:
            if np.any((win[:, 0] <= mid) & (mid <= win[:, 1])):
                h = min(h, dt_f)
        k = max(1, int(math.ceil((b - a) / h - 1e-9)))
        pieces.append(a + (b - a) * np.arange(k) / k)
    pieces.append(np.array([T]))
    return np.concatenate(pieces)


def _store_indices(n_steps: int, max_stored: int) -> np.ndarray:
    if n_steps + 1 <= max_stored:
        return np.arange(n_steps + 1)
    stride = int(math.ceil(n_steps / (max_stored - 1)))
    idx = np.arange(0, n_steps + 1, stride)
    if idx[-1] != n_steps:
        idx = np.append(idx, n_steps)
    return idx


def solve_R(inp: SystemInput, cfg: SolverConfig | None = None, time_grid: np.ndarray | None = None,
            store_times: np.ndarray | None = None) -> Trajectory:
    """Integrate the system over [0, T] and return the stored trajectory.

    Raises BlowUp if min rho0 drops below ``blowup_fraction`` times its
    initial minimum, Instability on non-finite or runaway values.
    """
    cfg = cfg or SolverConfig()
    inp.validate()
    grid = inp.grid
    times = plan_time_grid(inp, cfg) if time_grid is None else np.asarray(time_grid, dtype=float)
    n_steps = times.size - 1
    if store_times is not None:
        store = np.unique(np.searchsorted(times, np.asarray(store_times), side="left").clip(0, n_steps))
    else:
        store = _store_indices(n_steps, cfg.max_stored)
    store_set = set(int(i) for i in store)

    rhs = _SpectralRHS(grid, cfg.dealias)
    S = np.fft.rfft(inp.initial_state().as_array(), axis=-1) * rhs.mask
    floor = cfg.blowup_fraction * float(np.min(inp.g0.values))
    bound = cfg.growth_bound * (1.0 + float(np.max(np.abs(S))))
    sx, sz, se = (_CurveSampler(c, grid) for c in (inp.xi, inp.zeta, inp.eta))

    stored = []
    t_stored = []
    min_rho0 = np.empty(n_steps + 1)
    cfl_numbers = np.zeros(n_steps + 1)
    min_rho0[0] = float(np.min(inp.g0.values))

    def controls(ts, tm):
        return sx(ts, tm), sz(ts, tm), se(ts, tm)

    if 0 in store_set:
        stored.append(np.fft.irfft(S, n=grid.n_points, axis=-1))
        t_stored.append(times[0])
    for j in range(n_steps):
        t0, t1 = times[j], times[j + 1]
        h = t1 - t0
        tm = t0 + 0.5 * h
        k1 = rhs(S, *controls(t0, tm))
        min_rho0[j] = rhs.last_min_rho0
        cfl_numbers[j] = rhs.last_speed * h / grid.dx
        if rhs.last_min_rho0 < floor:
            raise BlowUp(f"min rho0 = {rhs.last_min_rho0:.3e} below floor {floor:.3e} at t = {t0:.6g}")
        k2 = rhs(S + 0.5 * h * k1, *controls(tm, tm))
        k3 = rhs(S + 0.5 * h * k2, *controls(tm, tm))
        k4 = rhs(S + h * k3, *controls(t1, tm))
        S = S + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(S)) or np.max(np.abs(S)) > bound:
            raise Instability(f"non-finite or runaway state at t = {t1:.6g}")
        if (j + 1) in store_set:
            stored.append(np.fft.irfft(S, n=grid.n_points, axis=-1))
            t_stored.append(t1)
    final = np.fft.irfft(S, n=grid.n_points, axis=-1)
    min_rho0[n_steps] = float(np.min(final[R0]))
    if min_rho0[n_steps] < floor:
        raise BlowUp(f"min rho0 = {min_rho0[n_steps]:.3e} below floor at t = T")
    return Trajectory(
        grid=grid,
        t_nodes=np.array(t_stored),
        states=np.stack(stored),
        step_times=times,
        min_rho0=min_rho0,
        cfl_numbers=cfl_numbers,
        n_steps=n_steps,
    )


# ---------------------------------------------------------------------------
# A transport by itself, and the characteristics oracle


def solve_A_spectral(velocity: Callable[[float], np.ndarray], A0: PeriodicField, t_nodes: np.ndarray,
                     substeps: int = 1, dealias: bool = True) -> TimeCurve:
    """RK4 for A_t + u A_x + 2 u_x A = 0 with a prescribed velocity u(t) (grid samples).

    Uses the same spectral discretisation as ``solve_R``. Steps are the
    intervals of ``t_nodes`` split into ``substeps`` equal parts.
    """
    grid = A0.grid
    ik = grid.ik_real
    mask = grid.dealias_mask if dealias else np.ones_like(grid.k_real)
    n = grid.n_points

    def f(Ah, t):
        u = velocity(t)
        uh = np.fft.rfft(u)
        A, dA, du = np.fft.irfft(np.stack([Ah, ik * Ah, ik * uh]), n=n, axis=-1)
        return -np.fft.rfft(u * dA + 2.0 * du * A) * mask

    Ah = np.fft.rfft(A0.values) * mask
    out = [np.fft.irfft(Ah, n=n)]
    t_nodes = np.asarray(t_nodes, dtype=float)
    for a, b in zip(t_nodes[:-1], t_nodes[1:]):
        h = (b - a) / substeps
        for s in range(substeps):
            t = a + s * h
            k1 = f(Ah, t)
            k2 = f(Ah + 0.5 * h * k1, t + 0.5 * h)
            k3 = f(Ah + 0.5 * h * k2, t + 0.5 * h)
            k4 = f(Ah + h * k3, t + h)
            Ah = Ah + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out.append(np.fft.irfft(Ah, n=n))
    return TimeCurve(t_nodes, np.stack(out), grid)


def _velocity_function(u_eff, grid: PeriodicGrid) -> Callable[[float], np.ndarray]:
    if callable(u_eff):
        return u_eff
    if isinstance(u_eff, TimeCurve):
        return lambda t: u_eff.at(t)
    if isinstance(u_eff, PeriodicField):
        return lambda t: u_eff.values
    arr = np.asarray(u_eff, dtype=float)
    return lambda t: arr


def solve_A_characteristics(u_eff, A0: PeriodicField, t_nodes: np.ndarray, steps_per_interval: int = 20) -> TimeCurve:
    """A(t, x) by tracing characteristics dX/ds = u(s, X) backwards from (t, x).

    Along a characteristic dA/ds = -2 u_x(s, X) A, so
    A(t, x) = A0(X(0)) exp(-2 int_0^t u_x(s, X(s)) ds).
    Velocities between grid nodes use trigonometric interpolation; the
    backward ODE for (X, log-amplitude) is integrated with RK4.
    ``u_eff`` is a callable t -> grid samples, a TimeCurve, or a frozen field.
    """
    grid = A0.grid
    vel = _velocity_function(u_eff, grid)
    t_nodes = np.asarray(t_nodes, dtype=float)
    out = [np.array(A0.values)]

    def f(s, X):
        u = vel(s)
        du = np.fft.irfft(np.fft.rfft(u) * grid.ik_real, n=grid.n_points)
        uu = trig_interpolate(np.stack([u, du]), grid, np.mod(X, 2 * np.pi))
        return uu[0], uu[1]

    for t_end in t_nodes[1:]:
        X = np.array(grid.x)
        L = np.zeros_like(X)
        n_sub = max(1, int(math.ceil(steps_per_interval * t_end / max(t_nodes[1] - t_nodes[0], 1e-300))))
        h = -t_end / n_sub
        s = t_end
        for _ in range(n_sub):
            a1, b1 = f(s, X)
            a2, b2 = f(s + 0.5 * h, X + 0.5 * h * a1)
            a3, b3 = f(s + 0.5 * h, X + 0.5 * h * a2)
            a4, b4 = f(s + h, X + h * a3)
            X = X + (h / 6.0) * (a1 + 2 * a2 + 2 * a3 + a4)
            L = L - (h / 6.0) * (b1 + 2 * b2 + 2 * b3 + b4)
            s = s + h
        A_foot = trig_interpolate(A0.values, grid, np.mod(X, 2 * np.pi))
        out.append(A_foot * np.exp(-2.0 * L))
    return TimeCurve(t_nodes, np.stack(out), grid)


# ---------------------------------------------------------------------------
# Norms of the solution and data spaces

#: Sobolev index offsets of (u0, u1, rho0, rho1, A) relative to k
STATE_INDEX_OFFSETS = (0, -2, 0, -2, -1)


def product_norm(norms) -> float:
    """Hilbert product-space norm: l2 combination of component norms."""
    return float(math.sqrt(sum(float(v) ** 2 for v in norms)))


def state_norm(diff: np.ndarray, grid: PeriodicGrid, k: int) -> float:
    """Norm in H^k x H^{k-2} x H^k x H^{k-2} x H^{k-1} (order u0, u1, rho0, rho1, A)."""
    return product_norm(sobolev_norm_array(diff[i], grid, max(k + o, 0)) for i, o in enumerate(STATE_INDEX_OFFSETS))


def trajectory_distance(tr1: Trajectory, tr2: Trajectory, k: int, components=None) -> float:
    """sup over stored nodes of the product norm of tr1 - tr2 (shared nodes required)."""
    if tr1.t_nodes.shape != tr2.t_nodes.shape or np.max(np.abs(tr1.t_nodes - tr2.t_nodes)) > 1e-12:
        raise ValueError("trajectories must share their stored time nodes")
    comps = range(5) if components is None else [COMPONENTS.index(c) for c in components]
    best = 0.0
    for i in range(len(tr1.t_nodes)):
        d = tr1.states[i] - tr2.states[i]
        val = product_norm(sobolev_norm_array(d[c], tr1.grid, max(k + STATE_INDEX_OFFSETS[c], 0)) for c in comps)
        best = max(best, val)
    return best


def density_deviation(tr1: Trajectory, tr2: Trajectory, k: int) -> float:
    """sup_t of the H^k x H^{k-2} norm of (rho0, rho1) differences."""
    return trajectory_distance(tr1, tr2, k, components=("rho0", "rho1"))


def terminal_error(state: LimitState | np.ndarray, target: dict, grid: PeriodicGrid, k: int = 3) -> float:
    """Distance of (u0, u1, rho0, rho1) to the target in H^k x H^{k-2} x H^k x H^{k-2}."""
    arr = state.as_array() if isinstance(state, LimitState) else state
    norms = []
    for name, idx, off in (("vhat0", U0, 0), ("vhat1", U1, -2), ("ghat0", R0, 0), ("ghat1", R1, -2)):
        tgt = target[name]
        tv = tgt.values if isinstance(tgt, PeriodicField) else np.asarray(tgt)
        norms.append(sobolev_norm_array(arr[idx] - tv, grid, max(k + off, 0)))
    return product_norm(norms)


def input_distance(in1: SystemInput, in2: SystemInput, k: int, t_nodes: np.ndarray) -> float:
    """Norm of in1 - in2 in the data space with index k.

    Initial data in H^k x H^{k-2} x H^k x H^{k-2} x H^{k-1}; perturbations
    xi, zeta in L^2_T(H^{k+1}) x L^2_T(H^{k-1}); eta in L^2_T(H^k) x L^2_T(H^{k-2}).
    """
    grid = in1.grid
    norms = []
    for name, off in (("v0", 0), ("v1", -2), ("g0", 0), ("g1", -2), ("A0", -1)):
        d = getattr(in1, name).values - getattr(in2, name).values
        norms.append(sobolev_norm_array(d, grid, max(k + off, 0)))
    for name, offs in (("xi", (1, -1)), ("zeta", (1, -1)), ("eta", (0, -2))):
        c1, c2 = getattr(in1, name), getattr(in2, name)
        if c1 is None and c2 is None:
            continue
        per_t = []
        for t in t_nodes:
            a = c1.fields(float(t), grid) if c1 is not None else np.zeros((2, grid.n_points))
            b = c2.fields(float(t), grid) if c2 is not None else np.zeros((2, grid.n_points))
            per_t.append([sobolev_norm_array(a[c] - b[c], grid, max(k + offs[c], 0)) for c in (0, 1)])
        per_t = np.asarray(per_t)
        for c in (0, 1):
            norms.append(l2_in_time(np.asarray(t_nodes), per_t[:, c]))
    return product_norm(norms)


@dataclass
class LipschitzResult:
    ratio: float
    numerator: float
    denominator: float


def lipschitz_probe(input1: SystemInput, input2: SystemInput, k: int = 3, cfg: SolverConfig | None = None) -> LipschitzResult:
    """||R(U1) - R(U2)||_{Y^{k-1}} / ||U1 - U2||_{X^{k-1}} on a shared time grid."""
    cfg = cfg or SolverConfig()
    grid1 = plan_time_grid(input1, cfg)
    grid2 = plan_time_grid(input2, cfg)
    times = grid1 if grid1.size >= grid2.size else grid2
    tr1 = solve_R(input1, cfg, time_grid=times)
    tr2 = solve_R(input2, cfg, time_grid=times)
    num = trajectory_distance(tr1, tr2, k - 1)
    den = input_distance(input1, input2, k - 1, tr1.t_nodes)
    if num == 0.0:
        return LipschitzResult(0.0, 0.0, den)
    return LipschitzResult(num / den if den > 0 else math.inf, num, den)
