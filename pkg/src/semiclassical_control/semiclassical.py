"""Cubic NLS in the semiclassical regime, its phase-lifted form and the WKB cascade.

    i hbar psi_t = -(hbar^2/2) psi_xx + (F + |psi|^2 - 1) psi

is solved by Strang splitting. Writing psi = a exp(iS/hbar) with complex a
and u = S_x gives the phase-lifted system

    a_t + u a_x + (1/2) a u_x = i (hbar/2) a_xx
    u_t + d(u^2/2 + |a|^2) = eta,        eta = -F_x,

whose hbar -> 0 limit and first-order correction are the WKB systems
handled by ``solve_order0`` and ``solve_order1``. Densities are normalised
so that rho is close to 1 (the potential's -1 shifts only the phase).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .curves import ControlCurve
from .errors import BlowUp, Instability, VacuumRegion
from .spectral import (
    PeriodicField,
    PeriodicGrid,
    TimeCurve,
    antiderivative_array,
    derivative_array,
    l2_norm_array,
    sobolev_norm_array,
)
from .trig_algebra import potential_from_field

__all__ = [
    "WaveFunction",
    "WaveTrajectory",
    "GrenierState",
    "GrenierTrajectory",
    "WKBData",
    "Observables",
    "potential_from_eta",
    "time_nodes",
    "solve_nls",
    "solve_grenier",
    "solve_order0",
    "solve_order1",
    "grenier_from_wkb_initial",
    "wave_from_wkb_initial",
    "extract_observables",
    "wkb_error_metrics",
    "grenier_remainders",
    "rho1_equation_residual",
    "complex_sobolev_norm",
    "default_nls_dt",
    "semiclassical_initial_data",
    "hbar_sweep",
]


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True, eq=False)
class WaveFunction:
    psi: PeriodicField
    hbar: float

    def __post_init__(self):
        if not self.hbar > 0:
            raise ValueError("hbar must be positive")

    @property
    def grid(self) -> PeriodicGrid:
        return self.psi.grid

    def mass(self) -> float:
        return float(np.sum(np.abs(self.psi.values) ** 2) * self.grid.dx)


@dataclass(frozen=True, eq=False)
class GrenierState:
    """Amplitude a = a_r + i a_i, velocity u (zero mean) and the spatial mean of S."""

    a_r: PeriodicField
    a_i: PeriodicField
    u: PeriodicField
    S_mean: float

    @property
    def grid(self) -> PeriodicGrid:
        return self.u.grid

    def check(self, tol: float = 1e-10) -> None:
        if abs(self.u.mean()) > tol:
            raise ValueError("u must have zero mean")

    @property
    def a(self) -> np.ndarray:
        return self.a_r.values + 1j * self.a_i.values

    def phase(self) -> np.ndarray:
        """S = zero-mean antiderivative of u plus the tracked mean."""
        return antiderivative_array(self.u.values, self.grid) + self.S_mean

    def to_wave(self, hbar: float) -> WaveFunction:
        psi = self.a * np.exp(1j * self.phase() / hbar)
        return WaveFunction(PeriodicField(self.grid, psi), hbar)


@dataclass(eq=False)
class WaveTrajectory:
    hbar: float
    curve: TimeCurve
    mass: np.ndarray
    n_steps: int

    @property
    def t_nodes(self) -> np.ndarray:
        return self.curve.t_nodes

    def wave(self, i: int) -> WaveFunction:
        return WaveFunction(self.curve.field(i), self.hbar)

    @property
    def terminal(self) -> WaveFunction:
        return self.wave(len(self.curve) - 1)


@dataclass(eq=False)
class GrenierTrajectory:
    """Stored (a_r, a_i, u) samples (n_nodes, 3, N) and S means (n_nodes,)."""

    grid: PeriodicGrid
    hbar: float
    t_nodes: np.ndarray
    states: np.ndarray
    S_mean: np.ndarray
    n_steps: int

    def state(self, i: int) -> GrenierState:
        ar, ai, u = (PeriodicField(self.grid, self.states[i, c]) for c in range(3))
        return GrenierState(ar, ai, u, float(self.S_mean[i]))

    @property
    def terminal(self) -> GrenierState:
        return self.state(len(self.t_nodes) - 1)

    def amplitude(self) -> TimeCurve:
        return TimeCurve(self.t_nodes, self.states[:, 0] + 1j * self.states[:, 1], self.grid)

    def wave(self, i: int) -> WaveFunction:
        return self.state(i).to_wave(self.hbar)


@dataclass(eq=False)
class WKBData:
    """Order-0 and (optionally) order-1 WKB profiles on shared time nodes."""

    a0: TimeCurve
    S0: TimeCurve
    u0: TimeCurve
    a1: TimeCurve | None = None
    S1: TimeCurve | None = None
    u1: TimeCurve | None = None
    n_steps: int = 0

    @property
    def grid(self) -> PeriodicGrid:
        return self.a0.grid

    @property
    def t_nodes(self) -> np.ndarray:
        return self.a0.t_nodes

    @property
    def has_order1(self) -> bool:
        return self.a1 is not None

    def rho0(self) -> TimeCurve:
        return self.a0.map(lambda a: np.abs(a) ** 2)

    def rho1(self) -> TimeCurve:
        if self.a1 is None:
            raise ValueError("order-1 data not available")
        s = 2.0 * np.real(np.conj(self.a0.samples) * self.a1.samples)
        return TimeCurve(self.t_nodes, s, self.grid)

    def A(self) -> TimeCurve:
        """A = (i/2)(conj(a0) a0_x - a0 conj(a0)_x) = a0i d a0r - a0r d a0i."""
        g = self.grid
        s = [np.imag(a) * derivative_array(np.real(a), g) - np.real(a) * derivative_array(np.imag(a), g)
             for a in self.a0.samples]
        return TimeCurve(self.t_nodes, np.stack(s), g)

    def phase_residual(self) -> float:
        """max over nodes of |d_x S_j - u_j|."""
        g = self.grid
        worst = 0.0
        pairs = [(self.S0, self.u0)] + ([(self.S1, self.u1)] if self.S1 is not None else [])
        for S, u in pairs:
            for s, v in zip(S.samples, u.samples):
                worst = max(worst, float(np.max(np.abs(derivative_array(s, g) - v))))
        return worst


@dataclass(frozen=True, eq=False)
class Observables:
    rho: PeriodicField
    momentum: PeriodicField
    u: PeriodicField | None
    vacuum: bool


# ---------------------------------------------------------------------------
# Helpers


def potential_from_eta(eta: ControlCurve | None, hbar: float, grid: PeriodicGrid) -> Callable[[float], np.ndarray] | None:
    """F(t) = F0 + hbar F1 with -d_x F_j = eta_j and zero mean."""
    if eta is None:
        return None

    def F(t):
        e = eta.fields(float(t), grid)
        return potential_from_field(e[0] + hbar * e[1], grid)

    return F


def _eta_function(eta, grid: PeriodicGrid, weights=(1.0, 0.0)):
    """Combined forcing w0 eta0 + w1 eta1 as a callable (or None)."""
    if eta is None:
        return None
    if callable(eta) and not isinstance(eta, ControlCurve):
        return eta
    w0, w1 = weights

    def f(t):
        e = eta.fields(float(t), grid)
        return w0 * e[0] + w1 * e[1] if w1 else w0 * e[0]

    return f


def time_nodes(T: float, n_steps: int, store_every: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Uniform step times and the indices of the stored ones (always including T)."""
    times = np.linspace(0.0, T, n_steps + 1)
    idx = np.arange(0, n_steps + 1, max(1, store_every))
    if idx[-1] != n_steps:
        idx = np.append(idx, n_steps)
    return times, idx


def _n_steps(T: float, dt: float) -> int:
    return max(1, int(math.ceil(T / dt - 1e-9)))


def complex_sobolev_norm(values: np.ndarray, grid: PeriodicGrid, k: int) -> float:
    values = np.asarray(values)
    return float(math.hypot(sobolev_norm_array(values.real, grid, k), sobolev_norm_array(values.imag, grid, k)))


# ---------------------------------------------------------------------------
# Split-step NLS


def default_nls_dt(psi0: WaveFunction, potential, T: float) -> float:
    """Phase increment of the potential step kept below 1/4 rad (and dt <= hbar/4)."""
    vmax = float(np.max(np.abs(np.abs(psi0.psi.values) ** 2 - 1.0)))
    if potential is not None:
        vmax += max(float(np.max(np.abs(potential(t)))) for t in np.linspace(0.0, T, 9))
    return psi0.hbar / (4.0 * max(1.0, vmax))


def solve_nls(psi0: WaveFunction, potential: Callable[[float], np.ndarray] | None, T: float,
              dt: float | None = None, store_every: int = 1, mass_tol: float = 1e-6) -> WaveTrajectory:
    """Strang splitting: half potential phase, exact kinetic step, half potential phase.

    The potential F is sampled at the step midpoint. Both substeps are unitary,
    so the discrete mass is conserved to round-off. Raises Instability when the
    mass drifts by more than ``mass_tol`` (relative).
    """
    grid = psi0.grid
    hbar = psi0.hbar
    dt = default_nls_dt(psi0, potential, T) if dt is None else float(dt)
    n_steps = _n_steps(T, dt)
    times, store = time_nodes(T, n_steps, store_every)
    h = T / n_steps
    kin = np.exp(-0.5j * hbar * grid.k_complex**2 * h)
    psi = np.array(psi0.psi.values, dtype=complex)
    m0 = float(np.sum(np.abs(psi) ** 2) * grid.dx)
    out, masses = [psi.copy()], [m0]
    store_set = set(int(i) for i in store[1:])
    for j in range(n_steps):
        tm = times[j] + 0.5 * h
        F = potential(tm) if potential is not None else 0.0
        psi = psi * np.exp(-0.5j * h * (F + np.abs(psi) ** 2 - 1.0) / hbar)
        psi = np.fft.ifft(kin * np.fft.fft(psi))
        psi = psi * np.exp(-0.5j * h * (F + np.abs(psi) ** 2 - 1.0) / hbar)
        if (j + 1) in store_set:
            m = float(np.sum(np.abs(psi) ** 2) * grid.dx)
            if not np.isfinite(m) or abs(m - m0) > mass_tol * m0:
                raise Instability(f"mass drift {abs(m - m0):.3e} at t = {times[j + 1]:.6g}")
            out.append(psi.copy())
            masses.append(m)
    return WaveTrajectory(hbar, TimeCurve(times[store], np.stack(out), grid), np.array(masses), n_steps)


# ---------------------------------------------------------------------------
# Phase-lifted system and WKB cascade


class _HyperbolicRHS:
    """Spectral right-hand sides of the order-0 block and of the order-1 block.

    Each block (a_r, a_i, u) is stored as rfft coefficients; products are
    formed on the grid and dealiased with the two-thirds rule.
    """

    def __init__(self, grid: PeriodicGrid, dealias: bool = True):
        self.grid = grid
        self.n = grid.n_points
        self.ik = grid.ik_real
        self.mask = grid.dealias_mask if dealias else np.ones_like(grid.k_real)

    def _phys(self, W):
        ik = self.ik
        return np.fft.irfft(np.vstack([W, ik * W]), n=self.n, axis=-1)

    def order0(self, W, eta=None):
        """(a_r, a_i, u) and the time derivative of the S mean."""
        ar, ai, u, dar, dai, du = self._phys(W)
        flux = 0.5 * u * u + ar * ar + ai * ai
        P = np.fft.rfft(np.stack([u * dar + 0.5 * ar * du, u * dai + 0.5 * ai * du, flux]), axis=-1)
        out = np.empty_like(W)
        out[0] = -P[0]
        out[1] = -P[1]
        out[2] = -self.ik * P[2]
        if eta is not None:
            out[2] += np.fft.rfft(eta)
        out *= self.mask
        s_dot = -(float(np.mean(flux)) - 1.0)
        return out, s_dot

    def order1(self, W0, W1, eta1=None):
        """Linearised block driven by the order-0 state, with the i/2 a0_xx source."""
        ar0, ai0, u0, dar0, dai0, du0 = self._phys(W0)
        ar1, ai1, u1, dar1, dai1, du1 = self._phys(W1)
        flux = u0 * u1 + 2.0 * (ar0 * ar1 + ai0 * ai1)
        P = np.fft.rfft(
            np.stack(
                [
                    u0 * dar1 + u1 * dar0 + 0.5 * (ar0 * du1 + ar1 * du0),
                    u0 * dai1 + u1 * dai0 + 0.5 * (ai0 * du1 + ai1 * du0),
                    flux,
                ]
            ),
            axis=-1,
        )
        k2 = self.ik * self.ik
        out = np.empty_like(W1)
        out[0] = -P[0] - 0.5 * k2 * W0[1]
        out[1] = -P[1] + 0.5 * k2 * W0[0]
        out[2] = -self.ik * P[2]
        if eta1 is not None:
            out[2] += np.fft.rfft(eta1)
        out *= self.mask
        return out, -float(np.mean(flux))


def _initial_block(a: np.ndarray, u: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return np.fft.rfft(np.stack([np.real(a), np.imag(a), u]), axis=-1) * mask


def _check_block(W, bound, t, floor=None, grid=None):
    if not np.all(np.isfinite(W)) or np.max(np.abs(W)) > bound:
        raise Instability(f"non-finite or runaway state at t = {t:.6g}")
    if floor is not None:
        ar, ai = np.fft.irfft(W[:2], n=grid.n_points, axis=-1)
        rho = ar * ar + ai * ai
        if float(np.min(rho)) < floor:
            raise BlowUp(f"min |a|^2 = {float(np.min(rho)):.3e} below floor {floor:.3e} at t = {t:.6g}")


def default_hyperbolic_dt(a: np.ndarray, u: np.ndarray, grid: PeriodicGrid, cfl: float = 0.5) -> float:
    speed = float(np.max(np.abs(u))) + 2.0 * float(np.max(np.abs(a)))
    return cfl * grid.dx / max(speed, 1e-12)


def solve_grenier(w0: GrenierState, eta, hbar: float, T: float, dt: float | None = None,
                  store_every: int = 1, dealias: bool = True, growth_bound: float = 1e8) -> GrenierTrajectory:
    """Phase-lifted system for (a_r, a_i, u) and the mean of S.

    ``eta`` is the total forcing: a 2-component ControlCurve (combined as
    eta0 + hbar eta1) or a callable t -> grid samples. The skew block
    i (hbar/2) a_xx is applied exactly in Fourier space (rotation of each
    mode by hbar k^2 dt / 2) in a Strang split around an RK4 step of the
    hyperbolic part. ``hbar = 0`` gives the order-0 system.
    """
    if hbar < 0:
        raise ValueError("hbar must be non-negative")
    w0.check()
    grid = w0.grid
    rhs = _HyperbolicRHS(grid, dealias)
    eta_f = _eta_function(eta, grid, (1.0, hbar))
    dt = default_hyperbolic_dt(w0.a, w0.u.values, grid) if dt is None else float(dt)
    n_steps = _n_steps(T, dt)
    times, store = time_nodes(T, n_steps, store_every)
    h = T / n_steps
    W = _initial_block(w0.a, w0.u.values, rhs.mask)
    s_mean = float(w0.S_mean)
    theta = 0.25 * hbar * grid.k_real**2 * h
    c, s = np.cos(theta), np.sin(theta)
    bound = growth_bound * (1.0 + float(np.max(np.abs(W))))

    def rotate(W):
        # a_hat -> exp(-i theta) a_hat with a = a_r + i a_i
        ar, ai = W[0], W[1]
        return np.stack([c * ar + s * ai, -s * ar + c * ai, W[2]])

    def f(W, t):
        return rhs.order0(W, eta_f(t) if eta_f is not None else None)

    store_set = set(int(i) for i in store[1:])
    out = [np.fft.irfft(W, n=grid.n_points, axis=-1)]
    means = [s_mean]
    for j in range(n_steps):
        t0 = times[j]
        if hbar:
            W = rotate(W)
        k1, m1 = f(W, t0)
        k2, m2 = f(W + 0.5 * h * k1, t0 + 0.5 * h)
        k3, m3 = f(W + 0.5 * h * k2, t0 + 0.5 * h)
        k4, m4 = f(W + h * k3, t0 + h)
        W = W + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        s_mean += (h / 6.0) * (m1 + 2 * m2 + 2 * m3 + m4)
        if hbar:
            W = rotate(W)
        _check_block(W, bound, times[j + 1])
        if (j + 1) in store_set:
            out.append(np.fft.irfft(W, n=grid.n_points, axis=-1))
            means.append(s_mean)
    return GrenierTrajectory(grid, hbar, times[store], np.stack(out), np.array(means), n_steps)


def _wkb_from_blocks(grid, t, blocks0, means0, blocks1=None, means1=None, n_steps=0) -> WKBData:
    def curves(blocks, means):
        a = blocks[:, 0] + 1j * blocks[:, 1]
        u = blocks[:, 2]
        S = np.stack([antiderivative_array(v, grid) + m for v, m in zip(u, means)])
        return TimeCurve(t, a, grid), TimeCurve(t, S, grid), TimeCurve(t, u, grid)

    a0, S0, u0 = curves(blocks0, means0)
    if blocks1 is None:
        return WKBData(a0, S0, u0, n_steps=n_steps)
    a1, S1, u1 = curves(blocks1, means1)
    return WKBData(a0, S0, u0, a1, S1, u1, n_steps=n_steps)


def solve_order0(a00: PeriodicField | np.ndarray, S: PeriodicField | np.ndarray, eta, T: float,
                 dt: float | None = None, store_every: int = 1, dealias: bool = True,
                 blowup_fraction: float = 0.05) -> WKBData:
    """Order-0 WKB system: transport of (a0_r, a0_i) by u0 and the forced Euler velocity.

    ``a00`` is the complex initial amplitude, ``S`` the initial phase (its
    derivative is u0(0), its mean the initial S0 mean). ``eta`` is a
    2-component ControlCurve whose first component is used, or a callable.
    Raises BlowUp when |a0|^2 drops below ``blowup_fraction`` of its initial minimum.
    """
    grid, a, Svals = _initial_arrays(a00, S)
    rhs = _HyperbolicRHS(grid, dealias)
    eta_f = _eta_function(eta, grid, (1.0, 0.0))
    u = derivative_array(Svals, grid)
    dt = default_hyperbolic_dt(a, u, grid) if dt is None else float(dt)
    n_steps = _n_steps(T, dt)
    times, store = time_nodes(T, n_steps, store_every)
    h = T / n_steps
    W = _initial_block(a, u, rhs.mask)
    s_mean = float(np.mean(Svals))
    floor = blowup_fraction * float(np.min(np.abs(a) ** 2))
    bound = 1e8 * (1.0 + float(np.max(np.abs(W))))

    def f(W, t):
        return rhs.order0(W, eta_f(t) if eta_f is not None else None)

    store_set = set(int(i) for i in store[1:])
    out, means = [np.fft.irfft(W, n=grid.n_points, axis=-1)], [s_mean]
    for j in range(n_steps):
        t0 = times[j]
        k1, m1 = f(W, t0)
        k2, m2 = f(W + 0.5 * h * k1, t0 + 0.5 * h)
        k3, m3 = f(W + 0.5 * h * k2, t0 + 0.5 * h)
        k4, m4 = f(W + h * k3, t0 + h)
        W = W + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        s_mean += (h / 6.0) * (m1 + 2 * m2 + 2 * m3 + m4)
        _check_block(W, bound, times[j + 1], floor, grid)
        if (j + 1) in store_set:
            out.append(np.fft.irfft(W, n=grid.n_points, axis=-1))
            means.append(s_mean)
    return _wkb_from_blocks(grid, times[store], np.stack(out), np.array(means), n_steps=n_steps)


def _initial_arrays(a00, S):
    if isinstance(a00, PeriodicField):
        grid = a00.grid
        a = np.asarray(a00.values, dtype=complex)
    else:
        raise TypeError("a00 must be a PeriodicField")
    Svals = S.values if isinstance(S, PeriodicField) else np.asarray(S, dtype=float)
    return grid, a, np.asarray(Svals, dtype=float)


def solve_order1(wkb0: WKBData, a10: PeriodicField | np.ndarray, eta, T: float | None = None,
                 dt: float | None = None, store_every: int | None = None, dealias: bool = True,
                 blowup_fraction: float = 0.05) -> WKBData:
    """Order-0 and order-1 WKB systems integrated together.

    The order-0 block is re-integrated on the time grid of ``wkb0`` (same
    steps, so the stored order-0 samples are reproduced) alongside the
    linear order-1 block with source (i/2) a0_xx, S1(0) = 0 and
    u1(0) = 0. ``eta`` provides both components (eta0, eta1).
    """
    grid = wkb0.grid
    T = wkb0.a0.T if T is None else T
    n_steps = wkb0.n_steps if dt is None else _n_steps(T, dt)
    if store_every is None:
        # reproduce the stored nodes of the order-0 run when possible
        n_nodes = len(wkb0.t_nodes)
        store_every = max(1, (n_steps + n_nodes - 2) // max(n_nodes - 1, 1)) if n_nodes > 1 else 1
    a0_init = wkb0.a0.samples[0]
    u0_init = wkb0.u0.samples[0]
    a10v = np.asarray(a10.values if isinstance(a10, PeriodicField) else a10, dtype=complex)
    rhs = _HyperbolicRHS(grid, dealias)
    e0 = _eta_function(eta, grid, (1.0, 0.0))
    e1 = None
    if isinstance(eta, ControlCurve):
        e1 = lambda t: eta.fields(float(t), grid)[1]  # noqa: E731
    times, store = time_nodes(T, n_steps, store_every)
    h = T / n_steps
    W0 = _initial_block(a0_init, u0_init, rhs.mask)
    W1 = _initial_block(a10v, np.zeros(grid.n_points), rhs.mask)
    m0 = float(np.mean(wkb0.S0.samples[0]))
    m1 = 0.0
    floor = blowup_fraction * float(np.min(np.abs(a0_init) ** 2))
    bound = 1e8 * (1.0 + float(np.max(np.abs(W0))) + float(np.max(np.abs(W1))))

    def f(W0, W1, t):
        d0, s0 = rhs.order0(W0, e0(t) if e0 is not None else None)
        d1, s1 = rhs.order1(W0, W1, e1(t) if e1 is not None else None)
        return d0, d1, s0, s1

    store_set = set(int(i) for i in store[1:])
    out0, out1 = [np.fft.irfft(W0, n=grid.n_points, axis=-1)], [np.fft.irfft(W1, n=grid.n_points, axis=-1)]
    means0, means1 = [m0], [m1]
    for j in range(n_steps):
        t0 = times[j]
        a1, b1, c1, d1 = f(W0, W1, t0)
        a2, b2, c2, d2 = f(W0 + 0.5 * h * a1, W1 + 0.5 * h * b1, t0 + 0.5 * h)
        a3, b3, c3, d3 = f(W0 + 0.5 * h * a2, W1 + 0.5 * h * b2, t0 + 0.5 * h)
        a4, b4, c4, d4 = f(W0 + h * a3, W1 + h * b3, t0 + h)
        W0 = W0 + (h / 6.0) * (a1 + 2 * a2 + 2 * a3 + a4)
        W1 = W1 + (h / 6.0) * (b1 + 2 * b2 + 2 * b3 + b4)
        m0 += (h / 6.0) * (c1 + 2 * c2 + 2 * c3 + c4)
        m1 += (h / 6.0) * (d1 + 2 * d2 + 2 * d3 + d4)
        _check_block(W0, bound, times[j + 1], floor, grid)
        _check_block(W1, bound, times[j + 1])
        if (j + 1) in store_set:
            out0.append(np.fft.irfft(W0, n=grid.n_points, axis=-1))
            out1.append(np.fft.irfft(W1, n=grid.n_points, axis=-1))
            means0.append(m0)
            means1.append(m1)
    return _wkb_from_blocks(grid, times[store], np.stack(out0), np.array(means0), np.stack(out1),
                            np.array(means1), n_steps=n_steps)


def rho1_equation_residual(wkb: WKBData, eta=None) -> float:
    """max over stored nodes of |d_t rho1 + d(u0 rho1 + u1 rho0) - d_x A|.

    d_t rho1 = 2(a0r' a1r + a0r a1r' + a0i' a1i + a0i a1i') is formed from the
    collocation right-hand sides (no dealiasing), so this checks that the
    order-1 system implies the rho1 balance law.
    """
    if not wkb.has_order1:
        raise ValueError("order-1 data required")
    g = wkb.grid
    rhs = _HyperbolicRHS(g, dealias=False)
    e0 = _eta_function(eta, g, (1.0, 0.0))
    e1 = (lambda t: eta.fields(float(t), g)[1]) if isinstance(eta, ControlCurve) else None
    A = wkb.A()
    worst = 0.0
    for i, t in enumerate(wkb.t_nodes):
        a0, a1 = wkb.a0.samples[i], wkb.a1.samples[i]
        u0, u1 = wkb.u0.samples[i], wkb.u1.samples[i]
        W0 = np.fft.rfft(np.stack([a0.real, a0.imag, u0]), axis=-1)
        W1 = np.fft.rfft(np.stack([a1.real, a1.imag, u1]), axis=-1)
        d0, _ = rhs.order0(W0, e0(t) if e0 is not None else None)
        d1, _ = rhs.order1(W0, W1, e1(t) if e1 is not None else None)
        d0 = np.fft.irfft(d0, n=g.n_points, axis=-1)
        d1 = np.fft.irfft(d1, n=g.n_points, axis=-1)
        rho1_t = 2.0 * (d0[0] * a1.real + a0.real * d1[0] + d0[1] * a1.imag + a0.imag * d1[1])
        rho0 = np.abs(a0) ** 2
        rho1 = 2.0 * np.real(np.conj(a0) * a1)
        res = rho1_t + derivative_array(u0 * rho1 + u1 * rho0, g) - derivative_array(A.samples[i], g)
        worst = max(worst, float(np.max(np.abs(res))))
    return worst


# ---------------------------------------------------------------------------
# Initial data in WKB form


def grenier_from_wkb_initial(a00: PeriodicField, a10: PeriodicField | None, S: PeriodicField, hbar: float) -> GrenierState:
    """Phase-lifted initial state a = a0 + hbar a1, u = S_x, S mean from S."""
    g = a00.grid
    a = np.asarray(a00.values, dtype=complex)
    if a10 is not None:
        a = a + hbar * np.asarray(a10.values, dtype=complex)
    u = derivative_array(S.values, g)
    return GrenierState(PeriodicField(g, a.real.copy()), PeriodicField(g, a.imag.copy()), PeriodicField(g, u),
                        float(np.mean(S.values)))


def wave_from_wkb_initial(a00: PeriodicField, a10: PeriodicField | None, S: PeriodicField, hbar: float) -> WaveFunction:
    return grenier_from_wkb_initial(a00, a10, S, hbar).to_wave(hbar)


# ---------------------------------------------------------------------------
# Observables and error metrics


def extract_observables(psi: WaveFunction, floor: float = 1e-8, strict: bool = False) -> Observables:
    """Density |psi|^2, momentum hbar Im(conj(psi) psi_x) and, away from vacuum, u.

    When min |psi|^2 < ``floor`` the velocity is not returned and ``vacuum``
    is set; with ``strict`` a VacuumRegion error is raised instead.
    """
    g = psi.grid
    v = psi.psi.values
    dv = np.fft.ifft(g.ik_complex * np.fft.fft(v))
    rho = np.abs(v) ** 2
    mom = psi.hbar * np.imag(np.conj(v) * dv)
    vacuum = bool(np.min(rho) < floor)
    if vacuum and strict:
        raise VacuumRegion(f"min |psi|^2 = {float(np.min(rho)):.3e} below {floor:.1e}")
    u = None if vacuum else PeriodicField(g, mom / rho)
    return Observables(PeriodicField(g, rho), PeriodicField(g, mom), u, vacuum)


def wkb_error_metrics(psi_T: WaveFunction, a0_hat: np.ndarray, S0_hat: np.ndarray, S1_hat: np.ndarray,
                      ks=(0, 1, 2, 3)) -> dict:
    """Norms of s = psi(T) exp(-i S0_hat / hbar) - a0_hat exp(i S1_hat)."""
    g = psi_T.grid
    s = psi_T.psi.values * np.exp(-1j * np.asarray(S0_hat) / psi_T.hbar) - np.asarray(a0_hat) * np.exp(1j * np.asarray(S1_hat))
    out = {"hbar": psi_T.hbar}
    for k in ks:
        out[f"s_H{k}"] = complex_sobolev_norm(s, g, k)
    out["s_L2"] = float(l2_norm_array(np.abs(s), g))
    return out


def grenier_remainders(state: GrenierState, hbar: float, a0: np.ndarray, a1: np.ndarray,
                       S0: np.ndarray, S1: np.ndarray, ks=(0, 1, 2, 3)) -> dict:
    """r_a = (a - a0 - hbar a1)/hbar and r_S = (S - S0 - hbar S1)/hbar in several norms."""
    g = state.grid
    ra = (state.a - a0 - hbar * a1) / hbar
    rS = (state.phase() - S0 - hbar * S1) / hbar
    out = {"hbar": hbar}
    for k in ks:
        out[f"r_a_H{k}"] = complex_sobolev_norm(ra, g, k)
        out[f"r_S_H{k}"] = float(sobolev_norm_array(rS, g, k))
    return out


# ---------------------------------------------------------------------------
# Controlled scenarios and hbar sweeps


def semiclassical_initial_data(spec) -> tuple[PeriodicField, PeriodicField, PeriodicField]:
    """WKB initial data (a0, a1, S) for a target spec with real amplitudes.

    a0 = sqrt(g0), a1 = g1 / (2 sqrt(g0)) (so 2 Re(conj(a0) a1) = g1) and S the
    zero-mean antiderivative of v0. S1(0) = 0 forces u1(0) = 0, so v1 must vanish.
    """
    g = spec.grid
    if float(np.max(np.abs(spec.v1.values))) > 1e-12:
        raise ValueError("WKB data requires v1 = 0 (the first-order phase starts at zero)")
    if np.any(np.abs(spec.A0.values) > 1e-12):
        raise ValueError("real amplitudes give A0 = 0")
    a0 = np.sqrt(spec.g0.values)
    return (PeriodicField(g, a0), PeriodicField(g, spec.g1.values / (2.0 * a0)),
            PeriodicField(g, antiderivative_array(spec.v0.values, g)))


def _sweep_point(args):
    hbar, eta, a00, a10, S, T, dt, store_every = args
    g = a00.grid
    w0 = grenier_from_wkb_initial(a00, a10, S, hbar)
    gt = solve_grenier(w0, eta, hbar, T, dt=dt, store_every=store_every)
    nls_dt = min(dt, default_nls_dt(w0.to_wave(hbar), potential_from_eta(eta, hbar, g), T))
    nt = solve_nls(w0.to_wave(hbar), potential_from_eta(eta, hbar, g), T, dt=nls_dt, store_every=10**9)
    return gt, nt, nls_dt


def hbar_sweep(spec, eta: ControlCurve, hbars, dt: float = 1e-3, store_every: int = 50, jobs: int = 1) -> dict:
    """Semiclassical metrics for each hbar on one controlled scenario.

    Per hbar: a_err = sup_t |a^h - a0|_L2, a1_err = sup_t |(a^h - a0)/h - a1|_L2
    (phase-lifted solver against the WKB cascade on the same steps),
    s^h norms from the split-step NLS at T, r_a and r_S at T, and density
    gaps at T: rho_gap = |rho^h - ghat0 - h ghat1|, rho_synth = the same for
    the WKB densities rho0 + h rho1, rho_remainder = |rho^h - rho0 - h rho1|.
    """
    T = spec.T
    g = spec.grid
    a00, a10, S = semiclassical_initial_data(spec)
    w0 = solve_order0(a00, S, eta, T, dt=dt, store_every=store_every)
    wkb = solve_order1(w0, a10, eta)
    tasks = [(float(h), eta, a00, a10, S, T, dt, store_every) for h in hbars]
    if jobs > 1 and len(tasks) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_sweep_point, tasks))
    else:
        results = [_sweep_point(t) for t in tasks]
    a0s, a1s = wkb.a0.samples, wkb.a1.samples
    rho0_T, rho1_T = wkb.rho0().samples[-1], wkb.rho1().samples[-1]
    rows = []
    for h, (gt, nt, nls_dt) in zip(hbars, results):
        h = float(h)
        amp = gt.amplitude().samples
        if amp.shape != a0s.shape:
            raise ValueError("phase-lifted and WKB runs must store the same nodes")
        a_err = max(float(l2_norm_array(np.abs(amp[i] - a0s[i]), g)) for i in range(len(amp)))
        a1_err = max(float(l2_norm_array(np.abs((amp[i] - a0s[i]) / h - a1s[i]), g)) for i in range(len(amp)))
        row = {"hbar": h, "a_err": a_err, "a1_err": a1_err, "nls_dt": nls_dt,
               "nls_mass_drift": float(np.max(np.abs(nt.mass - nt.mass[0])) / nt.mass[0])}
        s = wkb_error_metrics(nt.terminal, a0s[-1], wkb.S0.samples[-1], wkb.S1.samples[-1])
        row.update({k: v for k, v in s.items() if k != "hbar"})
        r = grenier_remainders(gt.terminal, h, a0s[-1], a1s[-1], wkb.S0.samples[-1], wkb.S1.samples[-1])
        row.update({k: v for k, v in r.items() if k != "hbar"})
        rho = np.abs(nt.terminal.psi.values) ** 2
        target = spec.ghat0.values + h * spec.ghat1.values
        row["rho_gap"] = float(l2_norm_array(rho - target, g))
        row["rho_synth"] = float(l2_norm_array(rho0_T + h * rho1_T - target, g))
        row["rho_remainder"] = float(l2_norm_array(rho - rho0_T - h * rho1_T, g))
        rows.append(row)
    return {"rows": rows, "wkb": wkb}
