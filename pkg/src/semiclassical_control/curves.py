"""Time-dependent controls.

A control curve maps t in [0, T] to a stack of components. E-valued curves
store sine/cosine coefficients with layout ``(n_components, max_mode, 2)``,
where ``[..., j-1, 0]`` multiplies sin(jx) and ``[..., j-1, 1]`` multiplies
cos(jx). ``fields(t, grid)`` evaluates any curve on a grid and returns an
array of shape ``(n_components, n_points)``.

Solvers read two hints from a curve: ``breakpoints`` (times of jumps, so
steps can be aligned with them) and ``feature_time`` (the shortest time
scale that must be resolved).
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.interpolate import CubicSpline

from .spectral import PeriodicGrid


@lru_cache(maxsize=64)
def _basis_cached(n_points: int, max_mode: int) -> np.ndarray:
    x = 2.0 * np.pi * np.arange(n_points) / n_points
    j = np.arange(1, max_mode + 1)[:, None]
    basis = np.empty((max_mode, 2, n_points))
    basis[:, 0, :] = np.sin(j * x)
    basis[:, 1, :] = np.cos(j * x)
    basis.setflags(write=False)
    return basis


def trig_basis(grid: PeriodicGrid, max_mode: int) -> np.ndarray:
    """Array of shape (max_mode, 2, N) with sin(jx) and cos(jx) samples."""
    return _basis_cached(grid.n_points, max_mode)


def coeffs_to_fields(coeffs: np.ndarray, grid: PeriodicGrid) -> np.ndarray:
    """Evaluate coefficient stacks (..., M, 2) on the grid -> (..., N)."""
    coeffs = np.asarray(coeffs, dtype=float)
    m = coeffs.shape[-2]
    if m == 0:
        return np.zeros(coeffs.shape[:-2] + (grid.n_points,))
    basis = trig_basis(grid, m)
    return np.tensordot(coeffs, basis, axes=([-2, -1], [0, 1]))


def fields_to_coeffs(values: np.ndarray, grid: PeriodicGrid, max_mode: int) -> np.ndarray:
    """Sine/cosine coefficients of modes 1..max_mode of grid samples (..., N)."""
    n = grid.n_points
    spec = np.fft.rfft(values, axis=-1) / n
    out = np.zeros(values.shape[:-1] + (max_mode, 2))
    top = min(max_mode, n // 2 - 1)
    # f = sum_j b_j sin jx + a_j cos jx  <->  c_j = (a_j - i b_j)/2
    out[..., :top, 0] = -2.0 * spec[..., 1 : top + 1].imag
    out[..., :top, 1] = 2.0 * spec[..., 1 : top + 1].real
    return out


def pad_coeffs(coeffs: np.ndarray, max_mode: int) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=float)
    m = coeffs.shape[-2]
    if m == max_mode:
        return coeffs
    if m > max_mode:
        if np.any(coeffs[..., max_mode:, :] != 0.0):
            raise ValueError("cannot truncate non-zero modes")
        return coeffs[..., :max_mode, :]
    pad = [(0, 0)] * coeffs.ndim
    pad[-2] = (0, max_mode - m)
    return np.pad(coeffs, pad)


# ---------------------------------------------------------------------------
# Smooth step used for mollification and endpoint ramps


def _psi(s):
    s = np.asarray(s, dtype=float)
    safe = np.where(s > 0.0, s, 1.0)
    return np.where(s > 0.0, np.exp(-1.0 / safe), 0.0)


def _dpsi(s):
    s = np.asarray(s, dtype=float)
    safe = np.where(s > 0.0, s, 1.0)
    return np.where(s > 0.0, np.exp(-1.0 / safe) / safe**2, 0.0)


def smooth_step(s):
    """C-infinity step: 0 for s <= 0, 1 for s >= 1, strictly monotone in between."""
    s = np.clip(np.asarray(s, dtype=float), -1.0, 2.0)
    a = _psi(s)
    b = _psi(1.0 - s)
    return a / (a + b)


def smooth_step_derivative(s):
    """Derivative of ``smooth_step``; a C-infinity bump supported in [0, 1]."""
    s = np.clip(np.asarray(s, dtype=float), -1.0, 2.0)
    a, b = _psi(s), _psi(1.0 - s)
    da, db = _dpsi(s), _dpsi(1.0 - s)
    return (da * b + a * db) / (a + b) ** 2


def cutoff_ramp(t, T: float, width: float):
    """r(t) vanishing on [0, width] and [T - width, T], equal to 1 on [2w, T - 2w]."""
    if width <= 0.0:
        return np.ones_like(np.asarray(t, dtype=float))
    return smooth_step((t - width) / width) * smooth_step((T - width - t) / width)


def cutoff_ramp_derivative(t, T: float, width: float):
    if width <= 0.0:
        return np.zeros_like(np.asarray(t, dtype=float))
    a = smooth_step((t - width) / width)
    b = smooth_step((T - width - t) / width)
    da = smooth_step_derivative((t - width) / width) / width
    db = -smooth_step_derivative((T - width - t) / width) / width
    return da * b + a * db


# ---------------------------------------------------------------------------
# Curve types


class ControlCurve:
    """Base class. Subclasses implement ``coeffs`` (E-valued) or ``fields``."""

    T: float = 1.0
    n_components: int = 2
    max_mode: int | None = None
    feature_time: float | None = None

    @property
    def breakpoints(self) -> np.ndarray:
        return np.empty(0)

    @property
    def piecewise_constant(self) -> bool:
        return False

    @property
    def feature_windows(self) -> np.ndarray | None:
        """(k, 2) intervals outside which the curve is locally constant, or None if unknown."""
        return None if self.feature_time else np.empty((0, 2))

    def coeffs(self, t: float) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} is not E-valued")

    def fields(self, t: float, grid: PeriodicGrid) -> np.ndarray:
        return coeffs_to_fields(self.coeffs(t), grid)

    def time_derivative(self) -> "ControlCurve":
        raise NotImplementedError(f"{type(self).__name__} has no time derivative")

    def __add__(self, other: "ControlCurve") -> "ControlCurve":
        return SumCurve([self, other])

    def sample_coeffs(self, t_nodes) -> np.ndarray:
        return np.stack([self.coeffs(float(t)) for t in t_nodes])


class ZeroCurve(ControlCurve):
    def __init__(self, T: float, n_components: int = 2, max_mode: int = 1):
        self.T = float(T)
        self.n_components = n_components
        self.max_mode = max_mode

    def coeffs(self, t):
        return np.zeros((self.n_components, self.max_mode, 2))

    def fields(self, t, grid):
        return np.zeros((self.n_components, grid.n_points))

    def time_derivative(self):
        return self


class ConstantCurve(ControlCurve):
    def __init__(self, coeffs: np.ndarray, T: float):
        c = np.array(coeffs, dtype=float)
        c.setflags(write=False)
        self._c = c
        self.T = float(T)
        self.n_components = c.shape[0]
        self.max_mode = c.shape[1]

    def coeffs(self, t):
        return np.array(self._c)

    def time_derivative(self):
        return ZeroCurve(self.T, self.n_components, self.max_mode)


class PiecewiseConstantCurve(ControlCurve):
    """Value ``values[k]`` on [edges[k], edges[k+1]); the last segment is closed at T."""

    def __init__(self, edges: np.ndarray, values: np.ndarray):
        edges = np.asarray(edges, dtype=float)
        values = np.asarray(values, dtype=float)
        if edges.ndim != 1 or edges.size != values.shape[0] + 1:
            raise ValueError("need len(edges) == len(values) + 1")
        if np.any(np.diff(edges) <= 0):
            raise ValueError("edges must be strictly increasing")
        self.edges = edges
        self.values = values
        self.T = float(edges[-1])
        self.n_components = values.shape[1]
        self.max_mode = values.shape[2]
        self.feature_time = float(np.min(np.diff(edges)))

    @property
    def breakpoints(self):
        return self.edges[1:-1]

    @property
    def piecewise_constant(self):
        return True

    def segment_index(self, t: float) -> int:
        k = int(np.searchsorted(self.edges, t, side="right")) - 1
        return min(max(k, 0), self.values.shape[0] - 1)

    def coeffs(self, t):
        return np.array(self.values[self.segment_index(t)])

    def integral(self, t: float) -> np.ndarray:
        """Exact int_0^t of the curve."""
        lengths = np.diff(self.edges)
        k = self.segment_index(t)
        full = np.tensordot(lengths[:k], self.values[:k], axes=(0, 0))
        return full + (min(t, self.T) - self.edges[k]) * self.values[k]

    @property
    def jumps(self) -> np.ndarray:
        return np.diff(self.values, axis=0)


class SmoothedCurve(ControlCurve):
    """Mollified piecewise-constant curve times an endpoint ramp.

    Each jump at a breakpoint b is replaced by a C-infinity step of width
    ``h`` centred at b. The result is multiplied by ``cutoff_ramp`` with
    width ``ramp_width`` (0 disables the ramp). ``order=1`` gives the exact
    time derivative.
    """

    def __init__(self, base: PiecewiseConstantCurve, h: float, ramp_width: float = 0.0, order: int = 0):
        if h <= 0 or h >= base.feature_time:
            raise ValueError("mollifier width must be positive and below the shortest segment")
        self.base = base
        self.h = float(h)
        self.ramp_width = float(ramp_width)
        self.order = order
        self.T = base.T
        self.n_components = base.n_components
        self.max_mode = base.max_mode
        self.feature_time = min(self.h, self.ramp_width) if self.ramp_width > 0 else self.h
        self._bp = base.breakpoints
        self._jumps = base.jumps

    @property
    def feature_windows(self):
        win = [np.stack([self._bp - 0.5 * self.h, self._bp + 0.5 * self.h], axis=1)]
        if self.ramp_width > 0:
            w2 = 2.0 * self.ramp_width
            win.append(np.array([[0.0, w2], [self.T - w2, self.T]]))
        return np.clip(np.concatenate(win), 0.0, self.T)

    def _near(self, t):
        lo = int(np.searchsorted(self._bp, t - 0.5 * self.h, side="left"))
        hi = int(np.searchsorted(self._bp, t + 0.5 * self.h, side="right"))
        return range(lo, hi)

    def _mollified(self, t):
        val = self.base.coeffs(t)
        for i in self._near(t):
            b = self._bp[i]
            heav = 1.0 if t >= b else 0.0
            val = val + self._jumps[i] * (float(smooth_step((t - b) / self.h + 0.5)) - heav)
        return val

    def _mollified_dt(self, t):
        val = np.zeros((self.n_components, self.max_mode, 2))
        for i in self._near(t):
            b = self._bp[i]
            val = val + self._jumps[i] * float(smooth_step_derivative((t - b) / self.h + 0.5)) / self.h
        return val

    def coeffs(self, t):
        r = float(cutoff_ramp(t, self.T, self.ramp_width))
        if self.order == 0:
            return r * self._mollified(t) if r != 0.0 else np.zeros((self.n_components, self.max_mode, 2))
        dr = float(cutoff_ramp_derivative(t, self.T, self.ramp_width))
        out = r * self._mollified_dt(t)
        if dr != 0.0:
            out = out + dr * self._mollified(t)
        return out

    def time_derivative(self):
        if self.order != 0:
            raise NotImplementedError("only first derivatives are provided")
        return SmoothedCurve(self.base, self.h, self.ramp_width, order=1)


class SampledCurve(ControlCurve):
    """Cubic-spline interpolation of coefficient samples on time nodes."""

    def __init__(self, t_nodes: np.ndarray, samples: np.ndarray, feature_time: float | None = None):
        t_nodes = np.asarray(t_nodes, dtype=float)
        samples = np.asarray(samples, dtype=float)
        self.t_nodes = t_nodes
        self.samples = samples
        self.T = float(t_nodes[-1])
        self.n_components = samples.shape[1]
        self.max_mode = samples.shape[2]
        self._spline = CubicSpline(t_nodes, samples, axis=0, bc_type="not-a-knot")
        self.feature_time = feature_time
        self._node_index = {float(t): i for i, t in enumerate(t_nodes)}

    def coeffs(self, t):
        i = self._node_index.get(float(t))
        if i is not None:
            return np.array(self.samples[i])
        return self._spline(float(t))

    def time_derivative(self):
        d = self._spline.derivative()
        return FunctionCurve(lambda t: d(float(t)), self.T, self.n_components, self.max_mode, self.feature_time)


class FunctionCurve(ControlCurve):
    """Coefficients given by an arbitrary callable."""

    def __init__(self, func, T: float, n_components: int, max_mode: int, feature_time: float | None = None):
        self.func = func
        self.T = float(T)
        self.n_components = n_components
        self.max_mode = max_mode
        self.feature_time = feature_time

    def coeffs(self, t):
        return np.asarray(self.func(t), dtype=float)


class GridFieldCurve(ControlCurve):
    """A curve of arbitrary grid fields, t -> array (n_components, N)."""

    def __init__(self, func, T: float, grid: PeriodicGrid, n_components: int = 2, feature_time: float | None = None):
        self.func = func
        self.T = float(T)
        self.grid = grid
        self.n_components = n_components
        self.feature_time = feature_time

    def fields(self, t, grid):
        if grid != self.grid:
            raise ValueError("grid mismatch")
        return np.asarray(self.func(t), dtype=float)


class SumCurve(ControlCurve):
    def __init__(self, curves):
        flat = []
        for c in curves:
            flat.extend(c.curves if isinstance(c, SumCurve) else [c])
        self.curves = flat
        self.T = flat[0].T
        self.n_components = flat[0].n_components
        modes = [c.max_mode for c in flat]
        self.max_mode = None if any(m is None for m in modes) else max(modes)
        times = [c.feature_time for c in flat if c.feature_time is not None]
        self.feature_time = min(times) if times else None

    @property
    def feature_windows(self):
        wins = [c.feature_windows for c in self.curves]
        if any(w is None for w in wins):
            return None
        return np.concatenate(wins)

    @property
    def breakpoints(self):
        bps = [c.breakpoints for c in self.curves if c.piecewise_constant]
        return np.unique(np.concatenate(bps)) if bps else np.empty(0)

    @property
    def piecewise_constant(self):
        return all(c.piecewise_constant or isinstance(c, (ZeroCurve, ConstantCurve)) for c in self.curves) and any(
            c.piecewise_constant for c in self.curves
        )

    def coeffs(self, t):
        if self.max_mode is None:
            raise NotImplementedError("sum contains a non E-valued curve")
        return sum(pad_coeffs(c.coeffs(t), self.max_mode) for c in self.curves)

    def fields(self, t, grid):
        return sum(c.fields(t, grid) for c in self.curves)

    def time_derivative(self):
        return SumCurve([c.time_derivative() for c in self.curves])


class ScaledCurve(ControlCurve):
    def __init__(self, curve: ControlCurve, factor: float | np.ndarray):
        self.curve = curve
        self.factor = np.asarray(factor, dtype=float)
        self.T = curve.T
        self.n_components = curve.n_components
        self.max_mode = curve.max_mode
        self.feature_time = curve.feature_time

    @property
    def breakpoints(self):
        return self.curve.breakpoints

    @property
    def piecewise_constant(self):
        return self.curve.piecewise_constant

    @property
    def feature_windows(self):
        return self.curve.feature_windows

    def _f(self, ndim_extra):
        f = self.factor
        if f.ndim == 0:
            return f
        return f.reshape((-1,) + (1,) * ndim_extra)

    def coeffs(self, t):
        return self._f(2) * self.curve.coeffs(t)

    def fields(self, t, grid):
        return self._f(1) * self.curve.fields(t, grid)

    def time_derivative(self):
        return ScaledCurve(self.curve.time_derivative(), self.factor)


def curve_l2_in_time(curve: ControlCurve, grid: PeriodicGrid, t_nodes: np.ndarray, k: int, component: int) -> float:
    """L^2(0,T; H^k) norm of one component, trapezoid rule on ``t_nodes``."""
    from .spectral import l2_in_time, sobolev_norm_array

    norms = [float(sobolev_norm_array(curve.fields(float(t), grid)[component], grid, k)) for t in t_nodes]
    return l2_in_time(np.asarray(t_nodes), np.asarray(norms))
