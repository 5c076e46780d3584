"""Periodic fields on a uniform grid over [0, 2pi) with Fourier-based calculus.

The module offers two layers. ``PeriodicField`` and the module-level
functions are the public, immutable API. The ``*_array`` helpers work on
raw numpy arrays (last axis = grid) and are what the time integrators use
in their inner loops.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .errors import MeanNotZero

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class PeriodicGrid:
    """Uniform grid x_j = 2*pi*j/N on the torus of length 2*pi."""

    n_points: int = 256

    def __post_init__(self):
        n = int(self.n_points)
        if n < 8 or n & (n - 1):
            raise ValueError(f"n_points must be a power of two >= 8, got {self.n_points}")
        object.__setattr__(self, "n_points", n)

    @cached_property
    def x(self) -> np.ndarray:
        return TWO_PI * np.arange(self.n_points) / self.n_points

    @property
    def dx(self) -> float:
        return TWO_PI / self.n_points

    @cached_property
    def k_real(self) -> np.ndarray:
        """Integer wavenumbers for ``rfft`` output."""
        return np.arange(self.n_points // 2 + 1, dtype=float)

    @cached_property
    def k_complex(self) -> np.ndarray:
        """Integer wavenumbers for ``fft`` output."""
        return np.fft.fftfreq(self.n_points, d=1.0 / self.n_points)

    @cached_property
    def ik_real(self) -> np.ndarray:
        """Multiplier for a first derivative on ``rfft`` output (Nyquist zeroed)."""
        ik = 1j * self.k_real
        ik[-1] = 0.0
        return ik

    @cached_property
    def ik_complex(self) -> np.ndarray:
        ik = 1j * self.k_complex
        ik[self.n_points // 2] = 0.0
        return ik

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        """Two-thirds rule mask on ``rfft`` output."""
        return (self.k_real < self.n_points / 3.0).astype(float)

    @cached_property
    def dealias_mask_complex(self) -> np.ndarray:
        return (np.abs(self.k_complex) < self.n_points / 3.0).astype(float)

    def __reduce__(self):
        return (PeriodicGrid, (self.n_points,))


# ---------------------------------------------------------------------------
# Array-level helpers


def derivative_array(values: np.ndarray, grid: PeriodicGrid, order: int = 1) -> np.ndarray:
    """Spectral derivative along the last axis; real input gives real output."""
    if order < 0:
        raise ValueError("order must be non-negative")
    if order == 0:
        return np.array(values, copy=True)
    if np.iscomplexobj(values):
        mult = (1j * grid.k_complex) ** order
        if order % 2:
            mult[grid.n_points // 2] = 0.0
        return np.fft.ifft(np.fft.fft(values, axis=-1) * mult, axis=-1)
    mult = (1j * grid.k_real) ** order
    if order % 2:
        mult[-1] = 0.0
    return np.fft.irfft(np.fft.rfft(values, axis=-1) * mult, n=grid.n_points, axis=-1)


def mean_array(values: np.ndarray) -> np.ndarray:
    return np.mean(values, axis=-1)


def l2_norm_array(values: np.ndarray, grid: PeriodicGrid) -> np.ndarray:
    return np.sqrt(np.sum(np.abs(values) ** 2, axis=-1) * grid.dx)


def sobolev_weights(grid: PeriodicGrid, k: int, complex_layout: bool = False) -> np.ndarray:
    """Multiplier sum_{j<=k} m^{2j} for each stored wavenumber."""
    m = np.abs(grid.k_complex) if complex_layout else grid.k_real
    if complex_layout:
        m = m.copy()
        m[grid.n_points // 2] = grid.n_points // 2
    m2 = m**2
    w = np.zeros_like(m2)
    term = np.ones_like(m2)
    for _ in range(k + 1):
        w += term
        term = term * m2
    return w


def sobolev_norm_array(values: np.ndarray, grid: PeriodicGrid, k: int) -> np.ndarray:
    """H^k norm along the last axis, normalised so that k=0 is the L^2 norm."""
    k = max(int(k), 0)
    n = grid.n_points
    if np.iscomplexobj(values):
        c = np.fft.fft(values, axis=-1) / n
        w = sobolev_weights(grid, k, complex_layout=True)
        return np.sqrt(TWO_PI * np.sum(w * np.abs(c) ** 2, axis=-1))
    c = np.fft.rfft(values, axis=-1) / n
    w = sobolev_weights(grid, k)
    # rfft stores each pair +-m once, except m = 0 and the Nyquist mode
    mult = np.full(c.shape[-1], 2.0)
    mult[0] = 1.0
    mult[-1] = 1.0
    return np.sqrt(TWO_PI * np.sum(mult * w * np.abs(c) ** 2, axis=-1))


def _mean_tolerance(values: np.ndarray, grid: PeriodicGrid) -> float:
    return max(1e-10 * float(np.max(l2_norm_array(values, grid))), 1e-14)


def antiderivative_array(values: np.ndarray, grid: PeriodicGrid, check: bool = True) -> np.ndarray:
    """Zero-mean antiderivative along the last axis.

    Raises MeanNotZero when the input mean exceeds the tolerance.
    """
    if check:
        mean = np.max(np.abs(mean_array(values)))
        tol = _mean_tolerance(values, grid)
        if mean > tol:
            raise MeanNotZero(f"mean {mean:.3e} exceeds tolerance {tol:.3e}")
    if np.iscomplexobj(values):
        k = grid.k_complex
        inv = np.zeros_like(k, dtype=complex)
        inv[1:] = 1.0 / (1j * k[1:])
        inv[grid.n_points // 2] = 0.0
        return np.fft.ifft(np.fft.fft(values, axis=-1) * inv, axis=-1)
    k = grid.k_real
    inv = np.zeros_like(k, dtype=complex)
    inv[1:] = 1.0 / (1j * k[1:])
    inv[-1] = 0.0
    return np.fft.irfft(np.fft.rfft(values, axis=-1) * inv, n=grid.n_points, axis=-1)


def project_array(values: np.ndarray, grid: PeriodicGrid, n: int) -> np.ndarray:
    """L^2 projection onto span{sin jx, cos jx : 1 <= j <= n+1} along the last axis."""
    if np.iscomplexobj(values):
        return project_array(values.real, grid, n) + 1j * project_array(values.imag, grid, n)
    keep = (grid.k_real >= 1) & (grid.k_real <= n + 1) & (grid.k_real < grid.n_points / 2)
    return np.fft.irfft(np.fft.rfft(values, axis=-1) * keep, n=grid.n_points, axis=-1)


def trig_interpolate(values: np.ndarray, grid: PeriodicGrid, x: np.ndarray) -> np.ndarray:
    """Evaluate the trigonometric interpolant of real grid samples at arbitrary points.

    ``values`` may carry leading batch axes; ``x`` is a 1-D array of points.
    """
    n = grid.n_points
    c = np.fft.rfft(values, axis=-1) / n
    c[..., 1:-1] *= 2.0
    c[..., -1] = 0.0
    phase = np.exp(1j * np.outer(grid.k_real, np.asarray(x, dtype=float)))
    return np.real(c @ phase)


# ---------------------------------------------------------------------------
# Public immutable field type


@dataclass(frozen=True, eq=False)
class PeriodicField:
    """Samples of a periodic function on ``grid`` with a cached spectrum."""

    grid: PeriodicGrid
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, copy=True)
        if vals.ndim != 1 or vals.shape[0] != self.grid.n_points:
            raise ValueError(
                f"values must have shape ({self.grid.n_points},), got {vals.shape}"
            )
        if not np.iscomplexobj(vals):
            vals = vals.astype(float)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_function(cls, grid: PeriodicGrid, func) -> "PeriodicField":
        return cls(grid, func(grid.x))

    @classmethod
    def zeros(cls, grid: PeriodicGrid) -> "PeriodicField":
        return cls(grid, np.zeros(grid.n_points))

    @classmethod
    def from_spectrum(cls, grid: PeriodicGrid, spectrum: np.ndarray, real: bool = True):
        if real:
            return cls(grid, np.fft.irfft(spectrum, n=grid.n_points))
        return cls(grid, np.fft.ifft(spectrum))

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.values)

    @cached_property
    def spectrum(self) -> np.ndarray:
        """``rfft`` of real samples, ``fft`` of complex samples (unnormalised)."""
        if self.is_complex:
            spec = np.fft.fft(self.values)
        else:
            spec = np.fft.rfft(self.values)
        spec.setflags(write=False)
        return spec

    def round_trip(self) -> "PeriodicField":
        return PeriodicField.from_spectrum(self.grid, self.spectrum, real=not self.is_complex)

    def mean(self):
        return self.values.mean()

    @property
    def real(self) -> "PeriodicField":
        return PeriodicField(self.grid, self.values.real)

    @property
    def imag(self) -> "PeriodicField":
        return PeriodicField(self.grid, self.values.imag)

    def conj(self) -> "PeriodicField":
        return PeriodicField(self.grid, np.conj(self.values))

    def _coerce(self, other):
        if isinstance(other, PeriodicField):
            if other.grid != self.grid:
                raise ValueError("fields live on different grids")
            return other.values
        return other

    def __add__(self, other):
        return PeriodicField(self.grid, self.values + self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return PeriodicField(self.grid, self.values - self._coerce(other))

    def __rsub__(self, other):
        return PeriodicField(self.grid, self._coerce(other) - self.values)

    def __mul__(self, other):
        return PeriodicField(self.grid, self.values * self._coerce(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return PeriodicField(self.grid, self.values / self._coerce(other))

    def __neg__(self):
        return PeriodicField(self.grid, -self.values)

    def __abs__(self):
        return PeriodicField(self.grid, np.abs(self.values))

    def __pow__(self, p):
        return PeriodicField(self.grid, self.values**p)

    def allclose(self, other: "PeriodicField", atol: float = 1e-12) -> bool:
        return bool(np.max(np.abs(self.values - self._coerce(other))) <= atol)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values)))


def derivative(f: PeriodicField, order: int = 1) -> PeriodicField:
    """Spectral derivative of the given order."""
    if order < 1:
        raise ValueError("order must be a positive integer")
    return PeriodicField(f.grid, derivative_array(f.values, f.grid, order))


def sobolev_norm(f: PeriodicField, k: int = 0) -> float:
    """H^k norm, sqrt(sum_{j<=k} ||d^j f||_{L^2}^2), via Fourier multipliers."""
    if k < 0:
        raise ValueError("k must be non-negative")
    return float(sobolev_norm_array(f.values, f.grid, k))


def l2_norm(f: PeriodicField) -> float:
    return float(l2_norm_array(f.values, f.grid))


def zero_mean_antiderivative(f: PeriodicField) -> PeriodicField:
    """The unique zero-mean g with g' = f. Raises MeanNotZero if mean(f) != 0."""
    return PeriodicField(f.grid, antiderivative_array(f.values, f.grid))


def project_E(f: PeriodicField, n: int) -> PeriodicField:
    """Orthogonal L^2 projection onto E_n = span{sin jx, cos jx : 1 <= j <= n+1}."""
    if n < 0:
        raise ValueError("n must be non-negative")
    return PeriodicField(f.grid, project_array(f.values, f.grid, n))


# ---------------------------------------------------------------------------
# Time curves


@dataclass(frozen=True, eq=False)
class TimeCurve:
    """Samples of a curve t -> field (or coefficient vector) on time nodes 0 = t_0 < ... < t_M = T.

    ``samples`` is an array whose first axis runs over the nodes.
    """

    t_nodes: np.ndarray
    samples: np.ndarray
    grid: PeriodicGrid | None = None

    def __post_init__(self):
        t = np.asarray(self.t_nodes, dtype=float)
        s = np.asarray(self.samples)
        if t.ndim != 1 or t.size < 1:
            raise ValueError("t_nodes must be a non-empty 1-D array")
        if t[0] != 0.0:
            raise ValueError("t_nodes must start at 0")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("t_nodes must be strictly increasing")
        if s.shape[0] != t.size:
            raise ValueError("one sample per time node is required")
        t = t.copy()
        s = s.copy()
        t.setflags(write=False)
        s.setflags(write=False)
        object.__setattr__(self, "t_nodes", t)
        object.__setattr__(self, "samples", s)

    @property
    def T(self) -> float:
        return float(self.t_nodes[-1])

    def __len__(self):
        return self.t_nodes.size

    def field(self, i: int) -> PeriodicField:
        if self.grid is None:
            raise ValueError("curve carries coefficient vectors, not fields")
        return PeriodicField(self.grid, self.samples[i])

    def at(self, t: float) -> np.ndarray:
        """Piecewise-linear evaluation between nodes."""
        t_nodes = self.t_nodes
        if t <= t_nodes[0]:
            return np.array(self.samples[0])
        if t >= t_nodes[-1]:
            return np.array(self.samples[-1])
        i = int(np.searchsorted(t_nodes, t, side="right")) - 1
        th = (t - t_nodes[i]) / (t_nodes[i + 1] - t_nodes[i])
        return (1.0 - th) * self.samples[i] + th * self.samples[i + 1]

    def map(self, func) -> "TimeCurve":
        return TimeCurve(self.t_nodes, np.stack([func(s) for s in self.samples]), self.grid)


def time_integral_K(c: TimeCurve) -> TimeCurve:
    """Running integral K c(t) = int_0^t c, by the composite trapezoid rule."""
    t = c.t_nodes
    s = c.samples
    out = np.zeros(s.shape, dtype=np.result_type(s.dtype, float))
    if t.size > 1:
        dt = np.diff(t).reshape((-1,) + (1,) * (s.ndim - 1))
        out[1:] = np.cumsum(0.5 * dt * (s[1:] + s[:-1]), axis=0)
    return TimeCurve(t, out, c.grid)


def l2_in_time(t_nodes: np.ndarray, norms: np.ndarray) -> float:
    """L^2(0,T) norm of a scalar function sampled at nodes (trapezoid rule)."""
    norms = np.asarray(norms, dtype=float)
    if t_nodes.size < 2:
        return 0.0
    return float(np.sqrt(np.trapezoid(norms**2, t_nodes)))


# ---------------------------------------------------------------------------
# Serialization


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def field_to_csv(f: PeriodicField) -> str:
    """CSV text with columns x,value (real) or x,re,im (complex)."""
    buf = io.StringIO()
    x = f.grid.x
    if f.is_complex:
        buf.write("x,re,im\n")
        for xi, v in zip(x, f.values):
            buf.write(f"{_fmt(xi)},{_fmt(v.real)},{_fmt(v.imag)}\n")
    else:
        buf.write("x,value\n")
        for xi, v in zip(x, f.values):
            buf.write(f"{_fmt(xi)},{_fmt(v)}\n")
    return buf.getvalue()


def field_from_csv(text: str) -> PeriodicField:
    lines = [ln for ln in text.strip().splitlines() if ln and not ln.startswith("#")]
    header = lines[0].strip().split(",")
    data = np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])
    grid = PeriodicGrid(data.shape[0])
    if header == ["x", "value"]:
        return PeriodicField(grid, data[:, 1])
    if header == ["x", "re", "im"]:
        return PeriodicField(grid, data[:, 1] + 1j * data[:, 2])
    raise ValueError(f"unrecognised field header {header}")


def curve_to_csv(c: TimeCurve) -> str:
    """One block per node: a '# t=<value>' line followed by a field CSV."""
    blocks = []
    for i, t in enumerate(c.t_nodes):
        if c.grid is not None:
            body = field_to_csv(c.field(i))
        else:
            flat = np.ravel(c.samples[i])
            body = "index,value\n" + "".join(f"{j},{_fmt(v)}\n" for j, v in enumerate(flat))
        blocks.append(f"# t={_fmt(t)}\n{body}")
    return "".join(blocks)


def curve_from_csv(text: str) -> TimeCurve:
    times: list[float] = []
    bodies: list[list[str]] = []
    for ln in text.splitlines():
        if ln.startswith("# t="):
            times.append(float(ln[4:]))
            bodies.append([])
        elif ln.strip():
            bodies[-1].append(ln)
    fields = [field_from_csv("\n".join(b)) for b in bodies]
    grid = fields[0].grid
    return TimeCurve(np.array(times), np.stack([f.values for f in fields]), grid)


def stack_values(fields: Iterable[PeriodicField]) -> np.ndarray:
    return np.stack([f.values for f in fields])


def as_values(f, grid: PeriodicGrid | None = None) -> np.ndarray:
    """Accept a PeriodicField, array, scalar or None (zero) and return grid samples."""
    if isinstance(f, PeriodicField):
        return f.values
    if f is None:
        if grid is None:
            raise ValueError("grid required to build a zero field")
        return np.zeros(grid.n_points)
    arr = np.asarray(f)
    if arr.ndim == 0:
        if grid is None:
            raise ValueError("grid required to broadcast a scalar")
        return np.full(grid.n_points, float(arr))
    return arr


__all__: Sequence[str] = [
    "PeriodicGrid",
    "PeriodicField",
    "TimeCurve",
    "derivative",
    "sobolev_norm",
    "l2_norm",
    "zero_mean_antiderivative",
    "project_E",
    "time_integral_K",
    "l2_in_time",
    "field_to_csv",
    "field_from_csv",
    "curve_to_csv",
    "curve_from_csv",
    "trig_interpolate",
]
