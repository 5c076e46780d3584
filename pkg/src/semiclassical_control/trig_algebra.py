"""Finite-dimensional control algebra on E_n = span{sin jx, cos jx : 1 <= j <= n+1}.

Contents:

* ``TrigPolynomial``: exact coefficient representation of E_n elements.
* ``decompose_mode``: write psi in E_{n+1} as phi - sum_i f_i d_x f_i with
  phi, f_i in E_n (unit weights).
* ``decompose_pair``: the paired version for (zeta0, zeta1), producing
  eta in E_n x E_n and pairs (xi0_i, xi1_i) with
  zeta0 = eta0 - sum xi0_i d_x xi0_i and zeta1 = eta1 - sum d_x(xi0_i xi1_i).
* oscillator schedules, their piecewise-constant curves and smoothed
  versions, and the relaxation function used to measure convergence.
* ``potential_from_control``: the potential F with -d_x F = eta.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .curves import (
    PiecewiseConstantCurve,
    SmoothedCurve,
    coeffs_to_fields,
    fields_to_coeffs,
    pad_coeffs,
)
from .errors import NotInSpace
from .spectral import (
    PeriodicField,
    PeriodicGrid,
    TimeCurve,
    antiderivative_array,
    derivative_array,
)

SIN, COS = 0, 1


@dataclass(frozen=True, eq=False)
class TrigPolynomial:
    """sum_j a_j sin(jx) + b_j cos(jx), j = 1..max_mode; coefficients[j-1] = (a_j, b_j)."""

    coefficients: np.ndarray

    def __post_init__(self):
        c = np.array(self.coefficients, dtype=float).reshape(-1, 2)
        c.setflags(write=False)
        object.__setattr__(self, "coefficients", c)

    @property
    def max_mode(self) -> int:
        return self.coefficients.shape[0]

    @classmethod
    def zero(cls, max_mode: int) -> "TrigPolynomial":
        return cls(np.zeros((max_mode, 2)))

    @classmethod
    def basis(cls, j: int, kind: int, max_mode: int | None = None, scale: float = 1.0) -> "TrigPolynomial":
        c = np.zeros((max_mode or j, 2))
        c[j - 1, kind] = scale
        return cls(c)

    @classmethod
    def from_terms(cls, terms: dict, max_mode: int | None = None) -> "TrigPolynomial":
        """Build from {(j, 'sin'|'cos'): coefficient}."""
        top = max([j for j, _ in terms] + [max_mode or 1])
        c = np.zeros((top, 2))
        for (j, kind), v in terms.items():
            c[j - 1, SIN if kind == "sin" else COS] += v
        return cls(c)

    @classmethod
    def from_field(cls, f: PeriodicField, max_mode: int) -> "TrigPolynomial":
        """Coefficients of the projection of ``f`` onto E_{max_mode-1}."""
        return cls(fields_to_coeffs(np.real(f.values), f.grid, max_mode))

    def values(self, grid: PeriodicGrid) -> np.ndarray:
        return coeffs_to_fields(self.coefficients, grid)

    def evaluate(self, grid: PeriodicGrid) -> PeriodicField:
        return PeriodicField(grid, self.values(grid))

    def padded(self, max_mode: int) -> "TrigPolynomial":
        return TrigPolynomial(pad_coeffs(self.coefficients, max_mode))

    def derivative(self) -> "TrigPolynomial":
        j = np.arange(1, self.max_mode + 1, dtype=float)
        c = np.empty_like(self.coefficients)
        c[:, SIN] = -j * self.coefficients[:, COS]
        c[:, COS] = j * self.coefficients[:, SIN]
        return TrigPolynomial(c)

    def highest_mode(self, tol: float = 0.0) -> int:
        nz = np.nonzero(np.any(np.abs(self.coefficients) > tol, axis=1))[0]
        return int(nz[-1]) + 1 if nz.size else 0

    def in_E(self, n: int, tol: float = 1e-12) -> bool:
        return self.highest_mode(tol) <= n + 1

    def split(self, n: int) -> tuple["TrigPolynomial", "TrigPolynomial"]:
        """(part in E_n, part on modes above n+1), both padded to max_mode."""
        low = np.array(self.coefficients)
        high = np.zeros_like(low)
        high[n + 1 :] = low[n + 1 :]
        low[n + 1 :] = 0.0
        return TrigPolynomial(low), TrigPolynomial(high)

    def _binary(self, other, op):
        m = max(self.max_mode, other.max_mode)
        return TrigPolynomial(op(pad_coeffs(self.coefficients, m), pad_coeffs(other.coefficients, m)))

    def __add__(self, other):
        return self._binary(other, np.add)

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __neg__(self):
        return TrigPolynomial(-self.coefficients)

    def __mul__(self, s: float):
        return TrigPolynomial(float(s) * self.coefficients)

    __rmul__ = __mul__

    def to_exponential(self) -> np.ndarray:
        """Complex exponential coefficients c_{-M..M} (index j + M)."""
        m = self.max_mode
        c = np.zeros(2 * m + 1, dtype=complex)
        a, b = self.coefficients[:, SIN], self.coefficients[:, COS]
        c[m + 1 :] = 0.5 * (b - 1j * a)
        c[:m][::-1] = 0.5 * (b + 1j * a)
        return c

    def __repr__(self):
        terms = []
        for j in range(self.max_mode):
            for kind, name in ((SIN, "sin"), (COS, "cos")):
                v = self.coefficients[j, kind]
                if v != 0.0:
                    terms.append(f"{v:+.6g} {name} {j + 1}x")
        return "TrigPolynomial(" + (" ".join(terms) if terms else "0") + ")"


def exact_product(p: TrigPolynomial, q: TrigPolynomial) -> tuple[float, TrigPolynomial]:
    """Exact product p*q as (mean, oscillating part) using coefficient convolution."""
    cp, cq = p.to_exponential(), q.to_exponential()
    prod = np.convolve(cp, cq)
    m = (prod.size - 1) // 2
    pos = prod[m + 1 :]
    coeffs = np.stack([-2.0 * pos.imag, 2.0 * pos.real], axis=1)
    return float(prod[m].real), TrigPolynomial(coeffs)


def exact_half_square_derivative(f: TrigPolynomial) -> TrigPolynomial:
    """f d_x f = (1/2) d_x (f^2), computed in coefficient space."""
    _, sq = exact_product(f, f)
    return sq.derivative() * 0.5


# ---------------------------------------------------------------------------
# Bracket decompositions


@dataclass(frozen=True, eq=False)
class BracketDecomposition:
    """psi = phi - sum_i f_i d_x f_i with phi and every f_i in E_n."""

    n: int
    phi: TrigPolynomial
    factors: tuple[TrigPolynomial, ...] = ()

    def reconstruct(self, grid: PeriodicGrid) -> np.ndarray:
        out = self.phi.values(grid)
        for f in self.factors:
            fv = f.values(grid)
            out = out - fv * derivative_array(fv, grid)
        return out

    def residual(self, psi: TrigPolynomial, grid: PeriodicGrid) -> float:
        return float(np.max(np.abs(self.reconstruct(grid) - psi.values(grid))))

    def reconstruct_exact(self) -> TrigPolynomial:
        out = self.phi
        for f in self.factors:
            out = out - exact_half_square_derivative(f)
        return out


@lru_cache(maxsize=None)
def _unit_decomposition(q: int, kind: int, sign: int) -> tuple[np.ndarray, tuple[np.ndarray, ...]]:
    """Decomposition of sign * (sin or cos)(q x), q >= 2, into E_{q-2} data.

    Returns coefficient arrays (phi, factors) with max_mode q - 1.
    """
    M = q - 1

    def poly(terms):
        c = np.zeros((M, 2))
        for j, k, v in terms:
            c[j - 1, k] += v
        return c

    if q % 2 == 0:
        m = q // 2
        phi = np.zeros((M, 2))
        if kind == SIN:
            # +sin 2mx = -(2/m) cos mx d cos mx ; -sin 2mx = -(2/m) sin mx d sin mx
            w = np.sqrt(2.0 / m)
            f = poly([(m, COS if sign > 0 else SIN, w)])
        else:
            # +-cos 2mx = -(1/m)(sin mx -+ cos mx) d (sin mx -+ cos mx)
            w = np.sqrt(1.0 / m)
            f = poly([(m, SIN, w), (m, COS, -w if sign > 0 else w)])
        return phi, (f,)

    m = (q - 1) // 2
    w = np.sqrt(2.0 / q)
    g = poly([(m + 1, COS, w)])
    if kind == SIN:
        # -(q/2) sin qx = -(S+) d S+ - C d C + (m/2) sin 2mx - (1/2) sin x, S+ = sin(m+1)x + sin mx
        f = poly([(m + 1, SIN, w), (m, SIN, -w if sign > 0 else w)])
        phi = poly([(2 * m, SIN, m / q), (1, SIN, 1.0 / q if sign > 0 else -1.0 / q)])
    else:
        f = poly([(m + 1, SIN, w), (m, COS, -w if sign > 0 else w)])
        phi = poly([(2 * m, SIN, -m / q), (1, COS, -1.0 / q if sign > 0 else 1.0 / q)])
    return phi, (f, g)


def decompose_mode(psi: TrigPolynomial, n: int) -> BracketDecomposition:
    """Write psi in E_{n+1} as phi - sum f_i d_x f_i with phi, f_i in E_n.

    The E_n part of psi passes straight into phi. Each top-mode direction
    c * e (e = sin or cos of (n+2)x) uses the unit decomposition of sign(c) e
    with factors scaled by sqrt|c| and phi scaled by |c|.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    q = n + 2
    if psi.highest_mode() > q:
        raise NotInSpace(f"input has modes above {q}, outside E_{n + 1}")
    coeffs = pad_coeffs(psi.coefficients, max(psi.max_mode, q))[:q]
    phi = np.zeros((q - 1, 2))
    phi[:] = coeffs[: q - 1]
    factors: list[TrigPolynomial] = []
    for kind in (SIN, COS):
        c = coeffs[q - 1, kind]
        if c == 0.0:
            continue
        base_phi, base_factors = _unit_decomposition(q, kind, 1 if c > 0 else -1)
        phi = phi + abs(c) * base_phi
        factors.extend(TrigPolynomial(np.sqrt(abs(c)) * f) for f in base_factors)
    return BracketDecomposition(n=n, phi=TrigPolynomial(phi), factors=tuple(factors))


@dataclass(frozen=True, eq=False)
class PairedDecomposition:
    """zeta0 = eta0 - sum xi0 d_x xi0, zeta1 = eta1 - sum d_x(xi0 xi1)."""

    n: int
    eta: tuple[TrigPolynomial, TrigPolynomial]
    pairs: tuple[tuple[TrigPolynomial, TrigPolynomial], ...] = ()

    @property
    def m(self) -> int:
        return len(self.pairs)

    def reconstruct(self, grid: PeriodicGrid) -> tuple[np.ndarray, np.ndarray]:
        z0 = self.eta[0].values(grid)
        z1 = self.eta[1].values(grid)
        for a, b in self.pairs:
            av, bv = a.values(grid), b.values(grid)
            z0 = z0 - av * derivative_array(av, grid)
            z1 = z1 - derivative_array(av * bv, grid)
        return z0, z1

    def residuals(self, zeta: tuple[TrigPolynomial, TrigPolynomial], grid: PeriodicGrid) -> tuple[float, float]:
        z0, z1 = self.reconstruct(grid)
        return (
            float(np.max(np.abs(z0 - zeta[0].values(grid)))),
            float(np.max(np.abs(z1 - zeta[1].values(grid)))),
        )

    def pair_coeffs(self) -> np.ndarray:
        """Array (m, 2, n+1, 2) of the pair coefficients."""
        M = self.n + 1
        if not self.pairs:
            return np.zeros((0, 2, M, 2))
        return np.stack(
            [np.stack([pad_coeffs(a.coefficients, M), pad_coeffs(b.coefficients, M)]) for a, b in self.pairs]
        )

    def eta_coeffs(self) -> np.ndarray:
        M = self.n + 1
        return np.stack([pad_coeffs(self.eta[0].coefficients, M), pad_coeffs(self.eta[1].coefficients, M)])


def decompose_pair(zeta: tuple[TrigPolynomial, TrigPolynomial], n: int) -> PairedDecomposition:
    """Paired decomposition of (zeta0, zeta1) in E_{n+1} x E_{n+1}.

    The zeta0 top part uses ``decompose_mode`` with xi1 = 0. For the zeta1
    top part both +zeta1 and -zeta1 are decomposed; with phi_+ and phi_-
    their factors, the pairs are (phi_+, phi_+/2) and (phi_-, 0), and the
    E_n parts eta_{1+} + eta_{1-} and eta_{1+} go to eta0 and eta1.
    """
    q = n + 2
    z0, z1 = zeta
    for z in (z0, z1):
        if z.highest_mode() > q:
            raise NotInSpace(f"input has modes above {q}, outside E_{n + 1}")
    z0 = z0.padded(max(z0.max_mode, q))
    z1 = z1.padded(max(z1.max_mode, q))
    low0, top0 = z0.split(n)
    low1, top1 = z1.split(n)
    M = n + 1
    d0 = decompose_mode(top0, n)
    dp = decompose_mode(top1, n)
    dm = decompose_mode(-top1, n)
    eta0 = low0.padded(q).coefficients[:M] + d0.phi.coefficients + dp.phi.coefficients + dm.phi.coefficients
    eta1 = low1.padded(q).coefficients[:M] + dp.phi.coefficients
    zero = TrigPolynomial.zero(M)
    pairs = [(f, zero) for f in d0.factors]
    pairs += [(f, f * 0.5) for f in dp.factors]
    pairs += [(f, zero) for f in dm.factors]
    return PairedDecomposition(n=n, eta=(TrigPolynomial(eta0), TrigPolynomial(eta1)), pairs=tuple(pairs))


def decompose_pair_coeffs(zeta_coeffs: np.ndarray, n: int) -> PairedDecomposition:
    """``decompose_pair`` on a coefficient stack of shape (2, M, 2)."""
    return decompose_pair((TrigPolynomial(zeta_coeffs[0]), TrigPolynomial(zeta_coeffs[1])), n)


def basis_elements(max_mode: int):
    """Yield (j, kind, TrigPolynomial) for every basis direction up to max_mode."""
    for j in range(1, max_mode + 1):
        for kind in (SIN, COS):
            yield j, kind, TrigPolynomial.basis(j, kind, max_mode)


# ---------------------------------------------------------------------------
# Oscillators


@dataclass(frozen=True, eq=False)
class OscillatorSchedule:
    """2m values xi^1..xi^{2m} with xi^{j+m} = -xi^j, repeated n times over [0, T].

    ``xi_list`` has shape (2m, n_components, max_mode, 2).
    """

    xi_list: np.ndarray
    n: int
    T: float
    m: int = field(init=False)

    def __post_init__(self):
        xi = np.array(self.xi_list, dtype=float)
        if xi.ndim == 3:
            xi = xi[:, None, :, :]
        if xi.shape[0] % 2:
            raise ValueError("xi_list must have even length 2m")
        m = xi.shape[0] // 2
        if not np.allclose(xi[m:], -xi[:m], rtol=0.0, atol=1e-14):
            raise ValueError("schedule must satisfy xi^{j+m} = -xi^j")
        if self.n < 1:
            raise ValueError("oscillation count must be positive")
        xi.setflags(write=False)
        object.__setattr__(self, "xi_list", xi)
        object.__setattr__(self, "m", m)

    @property
    def lam(self) -> float:
        return 1.0 / (2 * self.m)

    @property
    def segment_length(self) -> float:
        return self.T / (2 * self.m * self.n)

    @classmethod
    def from_factors(cls, factors: np.ndarray, n: int, T: float) -> "OscillatorSchedule":
        """Schedule for unit-weight factors f_1..f_m: xi^j = sqrt(m) f_j, xi^{j+m} = -xi^j.

        With lambda = 1/(2m) this gives sum_j lambda xi^j d xi^j = sum_i f_i d f_i.
        """
        factors = np.asarray(factors, dtype=float)
        m = factors.shape[0]
        xi = np.sqrt(m) * factors
        return cls(np.concatenate([xi, -xi]), n, T)


def oscillator_pieces(s: OscillatorSchedule, t0: float = 0.0, t1: float | None = None):
    """Edges and values of the oscillator on [t0, t1] (default [0, T])."""
    t1 = s.T if t1 is None else t1
    n_seg = 2 * s.m * s.n
    edges = t0 + (t1 - t0) * np.arange(n_seg + 1) / n_seg
    edges[-1] = t1
    values = np.tile(s.xi_list, (s.n, 1, 1, 1))
    return edges, values


def build_oscillator(s: OscillatorSchedule) -> PiecewiseConstantCurve:
    """Piecewise-constant mu_n: period T/n, segment j of each period carries xi^j."""
    edges, values = oscillator_pieces(s)
    return PiecewiseConstantCurve(edges, values)


def smooth_oscillator(mu: PiecewiseConstantCurve, m_tilde: float, ramp: bool = True) -> SmoothedCurve:
    """C-infinity approximation of a piecewise-constant curve.

    Jumps are mollified over width h = L/(8 m_tilde), L the shortest segment;
    with ``ramp`` the result is also multiplied by a ramp of width L/(16 m_tilde)
    so it vanishes at t = 0 and t = T.
    """
    if m_tilde <= 0:
        raise ValueError("smoothing parameter must be positive")
    L = mu.feature_time
    h = L / (8.0 * m_tilde)
    w = L / (16.0 * m_tilde) if ramp else 0.0
    return SmoothedCurve(mu, h, w)


def adjoint_cancellation_residual(u0: np.ndarray, s: OscillatorSchedule, grid: PeriodicGrid, component: int = 0) -> float:
    """Max residual of sum_j lam (u0+xi^j) d(u0+xi^j) = u0 d u0 + sum_j lam xi^j d xi^j."""
    xi = coeffs_to_fields(s.xi_list[:, component], grid)
    lhs = np.zeros(grid.n_points)
    rhs = u0 * derivative_array(u0, grid)
    for v in xi:
        w = u0 + v
        lhs = lhs + s.lam * w * derivative_array(w, grid)
        rhs = rhs + s.lam * v * derivative_array(v, grid)
    return float(np.max(np.abs(lhs - rhs)))


def relaxation_function(u0: np.ndarray, s: OscillatorSchedule, grid: PeriodicGrid, t_nodes: np.ndarray, component: int = 0) -> TimeCurve:
    """f(t) = (1/2) d(u0 + mu(t))^2 - (1/2) sum_j lam d(u0 + xi^j)^2 for time-independent u0."""
    return TimeCurve(np.asarray(t_nodes), _relaxation_samples(u0, s, grid, t_nodes, component), grid)


def _relaxation_samples(u0, s, grid, t_nodes, component):
    mu = build_oscillator(s)
    xi = coeffs_to_fields(s.xi_list[:, component], grid)
    avg = sum(s.lam * 0.5 * derivative_array((u0 + v) ** 2, grid) for v in xi)
    samples = []
    for t in t_nodes:
        w = u0 + mu.fields(float(t), grid)[component]
        samples.append(0.5 * derivative_array(w**2, grid) - avg)
    return np.stack(samples)


def relaxation_metric(u0: np.ndarray, s: OscillatorSchedule, grid: PeriodicGrid, component: int = 0) -> float:
    """max_t max_x |K f(t)| on a time grid that contains every segment edge."""
    n_seg = 2 * s.m * s.n
    # f is constant on each segment, so the trapezoid rule on a grid
    # containing the edges integrates it exactly (values taken just inside)
    edges = s.T * np.arange(n_seg + 1) / n_seg
    mids = 0.5 * (edges[1:] + edges[:-1])
    f = _relaxation_samples(u0, s, grid, mids, component)
    K = np.concatenate([np.zeros((1, grid.n_points)), np.cumsum(f * (edges[1] - edges[0]), axis=0)])
    return float(np.max(np.abs(K)))


# ---------------------------------------------------------------------------
# Potential


def potential_from_control(eta: TrigPolynomial, grid: PeriodicGrid) -> PeriodicField:
    """F with -d_x F = eta and zero mean: sin jx -> cos(jx)/j, cos jx -> -sin(jx)/j."""
    j = np.arange(1, eta.max_mode + 1, dtype=float)
    c = np.empty_like(eta.coefficients)
    c[:, SIN] = -eta.coefficients[:, COS] / j
    c[:, COS] = eta.coefficients[:, SIN] / j
    return TrigPolynomial(c).evaluate(grid)


def potential_from_field(eta_values: np.ndarray, grid: PeriodicGrid) -> np.ndarray:
    """Zero-mean F with -d_x F = eta for arbitrary zero-mean grid samples."""
    return -antiderivative_array(eta_values, grid)


def potential_by_quadrature(eta: TrigPolynomial, n_quad: int = 4096) -> callable:
    """F(x) = -int_0^x eta + (1/2pi) int_0^{2pi} (2pi - s) eta(s) ds by direct quadrature.

    Returns a function of x (an independent route used for checking).
    """
    from scipy.integrate import quad

    def eta_fn(s):
        j = np.arange(1, eta.max_mode + 1)
        return float(np.sum(eta.coefficients[:, SIN] * np.sin(j * s) + eta.coefficients[:, COS] * np.cos(j * s)))

    const = quad(lambda s: (2 * np.pi - s) * eta_fn(s), 0.0, 2 * np.pi, limit=200)[0] / (2 * np.pi)

    def F(x):
        return np.array([-quad(eta_fn, 0.0, xi, limit=200)[0] + const for xi in np.atleast_1d(x)])

    return F


__all__: Sequence[str] = [
    "TrigPolynomial",
    "BracketDecomposition",
    "PairedDecomposition",
    "OscillatorSchedule",
    "decompose_mode",
    "decompose_pair",
    "decompose_pair_coeffs",
    "basis_elements",
    "oscillator_pieces",
    "build_oscillator",
    "smooth_oscillator",
    "potential_from_control",
    "relaxation_function",
    "relaxation_metric",
    "adjoint_cancellation_residual",
]
