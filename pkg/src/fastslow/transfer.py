"""Ulam discretisation of the frozen fast maps ``f_theta = f(., theta)``.

Everything here works on ``n_bins`` equal cells of ``[0, 1)``.  Densities
are stored as cell averages normalised to mean 1; pushes through the
operator act on the corresponding mass vectors (densities divided by
``n_bins``).
"""
from __future__ import annotations

import csv
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import CubicSpline

from .systems import FastSlowSystem, wrap

__all__ = [
    "BranchResolutionError",
    "ConvergenceError",
    "DegenerateVarianceWarning",
    "GreenKuboWarning",
    "UlamOperator",
    "SrbDensity",
    "GreenKubo",
    "SlowFields",
    "build_ulam",
    "srb_density",
    "averaged_drift",
    "green_kubo_var2",
    "slow_fields",
    "midpoints",
]


class BranchResolutionError(ValueError):
    """``f_theta`` is not monotone on some cell."""


class ConvergenceError(RuntimeError):
    """An iterative solver did not reach its tolerance."""


class DegenerateVarianceWarning(UserWarning):
    """``Var^2`` is not bounded away from zero (non-degeneracy is suspect)."""


class GreenKuboWarning(UserWarning):
    """The truncated correlation sum has not decayed."""


def midpoints(n_bins: int) -> np.ndarray:
    return (np.arange(n_bins) + 0.5) / n_bins


@dataclass(frozen=True)
class UlamOperator:
    """Row-stochastic matrix ``P[i, j]`` = fraction of cell ``i`` mapped into cell ``j``."""

    n_bins: int
    matrix: sp.csr_matrix
    theta: float

    def push(self, mass: np.ndarray) -> np.ndarray:
        """Push a (signed) mass vector forward one step."""
        return self.matrix.T @ mass

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()


def _invert_on_cells(F, dF, lo, hi, target, iters=60):
    """Solve ``F(z) = target`` for ``z`` in ``[lo, hi]`` (``F`` increasing).

    Safeguarded Newton: each iterate is kept inside the current bracket and
    the bracket shrinks on every evaluation.
    """
    a = lo.copy()
    b = hi.copy()
    Fa = F(a)
    Fb = F(b)
    z = a + (target - Fa) / (Fb - Fa) * (b - a)
    for _ in range(iters):
        Fz = F(z)
        r = Fz - target
        below = r < 0
        a = np.where(below, z, a)
        b = np.where(below, b, z)
        d = dF(z)
        z_new = z - r / d
        bad = ~((z_new > a) & (z_new < b))
        z_new = np.where(bad, 0.5 * (a + b), z_new)
        if np.max(np.abs(z_new - z)) <= 4e-16 * max(1.0, float(np.max(np.abs(z)))):
            z = z_new
            break
        z = z_new
    return z


def build_ulam(sys: FastSlowSystem, theta: float, n_bins: int) -> UlamOperator:
    """Exact Ulam matrix of ``f_theta`` on ``n_bins`` cells.

    Each cell is mapped by the increasing lift of ``f_theta``; the image is cut
    at cell boundaries and every cut is pulled back by a safeguarded Newton
    solve, so entries are exact up to rounding.
    """
    n_bins = int(n_bins)
    if n_bins < 16:
        raise ValueError("n_bins must be at least 16")
    theta = float(theta)
    edges = np.arange(n_bins + 1) / n_bins
    lo, hi = edges[:-1], edges[1:]

    def F(z):
        return sys.f(z, theta)

    def dF(z):
        return sys.f_x(z, theta)

    Flo, Fhi = F(lo), F(hi)
    # monotonicity check on a few interior points of every cell
    probes = lo[:, None] + (hi - lo)[:, None] * np.linspace(0.0, 1.0, 5)[None, :]
    if np.any(Fhi <= Flo) or np.any(dF(probes) <= 0):
        raise BranchResolutionError(
            f"f(., {theta}) is not increasing on every cell; cannot split into monotone branches")

    j_lo = np.floor(Flo * n_bins).astype(np.int64)
    j_hi = np.ceil(Fhi * n_bins).astype(np.int64) - 1
    width = int(np.max(j_hi - j_lo)) + 1
    k = np.arange(width + 1)
    # cut values: interior cell boundaries of the image, clipped to the image
    cuts = (j_lo[:, None] + k[None, :]).astype(float) / n_bins
    cuts = np.clip(cuts, Flo[:, None], Fhi[:, None])
    cuts[:, 0] = Flo
    interior = (cuts > Flo[:, None]) & (cuts < Fhi[:, None])
    pre = np.where(cuts >= Fhi[:, None], hi[:, None], lo[:, None])
    rows_i, cols_k = np.nonzero(interior)
    if rows_i.size:
        z = _invert_on_cells(F, dF, lo[rows_i], hi[rows_i], cuts[rows_i, cols_k])
        pre[rows_i, cols_k] = z
    weights = np.diff(pre, axis=1) * n_bins
    targets = (j_lo[:, None] + k[None, :-1]) % n_bins
    rows = np.repeat(np.arange(n_bins), width)
    weights = weights.ravel()
    keep = weights > 0
    mat = sp.csr_matrix((weights[keep], (rows[keep], targets.ravel()[keep])),
                        shape=(n_bins, n_bins))
    mat.sum_duplicates()
    return UlamOperator(n_bins=n_bins, matrix=mat, theta=wrap(theta))


@dataclass(frozen=True)
class SrbDensity:
    """Piecewise-constant invariant density (cell averages, mean 1)."""

    theta: float
    values: np.ndarray
    residual: float
    iterations: int
    residual_history: np.ndarray = field(repr=False, default=None)

    @property
    def n_bins(self) -> int:
        return len(self.values)

    @property
    def mass(self) -> np.ndarray:
        return self.values / self.n_bins

    def expect(self, values: np.ndarray) -> float:
        """Integral of a cell-sampled function against the density."""
        return float(np.sum(self.values * values) / self.n_bins)


def srb_density(op: UlamOperator, tol: float = 1e-13, max_iter: int = 20000) -> SrbDensity:
    """Left fixed vector of the Ulam matrix by power iteration from Lebesgue."""
    n = op.n_bins
    P_T = op.matrix.T.tocsr()
    p = np.full(n, 1.0 / n)
    history = []
    res = np.inf
    for it in range(1, max_iter + 1):
        q = P_T @ p
        q /= q.sum()
        res = float(np.abs(q - p).sum())
        history.append(res)
        p = q
        if res <= tol:
            break
    else:
        raise ConvergenceError(
            f"power iteration at theta={op.theta:.6g} stalled at residual {res:.3g} "
            f"after {max_iter} iterations")
    return SrbDensity(theta=op.theta, values=p * n, residual=res, iterations=it,
                      residual_history=np.asarray(history))


def averaged_drift(sys: FastSlowSystem, theta: float, n_bins: int = 4096,
                   density: SrbDensity | None = None) -> float:
    """``bar omega(theta)``: the drift averaged against the invariant density."""
    if density is None:
        density = srb_density(build_ulam(sys, theta, n_bins))
    x = midpoints(density.n_bins)
    return density.expect(sys.omega(x, theta))


class GreenKubo(NamedTuple):
    var2: float
    n_terms: int
    last_term: float
    terms: np.ndarray


def green_kubo_var2(sys: FastSlowSystem, theta: float, n_bins: int = 4096, K: int = 30,
                    *, op: UlamOperator | None = None, density: SrbDensity | None = None,
                    tail_tol: float = 1e-8, K_max: int = 200) -> GreenKubo:
    """Truncated Green-Kubo sum for the centred drift.

    The lag-``m`` correlation is obtained by pushing the signed mass
    ``omega_hat * h`` through the Ulam matrix ``m`` times.  Starting from
    ``K`` terms the sum is extended until a term drops below ``tail_tol`` or
    ``K_max`` is reached.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    if op is None:
        op = build_ulam(sys, theta, n_bins)
    if density is None:
        density = srb_density(op)
    x = midpoints(op.n_bins)
    w = sys.omega(x, theta)
    # a constant drift has no fluctuations; avoid rounding residue in the mean
    w_hat = w - density.expect(w) if np.ptp(w) > 0 else np.zeros_like(w)
    g = w_hat * density.mass
    terms = [float(np.dot(w_hat, g))]
    P_T = op.matrix.T.tocsr()
    m = 0
    while True:
        m += 1
        g = P_T @ g
        terms.append(float(np.dot(w_hat, g)))
        if m >= K and (abs(terms[-1]) < tail_tol or m >= K_max):
            break
    terms = np.asarray(terms)
    last = float(abs(terms[-1]))
    if last > 1e-6:
        warnings.warn(f"Green-Kubo tail at theta={theta:.4g} is {last:.3g} after {m} lags",
                      GreenKuboWarning, stacklevel=2)
    var2 = float(terms[0] + 2.0 * terms[1:].sum())
    return GreenKubo(var2=var2, n_terms=m, last_term=last, terms=terms)


CSV_COLUMNS = ("theta", "omega_bar", "omega_bar_prime", "var2", "psi_bar_star")


@dataclass(frozen=True)
class SlowFields:
    """Slow-circle fields on an equispaced grid ``theta_j = j / m``."""

    theta_grid: np.ndarray
    omega_bar: np.ndarray
    omega_bar_prime: np.ndarray
    var2: np.ndarray
    psi_bar_star: np.ndarray | None = None
    gk_terms: int = 0
    richardson_error: float = float("nan")

    def __post_init__(self):
        m = len(self.theta_grid)
        expected = np.arange(m) / m
        if not np.allclose(self.theta_grid, expected, atol=1e-12):
            raise ValueError("theta_grid must be the equispaced grid j/m")
        for name in ("omega_bar", "omega_bar_prime", "var2"):
            if len(getattr(self, name)) != m:
                raise ValueError(f"{name} has the wrong length")

    @property
    def m(self) -> int:
        return len(self.theta_grid)

    @classmethod
    def from_functions(cls, omega_bar: Callable, var2: Callable, m: int = 256,
                       psi_bar_star: Callable | None = None,
                       omega_bar_prime: Callable | None = None) -> "SlowFields":
        """Tabulate closed-form fields (useful for synthetic experiments)."""
        th = np.arange(m) / m
        wb = np.broadcast_to(np.asarray(omega_bar(th), dtype=float), th.shape).copy()
        if omega_bar_prime is None:
            wp = central_difference(wb)
        else:
            wp = np.broadcast_to(np.asarray(omega_bar_prime(th), dtype=float), th.shape).copy()
        v2 = np.broadcast_to(np.asarray(var2(th), dtype=float), th.shape).copy()
        ps = None
        if psi_bar_star is not None:
            ps = np.broadcast_to(np.asarray(psi_bar_star(th), dtype=float), th.shape).copy()
        return cls(theta_grid=th, omega_bar=wb, omega_bar_prime=wp, var2=v2, psi_bar_star=ps)

    def with_psi(self, psi_bar_star: np.ndarray) -> "SlowFields":
        return SlowFields(self.theta_grid, self.omega_bar, self.omega_bar_prime, self.var2,
                          np.asarray(psi_bar_star, dtype=float), self.gk_terms,
                          self.richardson_error)

    def to_csv(self, path) -> None:
        psi = self.psi_bar_star if self.psi_bar_star is not None else np.full(self.m, np.nan)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for row in zip(self.theta_grid, self.omega_bar, self.omega_bar_prime,
                           self.var2, psi):
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "SlowFields":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != CSV_COLUMNS:
                raise ValueError(f"unexpected header {header}; want {CSV_COLUMNS}")
            data = np.array([[float(v) for v in row] for row in reader])
        psi = data[:, 4]
        return cls(theta_grid=data[:, 0], omega_bar=data[:, 1], omega_bar_prime=data[:, 2],
                   var2=data[:, 3], psi_bar_star=None if np.all(np.isnan(psi)) else psi)

    def interpolant(self) -> "FieldInterpolant":
        return FieldInterpolant(self)


def central_difference(values: np.ndarray) -> np.ndarray:
    """Periodic second-order central difference on the grid ``j / m``."""
    m = len(values)
    return (np.roll(values, -1) - np.roll(values, 1)) * (m / 2.0)


class FieldInterpolant:
    """Periodic cubic splines of ``bar omega`` and ``Var^2`` (arguments are lifts)."""

    def __init__(self, fields: SlowFields):
        th = np.append(fields.theta_grid, 1.0)
        self._wb = CubicSpline(th, np.append(fields.omega_bar, fields.omega_bar[0]),
                               bc_type="periodic")
        self._v2 = CubicSpline(th, np.append(fields.var2, fields.var2[0]),
                               bc_type="periodic")
        self._dwb = self._wb.derivative()
        self._dv2 = self._v2.derivative()
        self._d2wb = self._wb.derivative(2)
        self._d2v2 = self._v2.derivative(2)
        self.fields = fields

    def omega_bar(self, theta):
        return self._wb(wrap(theta))

    def omega_bar_prime(self, theta):
        return self._dwb(wrap(theta))

    def omega_bar_second(self, theta):
        return self._d2wb(wrap(theta))

    def var2(self, theta):
        return self._v2(wrap(theta))

    def var2_prime(self, theta):
        return self._dv2(wrap(theta))

    def var2_second(self, theta):
        return self._d2v2(wrap(theta))

    def sigma(self, theta):
        return np.sqrt(np.maximum(self.var2(theta), 0.0))


def _theta_row(sys, theta, n_bins, K, psi, max_iter):
    op = build_ulam(sys, theta, n_bins)
    dens = srb_density(op, max_iter=max_iter)
    x = midpoints(n_bins)
    wb = dens.expect(sys.omega(x, theta))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", GreenKuboWarning)
        gk = green_kubo_var2(sys, theta, n_bins, K, op=op, density=dens)
    ps = np.nan
    if psi:
        from .lyapunov import frozen_center_slope
        s = frozen_center_slope(sys, x, theta)
        ps = dens.expect(sys.omega_x(x, theta) * s + sys.omega_theta(x, theta))
    return wb, gk.var2, gk.n_terms, ps, gk.last_term


def slow_fields(sys: FastSlowSystem, m: int = 256, n_bins: int = 4096, K: int = 30,
                *, psi: bool = True, workers: int = 1, max_iter: int = 20000,
                var2_floor: float = 1e-8) -> SlowFields:
    """Tabulate ``bar omega``, ``bar omega'``, ``Var^2`` and ``bar psi_*`` on ``j/m``.

    ``bar omega'`` is the periodic central difference of the tabulated drift;
    ``richardson_error`` records the largest difference between that and the
    stencil of double width, divided by 3.
    """
    if m < 64:
        raise ValueError("m must be at least 64")
    thetas = np.arange(m) / m
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda t: _theta_row(sys, t, n_bins, K, psi, max_iter), thetas))
    else:
        rows = [_theta_row(sys, t, n_bins, K, psi, max_iter) for t in thetas]
    wb = np.array([r[0] for r in rows])
    v2 = np.array([r[1] for r in rows])
    n_terms = max(r[2] for r in rows)
    tails = np.array([r[4] for r in rows])
    ps = np.array([r[3] for r in rows]) if psi else None
    wp = central_difference(wb)
    wide = (np.roll(wb, -2) - np.roll(wb, 2)) * (m / 4.0)
    rich = float(np.max(np.abs(wp - wide)) / 3.0)
    if np.max(tails) > 1e-6:
        warnings.warn(f"Green-Kubo tail up to {np.max(tails):.3g}", GreenKuboWarning,
                      stacklevel=2)
    if np.min(v2) <= var2_floor:
        warnings.warn(f"min Var^2 = {np.min(v2):.3g}: the drift looks cohomologous to a "
                      f"constant somewhere on the slow circle", DegenerateVarianceWarning,
                      stacklevel=2)
    return SlowFields(theta_grid=thetas, omega_bar=wb, omega_bar_prime=wp, var2=v2,
                      psi_bar_star=ps, gk_terms=int(n_terms), richardson_error=rich)
