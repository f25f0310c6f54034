"""Averaged slow dynamics: the ODE ``theta' = bar omega(theta)``, its zeros and
the linear-response variance ``Var_t^2``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .systems import wrap
from .transfer import FieldInterpolant

__all__ = [
    "DegenerateZeroError",
    "OdeSolution",
    "Zero",
    "ZeroSet",
    "VarianceCurve",
    "solve_averaged",
    "find_zeros",
    "variance_curve",
    "ZERO_TOL",
    "DEGENERATE_SLOPE",
]

#: Bisection stops once the bracket is narrower than this.
ZERO_TOL = 1e-10
#: Zeros with ``|bar omega'|`` below this violate non-degeneracy.
DEGENERATE_SLOPE = 1e-4


class DegenerateZeroError(ValueError):
    """A zero of the averaged drift has (numerically) vanishing slope."""


def _interp(fields):
    return fields if isinstance(fields, FieldInterpolant) else fields.interpolant()


@dataclass(frozen=True)
class OdeSolution:
    """RK4 solution of the averaged equation on the lifted slow line."""

    theta0: float
    t_grid: np.ndarray
    values: np.ndarray
    step: float

    def at(self, t):
        """Piecewise-linear evaluation between grid nodes (lifted)."""
        return np.interp(t, self.t_grid, self.values)

    @property
    def final(self) -> float:
        return float(self.values[-1])

    def residual(self, fields) -> float:
        """Max of ``|theta' - bar omega(theta)|`` at interval midpoints.

        The derivative at the midpoint is taken from the cubic Hermite
        interpolant through the nodes, whose slopes are ``bar omega`` itself.
        """
        fi = _interp(fields)
        y, h = self.values, np.diff(self.t_grid)
        if len(y) < 2:
            return 0.0
        d = fi.omega_bar(y)
        ymid = _hermite(y, d, h, 0.5)
        dmid = 1.5 * (y[1:] - y[:-1]) / h - 0.25 * (d[:-1] + d[1:])
        return float(np.max(np.abs(dmid - fi.omega_bar(ymid))))

    def to_csv(self, path, variance: "VarianceCurve | None" = None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "theta_bar", "var_t2"])
            v = variance.var_t2 if variance is not None else np.full(len(self.t_grid), np.nan)
            for row in zip(self.t_grid, self.values, v):
                w.writerow([repr(float(c)) for c in row])


def solve_averaged(fields, theta0: float, T: float, step: float = 1e-3) -> OdeSolution:
    """Classical RK4 for ``d theta / dt = bar omega(theta)`` on ``[0, T]``.

    The last step is shortened so the grid ends exactly at ``T``.
    """
    if not 0 < step <= 1e-2:
        raise ValueError("step must lie in (0, 1e-2]")
    if T < 0:
        raise ValueError("T must be non-negative")
    fi = _interp(fields)
    n = int(np.ceil(T / step - 1e-9)) if T > 0 else 0
    t = np.minimum(np.arange(n + 1) * step, T)
    y = np.empty(n + 1)
    y[0] = float(theta0)
    g = fi.omega_bar
    for k in range(n):
        h = t[k + 1] - t[k]
        yk = y[k]
        k1 = g(yk)
        k2 = g(yk + 0.5 * h * k1)
        k3 = g(yk + 0.5 * h * k2)
        k4 = g(yk + h * k3)
        y[k + 1] = yk + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
    return OdeSolution(theta0=float(theta0), t_grid=t, values=y, step=float(step))


class Zero(NamedTuple):
    theta: float
    slope: float
    kind: str  # "stable" or "unstable"


@dataclass(frozen=True)
class ZeroSet:
    zeros: tuple

    def __len__(self):
        return len(self.zeros)

    def __iter__(self):
        return iter(self.zeros)

    @property
    def rotation(self) -> bool:
        """No zeros: the averaged flow rotates around the circle."""
        return len(self.zeros) == 0

    @property
    def stable(self) -> list:
        return [z for z in self.zeros if z.kind == "stable"]

    @property
    def unstable(self) -> list:
        return [z for z in self.zeros if z.kind == "unstable"]

    def basin_index(self, theta) -> np.ndarray:
        """Index into :attr:`stable` of the sink whose basin contains ``theta``.

        Basins are the arcs between consecutive unstable zeros.
        """
        sinks = self.stable
        if not sinks:
            raise ValueError("no stable zeros")
        th = wrap(np.asarray(theta, dtype=float))
        if len(sinks) == 1:
            return np.zeros(np.shape(th), dtype=int)
        src = np.array(sorted(z.theta for z in self.unstable))
        # arc j runs from src[j] to src[j+1]; find the sink inside each arc
        arc_of_sink = [int(np.searchsorted(src, s.theta) - 1) % len(src) for s in sinks]
        lookup = np.empty(len(src), dtype=int)
        for i, a in enumerate(arc_of_sink):
            lookup[a] = i
        arc = (np.searchsorted(src, th, side="right") - 1) % len(src)
        return lookup[arc]


def find_zeros(fields, tol: float = ZERO_TOL,
               degenerate_slope: float = DEGENERATE_SLOPE) -> ZeroSet:
    """Locate and classify the zeros of the interpolated averaged drift.

    Sign changes on the tabulation grid are bracketed and refined by
    bisection; the slope is the spline derivative at the root.
    """
    fi = _interp(fields)
    f = fi.fields
    th = np.append(f.theta_grid, 1.0)
    vals = np.append(f.omega_bar, f.omega_bar[0])
    found = []
    for j in range(len(th) - 1):
        a, b = th[j], th[j + 1]
        fa, fb = vals[j], vals[j + 1]
        if fa == 0.0:
            found.append(a)
            continue
        if fa * fb > 0 or fb == 0.0:
            continue
        # spline value at nodes equals the tabulated value, so the sign
        # change carries over to the interpolant
        ga = fi.omega_bar(a)
        while b - a > tol:
            mid = 0.5 * (a + b)
            gm = fi.omega_bar(mid)
            if gm == 0.0:
                a = b = mid
                break
            if (gm > 0) == (ga > 0):
                a, ga = mid, gm
            else:
                b = mid
        found.append(0.5 * (a + b))
    zeros = []
    for z in found:
        z = wrap(z)
        slope = float(fi.omega_bar_prime(z))
        if abs(slope) < degenerate_slope:
            raise DegenerateZeroError(f"zero at theta={z:.10f} has slope {slope:.3g}")
        zeros.append(Zero(float(z), slope, "stable" if slope < 0 else "unstable"))
    zeros.sort(key=lambda z: z.theta)
    return ZeroSet(tuple(zeros))


def _hermite(y, d, h, s):
    """Cubic Hermite value at fraction ``s`` of every grid interval."""
    h00 = 1 - 3 * s**2 + 2 * s**3
    h10 = s - 2 * s**2 + s**3
    h01 = 3 * s**2 - 2 * s**3
    h11 = s**3 - s**2
    return h00 * y[:-1] + h10 * h * d[:-1] + h01 * y[1:] + h11 * h * d[1:]


@dataclass(frozen=True)
class VarianceCurve:
    theta0: float
    t_grid: np.ndarray
    var_t2: np.ndarray

    def at(self, t) -> float:
        return float(np.interp(t, self.t_grid, self.var_t2))

    @property
    def final(self) -> float:
        return float(self.var_t2[-1])


def variance_curve(fields, sol: OdeSolution) -> VarianceCurve:
    """``Var_t^2 = int_0^t exp(2 int_s^t bar omega'(theta_bar)) Var^2(theta_bar(s)) ds``.

    Evaluated as the recursion ``V_{k+1} = e^{2 dA_k} V_k + I_k`` over the
    solution grid, where ``dA_k`` and ``I_k`` are Simpson rules on
    ``[t_k, t_{k+1}]`` with midpoints from the cubic Hermite interpolant of the
    solution.  Composing local factors never forms ``e^{2A(t)}`` globally, so
    long horizons near an unstable zero do not overflow before the answer does.
    """
    fi = _interp(fields)
    y, t = sol.values, sol.t_grid
    n = len(t) - 1
    out = np.zeros(n + 1)
    if n == 0:
        return VarianceCurve(sol.theta0, t.copy(), out)
    h = np.diff(t)
    d = fi.omega_bar(y)
    ymid = _hermite(y, d, h, 0.5)
    a0, am, a1 = fi.omega_bar_prime(y[:-1]), fi.omega_bar_prime(ymid), fi.omega_bar_prime(y[1:])
    v0, vm, v1 = fi.var2(y[:-1]), fi.var2(ymid), fi.var2(y[1:])
    # A(s) = int_{t_k}^s bar omega'; needed at the midpoint and the right end
    A_end = h * (a0 + 4 * am + a1) / 6.0
    # int over [t_k, mid] of a, Simpson with the quarter point
    aq = fi.omega_bar_prime(_hermite(y, d, h, 0.25))
    A_mid = 0.5 * h * (a0 + 4 * aq + am) / 6.0
    # local integrand exp(2 (A_end - A(s))) Var^2(s) at s = t_k, mid, t_{k+1}
    loc = h * (np.exp(2 * A_end) * v0 + 4 * np.exp(2 * (A_end - A_mid)) * vm + v1) / 6.0
    grow = np.exp(2 * A_end)
    for k in range(n):
        out[k + 1] = grow[k] * out[k] + loc[k]
    return VarianceCurve(sol.theta0, t.copy(), np.maximum(out, 0.0))
