"""Center leaves, the frozen conjugacies and the multiplier obstruction.

Center leaves are the integral curves of ``dx/dtheta = s(x, theta)``.  For
``eps = 0`` they are the graphs ``theta -> h(x0, theta)`` of the conjugacies
between ``f(., 0)`` and ``f(., theta)``, which are computed independently here
by matching symbolic itineraries.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.integrate import simpson

from .lyapunov import CenterField
from .systems import FastSlowSystem, PhasePoint, step, wrap

__all__ = [
    "CenterLeaf",
    "ConjugacyMap",
    "MultiplierReport",
    "HolonomyReport",
    "integrate_leaf",
    "integrate_leaves",
    "leaf_invariance_error",
    "conjugacy",
    "multiplier_obstruction",
    "holonomy_probe",
]


@dataclass(frozen=True)
class CenterLeaf:
    """Leaf through ``p0`` as a lifted graph over one turn of the slow circle."""

    theta_grid: np.ndarray
    x_values: np.ndarray
    slopes: np.ndarray = field(repr=False)
    closure_gap: float
    length: float
    bound: float          # sqrt(1 + K^2)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["theta", "x"])
            for a, b in zip(self.theta_grid, self.x_values):
                w.writerow([repr(float(a)), repr(float(b))])


def _rk4_leaves(cf: CenterField, x0, theta0, span: float, n: int):
    """Integrate ``dx/dtheta = s`` for a batch of starting points; returns (thetas, xs, slopes)."""
    h = span / n
    x = np.asarray(x0, dtype=float).copy()
    th = np.broadcast_to(np.asarray(theta0, dtype=float), x.shape).copy()
    xs = [x.copy()]
    ss = []
    for _ in range(n):
        k1 = cf.slope(x, th)
        ss.append(k1)
        k2 = cf.slope(x + 0.5 * h * k1, th + 0.5 * h)
        k3 = cf.slope(x + 0.5 * h * k2, th + 0.5 * h)
        k4 = cf.slope(x + h * k3, th + h)
        x = x + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        th = th + h
        if not np.all(np.isfinite(x)):
            raise FloatingPointError("leaf left the domain: non-finite center slopes")
        xs.append(x.copy())
    ss.append(cf.slope(x, th))
    thetas = np.asarray(theta0, dtype=float)[..., None] + h * np.arange(n + 1)
    return thetas, np.array(xs).T, np.array(ss).T


def integrate_leaves(cf: CenterField, points, step: float = 1 / 256) -> list:
    """:func:`integrate_leaf` for many starting points at once."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n = max(2, int(round(1.0 / step)))
    n += n % 2  # Simpson needs an even count
    thetas, xs, ss = _rk4_leaves(cf, pts[:, 0], pts[:, 1], 1.0, n)
    thetas = np.broadcast_to(thetas, xs.shape)
    bound = math.sqrt(1.0 + cf.K ** 2)
    out = []
    for i in range(len(pts)):
        gap = abs(wrap(xs[i, -1] - xs[i, 0] + 0.5) - 0.5)
        length = float(simpson(np.sqrt(1.0 + ss[i] ** 2), x=thetas[i]))
        out.append(CenterLeaf(thetas[i].copy(), xs[i].copy(), ss[i].copy(), float(gap),
                              length, bound))
    return out


def integrate_leaf(cf: CenterField, p0, step: float = 1 / 256) -> CenterLeaf:
    """RK4 integration of ``dx/dtheta = s(x, theta)`` from ``p0`` once around the slow circle.

    ``closure_gap`` is ``|x(theta0 + 1) - x(theta0)|`` modulo 1 and ``length``
    the arclength (Simpson on the RK4 nodes).
    """
    p = PhasePoint(*map(float, p0))
    return integrate_leaves(cf, [[p.x, p.theta]], step)[0]


def leaf_invariance_error(cf: CenterField, sys: FastSlowSystem, leaf: CenterLeaf,
                          n_points: int = 16, step: float = 1 / 256) -> float:
    """Largest x-distance from ``F(q)`` to the leaf through ``F(p0)``, for ``q`` on the leaf.

    The image leaf is integrated from ``F(p0)`` and evaluated at the theta of
    each image point (with the lift of theta handled by following the leaf).
    """
    idx = np.linspace(0, len(leaf.theta_grid) - 1, n_points, endpoint=False).astype(int)
    qx, qt = leaf.x_values[idx], leaf.theta_grid[idx]
    fx, ft = step_points(sys, qx, qt)
    px, pt = step_points(sys, leaf.x_values[:1], leaf.theta_grid[:1])
    errs = []
    for x_img, t_img in zip(fx, ft):
        span = t_img - pt[0]
        n = max(2, int(math.ceil(abs(span) / step)))
        _, xs, _ = _rk4_leaves(cf, px, pt, span, n)
        errs.append(abs(wrap(xs[0, -1] - x_img + 0.5) - 0.5))
    return float(max(errs))


def step_points(sys, x, theta):
    """One map step keeping theta lifted."""
    x1, _ = step(sys, x, theta)
    return np.asarray(x1), np.asarray(theta) + sys.epsilon * sys.omega(x, theta)


# ----------------------------------------------------------------------------
# conjugacy


@dataclass(frozen=True)
class ConjugacyMap:
    """``h(., theta)`` on the grid ``j / n_grid`` with ``f(., theta) o h = h o f(., 0)``."""

    theta: float
    grid: np.ndarray
    values: np.ndarray
    order_error: float     # sup |h_depth - h_(depth+2)|
    residual: float        # sup |f_theta(h(x)) - h(f_0(x))| on grid points
    depth: int

    def __call__(self, x):
        """Linear interpolation on the lifted graph (periodic in x)."""
        x = np.asarray(x, dtype=float)
        g = np.append(self.grid, 1.0)
        v = np.append(self.values, self.values[0] + 1.0)
        u = wrap(x)
        return np.interp(u, g, v) + (x - u)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "h"])
            for a, b in zip(self.grid, self.values):
                w.writerow([repr(float(a)), repr(float(b))])


def _lift(sys, theta):
    """Lift ``F(y) = f(y, theta) - f(0, theta)`` and its derivative, ``F(0) = 0``."""
    f0 = float(sys.f(np.array(0.0), np.array(theta)))

    def F(y):
        return sys.f(y, theta) - f0

    def dF(y):
        return sys.f_x(y, theta)
    return F, dF


def _inverse_branch(F, dF, target, ell, iters=80):
    """Solve ``F(y) = target`` for ``y`` in ``[0, 1]`` with ``target`` in ``[0, ell]``.

    Newton steps safeguarded by a bisection bracket (``F`` is increasing).
    """
    lo = np.zeros_like(target)
    hi = np.ones_like(target)
    y = target / ell
    for _ in range(iters):
        val = F(y) - target
        lo = np.where(val < 0, y, lo)
        hi = np.where(val > 0, y, hi)
        y_new = y - val / dF(y)
        bad = ~((y_new > lo) & (y_new < hi))
        y_new = np.where(bad, 0.5 * (lo + hi), y_new)
        if np.max(np.abs(y_new - y)) < 1e-16:
            y = y_new
            break
        y = y_new
    return y


def _descend(sys, theta, digits, ell, tail):
    F, dF = _lift(sys, theta)
    y = tail
    for k in range(digits.shape[1] - 1, -1, -1):
        y = _inverse_branch(F, dF, digits[:, k] + y, ell)
    return y


def conjugacy(sys: FastSlowSystem, theta: float, n_grid: int = 1024, depth: int = 60,
              tol: float = 1e-10) -> ConjugacyMap:
    """Conjugacy ``h(., theta)`` of the frozen maps by inverse-branch itineraries.

    For each grid point ``x`` the digits ``d_k = floor(ell * x_k)`` of its
    ``f(., 0)``-orbit select inverse branches of ``f(., theta)``; composing
    ``depth`` of them (applied to the orbit point ``x_depth``) gives
    ``h(x)``.  Requires ``f(0, theta) = 0 mod 1`` on both maps, fixing the
    normalisation ``h(0) = 0``.

    Raises ``ValueError`` when ``f(., theta)`` is not expanding or the change
    between depth ``depth`` and ``depth + 2`` exceeds ``tol``.
    """
    ell = int(sys.degree)
    frozen = sys.with_epsilon(0.0)
    for th in (0.0, theta):
        if abs(wrap(float(frozen.f(np.array(0.0), np.array(th))) + 0.5) - 0.5) > 1e-12:
            raise ValueError("x = 0 must be a fixed point of every frozen map")
        lam = _min_fx(frozen, th)
        if lam <= 1.0:
            raise ValueError(f"f(., {th}) is not expanding (min f_x = {lam:.4g})")
    if n_grid % ell:
        raise ValueError("n_grid must be a multiple of the degree")
    x = np.arange(n_grid) / n_grid
    F0, _ = _lift(frozen, 0.0)
    orbit = [x]
    digits = []
    for _ in range(depth + 2):
        image = F0(orbit[-1])
        d = np.clip(np.floor(image), 0, ell - 1)
        digits.append(d)
        orbit.append(image - d)
    digits = np.array(digits).T
    h = _descend(frozen, theta, digits[:, :depth], ell, orbit[depth])
    h2 = _descend(frozen, theta, digits[:, :depth + 2], ell, orbit[depth + 2])
    order_error = float(np.max(np.abs(h - h2)))
    if order_error > tol:
        raise ValueError(f"depth {depth} insufficient: change {order_error:.3g} > {tol:.1g}")
    # f_theta(h(x)) versus h(f_0(x)); f_0 maps the grid onto itself
    Fth, _ = _lift(frozen, theta)
    lhs = wrap(Fth(h2))
    img = np.rint(wrap(F0(x)) * n_grid).astype(int) % n_grid
    rhs = h2[img]
    residual = float(np.max(np.abs(wrap(lhs - rhs + 0.5) - 0.5)))
    return ConjugacyMap(float(theta), x, h2, order_error, residual, depth + 2)


def _min_fx(sys, theta, grid=4096):
    x = np.arange(grid) / grid
    return float(np.min(sys.f_x(x, np.full(grid, theta))))


# ----------------------------------------------------------------------------
# multipliers and holonomy


@dataclass(frozen=True)
class MultiplierReport:
    thetas: np.ndarray
    multipliers: np.ndarray
    spread: float
    threshold: float

    @property
    def obstructed(self) -> bool:
        """Multipliers differ, so no absolutely continuous conjugacy exists."""
        return self.spread > self.threshold

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["theta", "multiplier"])
            for a, b in zip(self.thetas, self.multipliers):
                w.writerow([repr(float(a)), repr(float(b))])


def multiplier_obstruction(sys: FastSlowSystem, theta_list: Sequence[float],
                           threshold: float = 1e-6) -> MultiplierReport:
    """Fixed-point multipliers ``f_x(0, theta)`` of the frozen maps.

    Conjugacies between expanding maps that are absolutely continuous must
    preserve periodic multipliers; a spread above ``threshold`` therefore
    rules out absolute continuity of the conjugacies (and of the center
    holonomy they induce).
    """
    th = np.asarray(theta_list, dtype=float)
    f0 = sys.f(np.zeros_like(th), th)
    if np.max(np.abs(wrap(f0 + 0.5) - 0.5)) > 1e-12:
        raise ValueError("x = 0 is not fixed for every theta")
    mult = np.asarray(sys.f_x(np.zeros_like(th), th), dtype=float)
    spread = float(mult.max() - mult.min()) if len(mult) else 0.0
    return MultiplierReport(th, mult, spread, float(threshold))


@dataclass(frozen=True)
class HolonomyReport:
    theta_a: float
    theta_b: float
    x: np.ndarray             # finest starting grid at theta_a
    hx: np.ndarray            # images at theta_b (lifted)
    ratios: np.ndarray        # local expansion ratios on the finest grid
    n_points: tuple           # grid sizes per refinement
    log_ratio_var: np.ndarray  # variance of log-ratios per refinement

    @property
    def growing(self) -> bool:
        v = self.log_ratio_var
        return bool(len(v) > 1 and np.all(np.diff(v) > 0))


def holonomy_probe(cf: CenterField, theta_a: float, theta_b: float, n_points: int = 64,
                   refinements: int = 3, step: float = 1 / 256) -> HolonomyReport:
    """Slide equispaced points from ``theta_a`` to ``theta_b`` along center leaves.

    At each refinement (``n_points * 2**r`` points) the local expansion ratios
    ``(H(x_{i+1}) - H(x_i)) / (x_{i+1} - x_i)`` are formed; a variance of
    their logarithms that keeps growing under refinement is the signature of
    a singular holonomy.  Heuristic: it cannot certify anything by itself.
    """
    span = float(theta_b - theta_a)
    n_steps = max(2, int(math.ceil(abs(span) / step)))
    variances, sizes = [], []
    for r in range(refinements):
        n = n_points * 2 ** r
        x = np.arange(n) / n
        _, xs, _ = _rk4_leaves(cf, x, theta_a, span, n_steps)
        hx = xs[:, -1]
        gaps = np.diff(np.append(hx, hx[0] + 1.0))
        ratios = gaps * n
        if np.any(ratios <= 0):
            raise FloatingPointError("holonomy is not monotone: leaves crossed")
        variances.append(float(np.var(np.log(ratios))))
        sizes.append(n)
    return HolonomyReport(float(theta_a), float(theta_b), x, hx, ratios, tuple(sizes),
                          np.array(variances))
