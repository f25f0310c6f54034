"""Center direction and central Lyapunov exponent.

The center direction at ``p`` is spanned by ``(s(p), 1)`` where ``s`` is the
fixed point of the graph transform

    s(p) = Xi_p(s(F p)) = ((1 + eps w_t) s(Fp) - f_t) / (f_x - eps w_x s(Fp))

(``w = omega``, subscripts are partial derivatives at ``p``).  One step along
the center direction stretches it by ``1 + eps * psi`` with
``psi = w_x * s + w_t``.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .systems import FastSlowSystem, step, step_lifted, wrap
from .transfer import build_ulam, midpoints, srb_density

__all__ = [
    "ContractionError",
    "SeriesWarning",
    "CenterField",
    "LyapunovEstimate",
    "graph_transform",
    "frozen_center_slope",
    "center_slope",
    "invariant_radius",
    "center_field",
    "chi_c_orbit",
    "chi_c_formula",
    "psi_star_field",
    "psi_bar_star",
    "mostly_contracting",
]


class ContractionError(RuntimeError):
    """The graph transform is not a contraction for this system."""


class SeriesWarning(UserWarning):
    """The center-slope series had not decayed below tolerance at the depth cap."""


def _xi_coefficients(sys: FastSlowSystem, x, theta):
    eps = sys.epsilon
    a = 1.0 + eps * sys.omega_theta(x, theta)
    b = sys.f_theta(x, theta)
    c = sys.f_x(x, theta)
    d = eps * sys.omega_x(x, theta)
    return a, b, c, d


def graph_transform(sys: FastSlowSystem, x, theta, s_image):
    """``Xi_p(s)``: slope at ``p`` whose image has slope ``s_image`` at ``F(p)``."""
    a, b, c, d = _xi_coefficients(sys, x, theta)
    return (a * s_image - b) / (c - d * s_image)


def frozen_center_slope(sys: FastSlowSystem, x, theta, tol: float = 1e-14,
                        max_depth: int = 200) -> np.ndarray:
    """Center slope of the frozen system (``eps = 0``) by direct summation.

    ``s_*(x, theta) = -sum_k f_theta(x_k) / prod_{j<=k} f_x(x_j)`` along the
    orbit ``x_k`` of ``f(., theta)``; summation stops once every term is below
    ``tol`` (or at ``max_depth``).
    """
    x = np.array(x, dtype=float, copy=True)
    theta = np.broadcast_to(np.asarray(theta, dtype=float), x.shape)
    total = np.zeros(np.broadcast(x, theta).shape)
    prod = np.ones_like(total)
    for _ in range(max_depth):
        prod = prod * sys.f_x(x, theta)
        term = sys.f_theta(x, theta) / prod
        total -= term
        if np.max(np.abs(term), initial=0.0) < tol:
            break
        x = wrap(sys.f(x, theta))
    else:
        warnings.warn(f"center-slope series still at {np.max(np.abs(term)):.3g} after "
                      f"{max_depth} terms", SeriesWarning, stacklevel=2)
    return total


def center_slope(sys: FastSlowSystem, x, theta, depth: int = 60, seed=None) -> np.ndarray:
    """Center slope at arbitrary points by recursion along the true orbit.

    The orbit ``p_0 .. p_depth`` is computed forward, the slope at ``p_depth``
    is taken from ``seed`` (a :class:`CenterField`, a callable, or 0) and the
    graph transform is applied backwards ``depth`` times.  The seed error is
    damped by the product of the contraction factors along the orbit.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    theta = np.broadcast_to(np.atleast_1d(np.asarray(theta, dtype=float)), x.shape).copy()
    xs = [x]
    ts = [theta]
    for _ in range(depth):
        x, theta = step(sys, x, theta)
        xs.append(x)
        ts.append(theta)
    if seed is None:
        s = np.zeros_like(x)
    elif isinstance(seed, CenterField):
        s = seed.interpolate(x, theta)
    else:
        s = np.asarray(seed(x, theta), dtype=float) * np.ones_like(x)
    for k in range(depth - 1, -1, -1):
        s = graph_transform(sys, xs[k], ts[k], s)
    return s


def invariant_radius(sys: FastSlowSystem, grid: int = 512) -> tuple[float, float]:
    """Radius ``K`` with ``Xi_p([-K, K]) inside [-K, K]`` and the bound on ``|Xi_p'|`` there.

    Suprema are sampled on a ``grid x grid`` lattice.  Raises
    :class:`ContractionError` if no such interval exists.
    """
    xs = (np.arange(grid) + 0.5) / grid
    X, T = np.meshgrid(xs, xs, indexing="ij")
    eps = sys.epsilon
    a = float(np.max(np.abs(sys.omega_theta(X, T))))
    b = float(np.max(np.abs(sys.f_theta(X, T))))
    c = float(np.max(np.abs(sys.omega_x(X, T))))
    lam = float(np.min(sys.f_x(X, T)))
    gap = lam - 1.0 - eps * a
    if gap <= 0:
        raise ContractionError(f"min f_x = {lam:.4g}: no invariant cone for the graph transform")
    if eps * c == 0:
        K = b / gap
    else:
        disc = gap * gap - 4.0 * eps * c * b
        if disc < 0:
            raise ContractionError("epsilon too large: no invariant interval of slopes")
        K = (gap - math.sqrt(disc)) / (2.0 * eps * c)
    # Xi'(s) = (A C - B D) / (C - D s)^2
    A, B, C, D = _xi_coefficients(sys, X, T)
    denom = np.minimum(np.abs(C - np.abs(D) * K), np.abs(C - D * K))
    sig = float(np.max(np.abs(A * C - B * D) / denom ** 2))
    return float(K), sig


@dataclass(frozen=True)
class CenterField:
    """Center slope on the periodic grid ``(i / n_x, j / n_theta)``."""

    grid: np.ndarray        # shape (n_x, n_theta)
    K: float
    sigma: float            # largest observed ratio of successive sweep changes
    sigma_bound: float      # sup |Xi'| over [-K, K]
    iterations: int
    residual: float         # sup |Xi(s o F) - s| on the grid after convergence
    epsilon: float
    system: FastSlowSystem
    refine_depth: int = 40

    @property
    def n_x(self) -> int:
        return self.grid.shape[0]

    @property
    def n_theta(self) -> int:
        return self.grid.shape[1]

    def interpolate(self, x, theta):
        """Periodic bilinear interpolation of the grid values."""
        return _bilinear(self.grid, x, theta)

    def slope(self, x, theta, depth: int | None = None):
        """Slope at arbitrary points: ``depth`` exact transform steps seeded by the grid."""
        d = self.refine_depth if depth is None else depth
        x = np.asarray(x, dtype=float)
        out = center_slope(self.system, x.ravel(), np.broadcast_to(theta, x.shape).ravel(),
                           depth=d, seed=self)
        return out.reshape(x.shape) if x.ndim else float(out[0])

    __call__ = slope


def _bilinear(grid, x, theta):
    n_x, n_t = grid.shape
    u = wrap(x) * n_x
    v = wrap(theta) * n_t
    i0 = np.floor(u).astype(np.int64)
    j0 = np.floor(v).astype(np.int64)
    fu = u - i0
    fv = v - j0
    i0 %= n_x
    j0 %= n_t
    i1 = (i0 + 1) % n_x
    j1 = (j0 + 1) % n_t
    return ((1 - fu) * (1 - fv) * grid[i0, j0] + fu * (1 - fv) * grid[i1, j0]
            + (1 - fu) * fv * grid[i0, j1] + fu * fv * grid[i1, j1])


def _bilinear_matrix(n_x, n_t, x, theta):
    u = wrap(x) * n_x
    v = wrap(theta) * n_t
    i0 = np.floor(u).astype(np.int64)
    j0 = np.floor(v).astype(np.int64)
    fu = u - i0
    fv = v - j0
    i0 %= n_x
    j0 %= n_t
    i1 = (i0 + 1) % n_x
    j1 = (j0 + 1) % n_t
    n = x.size
    rows = np.tile(np.arange(n), 4)
    cols = np.concatenate([i0 * n_t + j0, i1 * n_t + j0, i0 * n_t + j1, i1 * n_t + j1])
    vals = np.concatenate([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n_x * n_t))


def center_field(sys: FastSlowSystem, n_x: int = 512, n_theta: int = 256, tol: float = 1e-10,
                 max_sweeps: int = 5000, refine_depth: int = 40) -> CenterField:
    """Iterate ``s -> Xi_p(s o F)`` on the grid from ``s = 0`` until the sup-change is ``<= tol``.

    Raises :class:`ContractionError` when the sup-change fails to shrink for
    five consecutive sweeps or no invariant slope interval exists.
    """
    K, sig_bound = invariant_radius(sys)
    xs = np.arange(n_x) / n_x
    ts = np.arange(n_theta) / n_theta
    X, T = np.meshgrid(xs, ts, indexing="ij")
    X, T = X.ravel(), T.ravel()
    FX, FT = step(sys, X, T)
    W = _bilinear_matrix(n_x, n_theta, FX, FT)
    a, b, c, d = _xi_coefficients(sys, X, T)
    s = np.zeros(X.size)
    prev = None
    ratios = []
    bad = 0
    for it in range(1, max_sweeps + 1):
        si = W @ s
        s_new = (a * si - b) / (c - d * si)
        delta = float(np.max(np.abs(s_new - s)))
        s = s_new
        if prev is not None and prev > 1e-13:
            r = delta / prev
            ratios.append(r)
            bad = bad + 1 if r >= 1.0 else 0
            if bad >= 5:
                raise ContractionError(
                    f"graph transform is not contracting (sweep-change ratio {r:.3g} "
                    f"for 5 consecutive sweeps)")
        prev = delta
        if delta <= tol:
            break
    else:
        raise ContractionError(f"no convergence after {max_sweeps} sweeps (change {delta:.3g})")
    si = W @ s
    residual = float(np.max(np.abs((a * si - b) / (c - d * si) - s)))
    sigma = float(max(ratios[1:], default=ratios[0] if ratios else 0.0))
    if sigma >= 1.0:
        raise ContractionError(f"measured contraction {sigma:.3g} >= 1")
    grid = s.reshape(n_x, n_theta)
    return CenterField(grid=grid, K=K, sigma=sigma, sigma_bound=sig_bound, iterations=it,
                       residual=residual, epsilon=sys.epsilon, system=sys,
                       refine_depth=refine_depth)


@dataclass(frozen=True)
class LyapunovEstimate:
    chi_c: float           # per-step exponent
    stderr: float
    n_steps: int
    n_orbits: int
    epsilon: float

    @property
    def scaled(self) -> float:
        """``chi_c / eps`` (the exponent per unit of slow time)."""
        return self.chi_c / self.epsilon if self.epsilon > 0 else 0.0

    @property
    def scaled_stderr(self) -> float:
        return self.stderr / self.epsilon if self.epsilon > 0 else 0.0


def chi_c_orbit(sys: FastSlowSystem, p0, n_steps: int, cf: CenterField | None = None, *,
                burn_in: int | None = None, lookahead: int = 60,
                block: int = 10_000) -> LyapunovEstimate:
    """Birkhoff average of ``log(1 + eps psi)`` along one or many orbits.

    ``p0`` is a point or an ``(n_orbits, 2)`` array.  The center slope at each
    orbit point comes from the backward recursion along the orbit itself with
    ``lookahead`` steps of slack, seeded by ``cf`` when given (else by 0).  The
    standard error is computed from means over blocks of ``block`` steps.
    """
    p0 = np.atleast_2d(np.asarray(p0, dtype=float))
    n_orbits = p0.shape[0]
    eps = sys.epsilon
    n_steps = int(n_steps)
    if eps == 0:
        return LyapunovEstimate(0.0, 0.0, n_steps, n_orbits, 0.0)
    if burn_in is None:
        burn_in = int(min(10.0 / eps, 1e5))
    x, th = wrap(p0[:, 0]), p0[:, 1].copy()
    for _ in range(burn_in):
        x, th = step_lifted(sys, x, th)
    seed = cf if cf is not None else None
    block = max(1, min(block, n_steps))
    L = int(lookahead)
    # ring of upcoming orbit points: rows 0..block+L-1
    ahead_x = [x]
    ahead_t = [th]
    for _ in range(L):
        x, th = step_lifted(sys, x, th)
        ahead_x.append(x)
        ahead_t.append(th)
    block_means = []
    done = 0
    while done < n_steps:
        nb = min(block, n_steps - done)
        while len(ahead_x) < nb + L + 1:
            x, th = step_lifted(sys, ahead_x[-1], ahead_t[-1])
            ahead_x.append(x)
            ahead_t.append(th)
        X = np.array(ahead_x[:nb + L + 1])
        T = np.array(ahead_t[:nb + L + 1])
        if seed is None:
            s = np.zeros(n_orbits)
        else:
            s = seed.interpolate(X[-1], T[-1])
        acc = np.zeros(n_orbits)
        for k in range(nb + L - 1, -1, -1):
            s = graph_transform(sys, X[k], T[k], s)
            if k < nb:
                psi = sys.omega_x(X[k], T[k]) * s + sys.omega_theta(X[k], T[k])
                acc += np.log1p(eps * psi)
        block_means.append(acc / nb)
        ahead_x = ahead_x[nb:]
        ahead_t = ahead_t[nb:]
        done += nb
    means = np.array(block_means)       # (n_blocks, n_orbits)
    flat = means.ravel()
    chi = float(np.mean(flat))
    stderr = float(np.std(flat, ddof=1) / math.sqrt(flat.size)) if flat.size > 1 else float("nan")
    return LyapunovEstimate(chi_c=chi, stderr=stderr, n_steps=n_steps, n_orbits=n_orbits,
                            epsilon=eps)


def psi_bar_star(sys: FastSlowSystem, theta, n_bins: int = 4096, tol: float = 1e-10) -> np.ndarray:
    """``mu_theta(omega_x * s_* + omega_theta)`` for each ``theta``."""
    out = []
    x = midpoints(n_bins)
    for th in np.atleast_1d(theta):
        dens = srb_density(build_ulam(sys, th, n_bins))
        s = frozen_center_slope(sys, x, th, tol=tol)
        out.append(dens.expect(sys.omega_x(x, th) * s + sys.omega_theta(x, th)))
    return np.array(out)


def chi_c_formula(sys: FastSlowSystem, zeros, weights: Sequence[float] | None = None,
                  n_bins: int = 4096, tol: float = 1e-10) -> float:
    """Leading-order ``chi_c / eps`` from the sinks of the averaged drift.

    ``sum_j c_j mu_j(omega_theta + omega_x * s_*)`` with ``mu_j`` the invariant
    density of ``f(., theta_j)`` at the stable zero ``theta_j`` and ``s_*`` the
    frozen center slope, whose series is summed until terms drop below ``tol``.
    """
    sinks = [z.theta for z in zeros if z.kind == "stable"] if not _is_float_list(zeros) \
        else list(zeros)
    if not sinks:
        raise ValueError("no stable zeros: the formula needs at least one sink")
    if weights is None:
        weights = np.full(len(sinks), 1.0 / len(sinks))
    weights = np.asarray(weights, dtype=float)
    if len(weights) != len(sinks) or abs(weights.sum() - 1.0) > 1e-9 or np.any(weights < 0):
        raise ValueError("weights must be non-negative, one per sink, summing to 1")
    vals = psi_bar_star(sys, sinks, n_bins=n_bins, tol=tol)
    return float(np.dot(weights, vals))


def _is_float_list(zeros):
    try:
        return all(isinstance(z, (int, float, np.floating)) for z in zeros)
    except TypeError:
        return False


def psi_star_field(sys: FastSlowSystem, cf: CenterField) -> np.ndarray:
    """``psi = omega_x * s + omega_theta`` on the nodes of ``cf``."""
    xs = np.arange(cf.n_x) / cf.n_x
    ts = np.arange(cf.n_theta) / cf.n_theta
    X, T = np.meshgrid(xs, ts, indexing="ij")
    return sys.omega_x(X, T) * cf.grid + sys.omega_theta(X, T)


def mostly_contracting(psi_at_sinks) -> bool:
    """True when ``bar psi_*`` is negative at every sink."""
    vals = np.atleast_1d(np.asarray(psi_at_sinks, dtype=float))
    return bool(vals.size and np.max(vals) < 0)
