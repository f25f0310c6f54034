"""The diffusion ``d Theta = bar omega dt + sqrt(eps) Var dB`` and its companions:
Euler-Maruyama ensembles, the Gaussian first-order law, the closed-form
stationary density, and the rate function by Hamiltonian shooting.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.integrate import cumulative_simpson, simpson
from scipy.special import logsumexp

from .averaged import ZeroSet, solve_averaged, variance_curve
from .transfer import FieldInterpolant, SlowFields

__all__ = [
    "CHUNK",
    "chunk_rng",
    "SdeSpec",
    "EnsembleSamples",
    "em_paths",
    "gaussian_process_law",
    "StationaryDensity",
    "stationary_density",
    "adjoint_generator_residual",
    "GaussianSpec",
    "metastable_mixture",
    "RateFunctionResult",
    "rate_function",
    "shooting_jacobian",
]

#: Paths per RNG stream.  Fixed so results do not depend on the worker count.
CHUNK = 8192


def chunk_rng(seed: int, tag: int, chunk: int) -> np.random.Generator:
    """Independent counter-based stream number ``chunk`` for experiment ``tag``."""
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(int(tag), int(chunk)))
    return np.random.Generator(np.random.Philox(ss))


class _PeriodicCubic:
    """Fast evaluation of a periodic ``CubicSpline`` on the equispaced knots ``j/m``."""

    def __init__(self, spline, m: int):
        self.c = np.ascontiguousarray(spline.c)  # (4, m), highest power first
        self.m = m

    def __call__(self, theta):
        u = np.asarray(theta, dtype=float) * self.m
        j = np.floor(u)
        dx = (u - j) / self.m
        j = j.astype(np.int64) % self.m
        c = self.c
        return ((c[0, j] * dx + c[1, j]) * dx + c[2, j]) * dx + c[3, j]


@dataclass(frozen=True)
class SdeSpec:
    """Parameters of an Euler-Maruyama experiment.

    ``step`` defaults to ``epsilon / 10``; it may not exceed ``epsilon``.
    """

    fields: SlowFields
    epsilon: float
    step: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.step is None:
            object.__setattr__(self, "step", self.epsilon / 10.0)
        if not 0 < self.step <= self.epsilon * (1 + 1e-12):
            raise ValueError("step must lie in (0, epsilon]")
        if np.min(self.fields.var2) <= 0:
            raise ValueError("Var^2 must be strictly positive on the grid")


@dataclass(frozen=True)
class EnsembleSamples:
    """Samples of the lifted slow variable (or of rescaled deviations) at time ``t``."""

    values: np.ndarray
    t: float
    epsilon: float
    seed: int | None = None
    kind: str = "theta"

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite sample values")

    def __len__(self):
        return len(self.values)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def var(self) -> float:
        return float(np.var(self.values, ddof=1))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([self.kind])
            for v in self.values:
                w.writerow([repr(float(v))])


def _em_chunk(wb, sg, theta0, n, n_steps, h, sqrt_eps, noise, rng, snap_steps, block=64):
    th = np.full(n, float(theta0))
    snaps = {}
    sh = math.sqrt(h)
    k = 0
    if 0 in snap_steps:
        snaps[0] = th.copy()
    while k < n_steps:
        b = min(block, n_steps - k)
        z = rng.standard_normal((b, n)) if noise else None
        for i in range(b):
            drift = wb(th)
            if noise:
                s = np.sqrt(np.maximum(sg(th), 0.0))
                th = th + h * drift + (sqrt_eps * sh) * s * z[i]
            else:
                th = th + h * drift
            k += 1
            if k in snap_steps:
                snaps[k] = th.copy()
    return th, snaps


def em_paths(spec: SdeSpec, theta0: float, T: float, n_paths: int, *,
             snapshot_times: Sequence[float] = (), noise: bool = True,
             workers: int = 1, tag: int = 1):
    """Euler-Maruyama endpoints of ``n_paths`` independent paths on ``[0, T]``.

    Paths are grouped in blocks of :data:`CHUNK`; block ``c`` draws from
    :func:`chunk_rng` ``(seed, tag, c)``, so the output depends only on the
    seed and never on ``workers``.

    Returns
    -------
    EnsembleSamples, or ``(EnsembleSamples, dict)`` when snapshot times are
    requested; the dict maps each time to an :class:`EnsembleSamples`.
    """
    n_steps = int(round(T / spec.step))
    if abs(n_steps * spec.step - T) > 1e-9 * max(1.0, T):
        raise ValueError("T must be a whole number of steps")
    snap_steps = {int(round(t / spec.step)): float(t) for t in snapshot_times}
    spl = spec.fields.interpolant()
    wb = _PeriodicCubic(spl._wb, spec.fields.m)
    sg = _PeriodicCubic(spl._v2, spec.fields.m)
    sizes = [min(CHUNK, n_paths - c0) for c0 in range(0, n_paths, CHUNK)]

    def run(c):
        return _em_chunk(wb, sg, theta0, sizes[c], n_steps, spec.step, math.sqrt(spec.epsilon),
                         noise, chunk_rng(spec.seed, tag, c), snap_steps)

    if workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, range(len(sizes))))
    else:
        parts = [run(c) for c in range(len(sizes))]
    end = EnsembleSamples(np.concatenate([p[0] for p in parts]), float(T), spec.epsilon,
                          spec.seed)
    if not snapshot_times:
        return end
    snaps = {t: EnsembleSamples(np.concatenate([p[1][k] for p in parts]), t, spec.epsilon,
                                spec.seed) for k, t in snap_steps.items()}
    return end, snaps


def gaussian_process_law(fields, theta0: float, t: float, epsilon: float,
                         step: float = 1e-3) -> tuple[float, float]:
    """Mean and variance of ``theta_bar(t) + sqrt(eps) Delta(t)``: ``(theta_bar, eps Var_t^2)``."""
    if t < 0:
        raise ValueError("t must be non-negative")
    if t == 0:
        return float(theta0), 0.0
    sol = solve_averaged(fields, theta0, t, step)
    return sol.final, float(epsilon) * variance_curve(fields, sol).final


# ----------------------------------------------------------------------------
# stationary density


@dataclass(frozen=True)
class StationaryDensity:
    """Invariant density of the diffusion on the grid ``j/m``.

    ``Omega`` is the lifted potential ``-2 int_0^theta bar omega / Var^2``.
    ``v_eps`` may overflow to ``+-inf`` for small ``epsilon``; ``log_abs_v``
    stays finite.  ``Z`` and ``log_Z`` are the normaliser of the form
    ``rho = Z Var^-2 e^{-Omega/eps} [1 + v int_0^theta e^{Omega/eps}]``.
    """

    theta_grid: np.ndarray
    Omega: np.ndarray
    Omega_1: float
    v_eps: float
    log_abs_v: float
    Z: float
    log_Z: float
    rho: np.ndarray
    epsilon: float
    var2: np.ndarray = field(repr=False, default=None)

    @property
    def m(self) -> int:
        return len(self.theta_grid)

    @property
    def mass(self) -> float:
        return float(np.sum(self.rho) / self.m)

    @property
    def flux(self) -> float:
        """Probability current ``bar omega rho - (eps/2) (Var^2 rho)'`` (constant in theta).

        It equals ``-(eps/2) Z v_eps``; its sign is the sign of
        ``int bar omega / Var^2``.
        """
        if self.v_eps == 0.0:
            return 0.0
        return -0.5 * self.epsilon * math.copysign(math.exp(self.log_Z + self.log_abs_v),
                                                   self.v_eps)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["theta", "Omega", "rho_eps"])
            for row in zip(self.theta_grid, self.Omega, self.rho):
                w.writerow([repr(float(v)) for v in row])


def _log_abs_expm1(a: float) -> float:
    if a == 0:
        return -math.inf
    if a > 0:
        return a + math.log(-math.expm1(-a))
    return math.log(-math.expm1(a))


def _simpson_weights(n: int) -> np.ndarray:
    """Composite Simpson weights on ``n + 1`` nodes (``n`` even), unit spacing."""
    w = np.ones(n + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w / 3.0


def _log_expm1_ratio(d):
    """``log((e^d - 1) / d)`` elementwise, stable for all real ``d``."""
    d = np.asarray(d, dtype=float)
    out = 0.5 * d  # series limit for tiny |d|
    big = np.abs(d) > 1e-6
    pos = big & (d > 0)
    neg = big & (d < 0)
    dp, dn = d[pos], d[neg]
    out[pos] = dp + np.log(-np.expm1(-dp)) - np.log(dp)
    out[neg] = np.log(-np.expm1(dn)) - np.log(-dn)
    return out


def stationary_density(fields: SlowFields, epsilon: float, m: int | None = None,
                       block: int = 256) -> StationaryDensity:
    """Invariant density from the integral representation.

    ``rho(theta) ~ Var^-2(theta) int_theta^{theta+1} exp((Omega(s) - Omega(theta))/eps) ds``.
    ``Omega`` comes from a cumulative Simpson rule.  The inner integral treats
    the exponent as linear on each grid cell and integrates the exponential
    exactly there, which stays accurate when ``e^{Omega/eps}`` varies faster
    than the grid.  Everything is kept in log-space (log-sum-exp), so
    exponents of size ``1/eps`` never reach ``exp``.  Cost is ``O(m^2)``, done
    in row blocks.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    fi = fields.interpolant()
    m = fields.m if m is None else int(m)
    if m % 2:
        raise ValueError("m must be even (Simpson rule)")
    th = np.arange(m) / m
    ext = np.arange(2 * m + 1) / m
    v2 = fi.var2(th)
    if np.min(v2) <= 0 or np.min(fi.var2(th + 0.5 / m)) <= 0:
        raise ValueError("Var^2 must be strictly positive")
    g = -2.0 * fi.omega_bar(ext[:m + 1]) / fi.var2(ext[:m + 1])
    Om1 = cumulative_simpson(g, dx=1.0 / m, initial=0.0)
    Omega_1 = float(Om1[-1])
    Om = np.concatenate([Om1[:-1], Om1 + Omega_1])  # lifted to [0, 2]
    E = Om / epsilon
    # log of the exact integral of exp(linear) over cell k, relative to E_k
    log_cell = _log_expm1_ratio(np.diff(E)) - math.log(m)
    log_inner = np.empty(m)
    cols = np.arange(m)
    for j0 in range(0, m, block):
        rows = np.arange(j0, min(j0 + block, m))
        idx = rows[:, None] + cols[None, :]
        log_inner[rows] = logsumexp(E[idx] + log_cell[idx] - E[rows][:, None], axis=1)
    log_rho = log_inner - np.log(v2)
    log_norm = logsumexp(log_rho) - math.log(m)
    rho = np.exp(log_rho - log_norm)
    # v_eps of the explicit form, with the same cell rule on [0, 1]
    log_int = float(logsumexp(E[:m] + log_cell[:m]))
    a = Omega_1 / epsilon
    if a == 0.0:
        v, log_abs_v = 0.0, -math.inf
    else:
        log_abs_v = _log_abs_expm1(a) - log_int
        v = math.copysign(math.exp(log_abs_v) if log_abs_v < 700 else math.inf, a)
    # Omega(0) = 0 and the bracket is 1 at theta = 0, so Z = rho(0) Var^2(0)
    log_Z = float(math.log(rho[0]) + math.log(v2[0]))
    return StationaryDensity(theta_grid=th, Omega=Om[:m], Omega_1=Omega_1, v_eps=v,
                             log_abs_v=log_abs_v, Z=math.exp(log_Z), log_Z=log_Z, rho=rho,
                             epsilon=float(epsilon), var2=v2)


def adjoint_generator_residual(fields, dens: StationaryDensity) -> float:
    """``||L' rho||_1 / ||rho||_1`` with periodic second-order differences.

    ``L' rho = -(bar omega rho)' + (eps/2) (Var^2 rho)''``.
    """
    fi = fields.interpolant() if isinstance(fields, SlowFields) else fields
    th = dens.theta_grid
    h = 1.0 / dens.m
    a = fi.omega_bar(th) * dens.rho
    b = fi.var2(th) * dens.rho
    da = (np.roll(a, -1) - np.roll(a, 1)) / (2 * h)
    d2b = (np.roll(b, -1) - 2 * b + np.roll(b, 1)) / h**2
    r = -da + 0.5 * dens.epsilon * d2b
    return float(np.sum(np.abs(r)) / np.sum(np.abs(dens.rho)))


# ----------------------------------------------------------------------------
# metastable Gaussians


class GaussianSpec(NamedTuple):
    mean: float
    var: float
    weight: float | None = None


def metastable_mixture(zeros: ZeroSet, fields, epsilon: float) -> list:
    """One Gaussian per stable zero, variance ``eps Var^2 / (2 |bar omega'|)``.

    Weights are left unset.
    """
    sinks = zeros.stable
    if not sinks:
        raise ValueError("no stable zeros (rotation regime): use stationary_density")
    fi = fields.interpolant() if isinstance(fields, SlowFields) else fields
    return [GaussianSpec(z.theta, float(epsilon) * float(fi.var2(z.theta)) / (2 * abs(z.slope)))
            for z in sinks]


# ----------------------------------------------------------------------------
# rate function


@dataclass(frozen=True)
class RateFunctionResult:
    """``V(t, y)``; entries where shooting failed are NaN (and listed in ``failed``)."""

    t: float
    y_grid: np.ndarray
    V: np.ndarray
    shoot_p0: np.ndarray
    theta0: float
    failed: tuple = ()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["y", "V", "p0"])
            for row in zip(self.y_grid, self.V, self.shoot_p0):
                w.writerow([repr(float(v)) for v in row])


class _ScalarJet:
    """Value and two derivatives of ``bar omega`` and ``Var^2`` at a scalar lift.

    Plain-float Horner evaluation of the periodic spline pieces; the shooting
    loop calls this millions of times, where NumPy call overhead dominates.
    """

    def __init__(self, fi: FieldInterpolant):
        self.m = fi.fields.m
        self.w = [tuple(map(float, col)) for col in fi._wb.c.T]
        self.v = [tuple(map(float, col)) for col in fi._v2.c.T]

    def __call__(self, phi):
        u = phi * self.m
        j = math.floor(u)
        d = (u - j) / self.m
        j %= self.m
        a3, a2, a1, a0 = self.w[j]
        b3, b2, b1, b0 = self.v[j]
        return (((a3 * d + a2) * d + a1) * d + a0, (3 * a3 * d + 2 * a2) * d + a1,
                6 * a3 * d + 2 * a2,
                ((b3 * d + b2) * d + b1) * d + b0, (3 * b3 * d + 2 * b2) * d + b1,
                6 * b3 * d + 2 * b2)


def _hamilton_rhs(jet, phi, p, xi, eta):
    """Right side for ``(phi, p, dphi/dp0, dp/dp0, V)``."""
    wb, dwb, d2wb, v2, dv2, d2v2 = jet(phi)
    return (0.5 * v2 * p + wb,
            -0.25 * dv2 * p * p - dwb * p,
            # variational equation
            (0.5 * dv2 * p + dwb) * xi + 0.5 * v2 * eta,
            (-0.25 * d2v2 * p * p - d2wb * p) * xi + (-0.5 * dv2 * p - dwb) * eta,
            0.25 * v2 * p * p)


def _shoot(fi, theta0, p0, t, step):
    jet = fi if isinstance(fi, _ScalarJet) else _ScalarJet(fi)
    n = max(1, int(math.ceil(t / step - 1e-9)))
    h = t / n
    z = (float(theta0), float(p0), 0.0, 1.0, 0.0)
    try:
        return _rk4_run(jet, z, h, n)
    except (OverflowError, ValueError):  # blow-up: inf reached floor()
        return (math.nan,) * 5


def _rk4_run(jet, z, h, n):
    for _ in range(n):
        k1 = _hamilton_rhs(jet, *z[:4])
        z2 = [a + 0.5 * h * k for a, k in zip(z, k1)]
        k2 = _hamilton_rhs(jet, *z2[:4])
        z3 = [a + 0.5 * h * k for a, k in zip(z, k2)]
        k3 = _hamilton_rhs(jet, *z3[:4])
        z4 = [a + h * k for a, k in zip(z, k3)]
        k4 = _hamilton_rhs(jet, *z4[:4])
        z = tuple(a + h * (b1 + 2 * b2 + 2 * b3 + b4) / 6.0
                  for a, b1, b2, b3, b4 in zip(z, k1, k2, k3, k4))
        if not math.isfinite(z[0]) or abs(z[1]) > 1e150:
            return (math.nan,) * 5
    return z


def _xi_closed_form(fi, theta0, t, step):
    sol = solve_averaged(fi, theta0, t, min(step, 1e-2))
    vt2 = variance_curve(fi, sol).final
    a = fi.omega_bar_prime(sol.values)
    n = len(sol.t_grid) - 1
    if n % 2 == 0 and np.allclose(np.diff(sol.t_grid), sol.step):
        A = float(np.dot(_simpson_weights(n), a) * sol.step)
    else:
        A = float(simpson(a, x=sol.t_grid))
    return 0.5 * vt2 * math.exp(-A), vt2


def shooting_jacobian(fields, theta0: float, t: float, step: float = 1e-3):
    """``d phi(t) / d p0`` at ``p0 = 0`` from the variational equation, and the
    closed form ``xi(t) = (Var_t^2 / 2) exp(-int_0^t bar omega')``."""
    fi = fields.interpolant() if isinstance(fields, SlowFields) else fields
    z = _shoot(fi, theta0, 0.0, t, step)
    xi, _ = _xi_closed_form(fi, theta0, t, step)
    return float(z[2]), xi


def rate_function(fields, theta0: float, t: float, y_grid, *, step: float = 1e-3,
                  tol: float = 1e-9, max_newton: int = 50) -> RateFunctionResult:
    """``V(t, y) = inf int_0^t (phi' - bar omega(phi))^2 / Var^2(phi) ds`` by shooting.

    For each ``y`` the Hamiltonian system with ``H = Var^2 p^2 / 4 + p bar omega``
    is integrated from ``(theta0, p0)`` and ``p0`` is Newton-corrected until
    ``phi(t) = theta_bar(t) + y`` within ``tol``.  The first guess is
    ``p0 = y / xi(t)``; later ``y`` of the same sign are continued from their
    neighbour, halving the increment when Newton fails.  Along the minimiser
    ``V = int p^2 Var^2 / 4 ds``.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    fi = fields.interpolant() if isinstance(fields, SlowFields) else fields
    y_grid = np.asarray(y_grid, dtype=float)
    jet = _ScalarJet(fi)
    target0 = _shoot(jet, theta0, 0.0, t, step)[0]
    xi, _ = _xi_closed_form(fi, theta0, t, step)
    V = np.full(len(y_grid), np.nan)
    P = np.full(len(y_grid), np.nan)
    failed = []

    def newton(y, p0):
        for _ in range(max_newton):
            z = _shoot(jet, theta0, p0, t, step)
            F = z[0] - target0 - y
            if abs(F) <= tol:
                return p0, z
            if not np.isfinite(F) or not np.isfinite(z[2]) or z[2] == 0.0:
                return None
            p0 = p0 - F / z[2]
        return None

    order = np.argsort(np.abs(y_grid), kind="stable")
    last = {1.0: (0.0, 0.0), -1.0: (0.0, 0.0)}  # sign -> (y, p0) of the last success
    for i in order:
        y = y_grid[i]
        if y == 0.0:
            V[i], P[i] = 0.0, 0.0
            continue
        sgn = math.copysign(1.0, y)
        y_prev, p_prev = last[sgn]
        # continuation from the previous success, halving the increment on failure
        dy, sol = y - y_prev, None
        for _ in range(12):
            ya, pa, ok = y_prev, p_prev, True
            while ok and ya != y:
                yb = y if abs(y - ya) <= abs(dy) * (1 + 1e-12) else ya + dy
                guess = yb / xi if ya == 0.0 else pa * yb / ya
                res = newton(yb, guess)
                if res is None:
                    ok = False
                else:
                    ya, (pa, sol) = yb, res
            if ok:
                break
            y_prev, p_prev = ya, pa
            dy /= 2
        if sol is not None and ya == y:
            V[i], P[i] = sol[4], pa
            last[sgn] = (y, pa)
        else:
            failed.append(float(y))
    return RateFunctionResult(t=float(t), y_grid=y_grid, V=V, shoot_p0=P,
                              theta0=float(theta0), failed=tuple(failed))
