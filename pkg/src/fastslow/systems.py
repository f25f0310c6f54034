"""Fast-slow maps on the 2-torus and orbit bookkeeping.

A system is the map

    F_eps(x, theta) = (f(x, theta), theta + eps * omega(x, theta))  mod 1

with ``d_x f >= lambda_min``.  All evaluators are vectorised: they accept
NumPy arrays (or scalars) and broadcast.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np

__all__ = [
    "NonExpandingWarning",
    "PhasePoint",
    "FastSlowSystem",
    "Trajectory",
    "wrap",
    "example_family",
    "skew_product",
    "step",
    "iterate",
    "theta_process",
    "MAX_ITERATIONS",
]

TWO_PI = 2.0 * math.pi

#: Hard cap on the number of map applications in a single :func:`iterate` call.
MAX_ITERATIONS = 50_000_000

Evaluator = Callable[[np.ndarray, np.ndarray], np.ndarray]


class NonExpandingWarning(UserWarning):
    """The analytic lower bound on ``d_x f`` does not exceed 1."""


def wrap(value):
    """Reduce angles to ``[0, 1)``.

    ``v - floor(v)`` can round up to exactly 1.0 for tiny negative inputs;
    those are folded back to 0.
    """
    v = np.asarray(value, dtype=float)
    out = v - np.floor(v)
    out = np.where(out >= 1.0, 0.0, out)
    if out.ndim == 0:
        return float(out)
    return out


class PhasePoint(NamedTuple):
    x: float
    theta: float


def _zero(x, theta):
    return np.zeros(np.broadcast(np.asarray(x), np.asarray(theta)).shape)


@dataclass(frozen=True)
class FastSlowSystem:
    """Immutable container for the map and its first partial derivatives.

    Parameters
    ----------
    f, omega : callable
        Fast map and slow drift, ``(x, theta) -> array``.
    f_x, f_theta, omega_x, omega_theta : callable
        Partial derivatives of ``f`` and ``omega``.
    epsilon : float
        Slow-coupling strength (``>= 0``).
    lambda_min : float
        Certified lower bound on ``f_x``.
    degree : int
        Topological degree of ``f(., theta)``; needed by the conjugacy code.
    name : str
        Label used in reports.
    params : dict
        Parameters the system was built from (for configs and reports).
    """

    f: Evaluator
    omega: Evaluator
    f_x: Evaluator
    f_theta: Evaluator
    omega_x: Evaluator
    omega_theta: Evaluator
    epsilon: float = 0.0
    lambda_min: float = 1.0
    degree: int = 2
    name: str = "custom"
    params: dict = field(default_factory=dict)
    dither: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")

    @classmethod
    def from_callables(cls, f, omega, f_x, f_theta, omega_x, omega_theta, *,
                       epsilon=0.0, lambda_min=None, degree=2, name="custom",
                       validate=True, grid=256, fd_tol=1e-6):
        """Build a system from user closures, optionally checking them.

        With ``validate`` the analytic partials are compared against central
        differences on a ``grid x grid`` lattice and ``lambda_min`` (sampled
        when not given) is checked against ``f_x``.
        """
        sys = cls(f=f, omega=omega, f_x=f_x, f_theta=f_theta, omega_x=omega_x,
                  omega_theta=omega_theta, epsilon=float(epsilon),
                  lambda_min=1.0 if lambda_min is None else float(lambda_min),
                  degree=int(degree), name=name)
        if validate:
            check_derivatives(sys, grid=grid, tol=fd_tol)
        sampled = sampled_min_expansion(sys, grid=grid)
        if lambda_min is None:
            sys = replace(sys, lambda_min=sampled)
        elif sampled < lambda_min:
            raise ValueError(
                f"f_x falls to {sampled:.6g} below lambda_min={lambda_min:.6g}")
        if sys.lambda_min <= 1.0:
            warnings.warn(f"{name}: f_x is not bounded below by a constant > 1 "
                          f"(min {sys.lambda_min:.4g})", NonExpandingWarning,
                          stacklevel=2)
        return sys

    def with_epsilon(self, epsilon: float) -> "FastSlowSystem":
        params = dict(self.params)
        if "epsilon" in params:
            params["epsilon"] = float(epsilon)
        return replace(self, epsilon=float(epsilon), params=params)

    @property
    def is_skew(self) -> bool:
        return bool(self.params.get("skew", False))

    def omega_sup(self, grid: int = 256) -> float:
        xs = (np.arange(grid) + 0.5) / grid
        X, T = np.meshgrid(xs, xs, indexing="ij")
        return float(np.max(np.abs(self.omega(X, T))))

    def __call__(self, x, theta):
        return step(self, x, theta)


def check_derivatives(sys: FastSlowSystem, grid: int = 256, tol: float = 1e-6,
                      h: float = 1e-6) -> float:
    """Compare analytic partials with central differences; return max error."""
    xs = (np.arange(grid) + 0.5) / grid
    X, T = np.meshgrid(xs, xs, indexing="ij")
    worst = 0.0
    pairs = [(sys.f, sys.f_x, sys.f_theta), (sys.omega, sys.omega_x, sys.omega_theta)]
    for g, gx, gt in pairs:
        dx = (g(X + h, T) - g(X - h, T)) / (2 * h)
        dt = (g(X, T + h) - g(X, T - h)) / (2 * h)
        scale = max(1.0, float(np.max(np.abs(dx))), float(np.max(np.abs(dt))))
        err = max(np.max(np.abs(dx - gx(X, T))), np.max(np.abs(dt - gt(X, T)))) / scale
        worst = max(worst, float(err))
    if worst > tol:
        raise ValueError(f"derivative evaluators disagree with finite differences "
                         f"(relative error {worst:.3g} > {tol:.1g})")
    return worst


def sampled_min_expansion(sys: FastSlowSystem, grid: int = 1024) -> float:
    """Minimum of ``f_x`` over a ``grid x grid`` lattice of cell corners."""
    xs = np.arange(grid) / grid
    lo = np.inf
    # row blocks keep memory flat for large grids
    for start in range(0, grid, 256):
        T = xs[start:start + 256][:, None]
        lo = min(lo, float(np.min(sys.f_x(xs[None, :], T))))
    return lo


def example_family(ell: int = 2, alpha: float = 0.05, beta: float = 0.1,
                   epsilon: float = 0.0, drift_shift: float = 0.0,
                   require_diffeo: bool = True) -> FastSlowSystem:
    """Expanding map with a drift sink at ``theta = 0``.

    ``f = ell*x + sin(2 pi theta) * (alpha sin(2 pi x) + beta sin(2 pi ell x))``
    and ``omega = cos(2 pi x) + c`` with ``c = drift_shift`` (default 0; a
    large enough shift removes the zeros of the averaged drift).

    Raises ``ValueError`` unless ``ell >= 2``, ``beta > 0`` and
    ``f(., theta)`` is a local diffeomorphism everywhere.  When the bound
    ``ell - 2 pi (|alpha| + ell beta)`` does not exceed 1 a
    :class:`NonExpandingWarning` is emitted: the map is then expanding only
    on part of the slow circle.  ``require_diffeo=False`` skips the
    local-diffeomorphism check, for computations confined to slow angles
    where ``f_x > 0`` (such as derivatives at ``theta = 0``).
    """
    ell = int(ell)
    if ell < 2:
        raise ValueError("ell must be an integer >= 2")
    if not beta > 0:
        raise ValueError("beta must be positive")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    bound = ell - TWO_PI * (abs(alpha) + ell * beta)

    def f(x, th):
        return ell * x + np.sin(TWO_PI * th) * (alpha * np.sin(TWO_PI * x)
                                                + beta * np.sin(TWO_PI * ell * x))

    def f_x(x, th):
        return ell + TWO_PI * np.sin(TWO_PI * th) * (
            alpha * np.cos(TWO_PI * x) + ell * beta * np.cos(TWO_PI * ell * x))

    def f_theta(x, th):
        return TWO_PI * np.cos(TWO_PI * th) * (alpha * np.sin(TWO_PI * x)
                                               + beta * np.sin(TWO_PI * ell * x))

    shift = float(drift_shift)

    def omega(x, th):
        return np.cos(TWO_PI * x) + shift + 0.0 * th

    def omega_x(x, th):
        return -TWO_PI * np.sin(TWO_PI * x) + 0.0 * th

    sys = FastSlowSystem(
        f=f, omega=omega, f_x=f_x, f_theta=f_theta, omega_x=omega_x,
        omega_theta=_zero, epsilon=float(epsilon), lambda_min=float(bound),
        degree=ell, name="example_family",
        params={"ell": ell, "alpha": float(alpha), "beta": float(beta),
                "epsilon": float(epsilon), "drift_shift": shift})
    if bound <= 0 and require_diffeo:
        # bound is attained at x = 0, theta = 3/4 when alpha >= 0
        if sampled_min_expansion(sys, grid=1024) <= 0:
            raise ValueError("f(., theta) is not a local diffeomorphism for these parameters")
    if bound <= 1:
        warnings.warn(
            f"example_family(ell={ell}, alpha={alpha}, beta={beta}): "
            f"ell - 2*pi*(|alpha|+ell*beta) = {bound:.4f} <= 1; f is not uniformly expanding",
            NonExpandingWarning, stacklevel=2)
    return sys


def skew_product(epsilon: float = 0.0, multiplier: int = 2, drift_shift: float = 0.0,
                 drift_amplitude: float = 1.0, fast_amplitude: float = 1.0) -> FastSlowSystem:
    """``f = m x``, ``omega = a cos(2 pi x) - A sin(2 pi theta) + c``.

    With ``a = A = 1, c = 0`` the averaged drift is ``-sin(2 pi theta)``: a
    sink at 0 and a source at 1/2.  ``|c| > A`` gives a rotation regime and
    ``a = 0`` removes the fluctuations altogether.
    """
    m = int(multiplier)
    if m < 2:
        raise ValueError("multiplier must be an integer >= 2")
    amp = float(drift_amplitude)
    c = float(drift_shift)
    a = float(fast_amplitude)

    def f(x, th):
        return m * x + 0.0 * th

    def f_x(x, th):
        return m + 0.0 * (x + th)

    def omega(x, th):
        return a * np.cos(TWO_PI * x) - amp * np.sin(TWO_PI * th) + c

    def omega_x(x, th):
        return -TWO_PI * a * np.sin(TWO_PI * x) + 0.0 * th

    def omega_theta(x, th):
        return -TWO_PI * amp * np.cos(TWO_PI * th) + 0.0 * x

    return FastSlowSystem(
        f=f, omega=omega, f_x=f_x, f_theta=_zero, omega_x=omega_x,
        omega_theta=omega_theta, epsilon=float(epsilon), lambda_min=float(m),
        degree=m, name="skew_product",
        params={"multiplier": m, "drift_shift": c, "drift_amplitude": amp,
                "fast_amplitude": a, "epsilon": float(epsilon), "skew": True},
        dither=True)


_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix(z):
    z = (z + np.uint64(0x9E3779B97F4A7C15)) & _MASK
    z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK
    z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK
    return z ^ (z >> np.uint64(31))


def low_bits(x, theta):
    """Deterministic pseudo-random offsets in ``[0, 2**-50)`` keyed on the state."""
    xb = np.ascontiguousarray(x, dtype=np.float64).view(np.uint64)
    tb = np.ascontiguousarray(theta, dtype=np.float64).view(np.uint64)
    with np.errstate(over="ignore"):
        h = _splitmix(xb ^ _splitmix(tb))
    out = (h >> np.uint64(11)).astype(np.float64) * 2.0 ** -103
    return out.reshape(np.shape(x))


def _fast(sys, x, theta):
    x1 = wrap(sys.f(x, theta))
    if sys.dither:
        # x -> m x mod 1 shifts mantissa bits out; without refilling them every
        # float orbit lands on 0 after ~53 / log2(m) steps.
        x1 = wrap(x1 + low_bits(np.broadcast_to(x, np.shape(x1)),
                                np.broadcast_to(theta, np.shape(x1))))
    return x1


def step(sys: FastSlowSystem, x, theta):
    """One application of the map; returns ``(x', theta')`` in ``[0, 1)``."""
    x = np.asarray(x, dtype=float)
    theta = np.asarray(theta, dtype=float)
    x1 = _fast(sys, x, theta)
    th1 = wrap(theta + sys.epsilon * sys.omega(x, theta))
    return x1, th1


def step_lifted(sys: FastSlowSystem, x, theta_lift):
    """One step keeping the slow variable on the real line."""
    return _fast(sys, x, theta_lift), theta_lift + sys.epsilon * sys.omega(x, theta_lift)


@dataclass(frozen=True)
class Trajectory:
    """Orbit ``p_0, ..., p_n`` together with the unwrapped slow variable."""

    points: np.ndarray       # shape (n+1, 2), columns x, theta in [0, 1)
    theta_lift: np.ndarray   # shape (n+1,)
    epsilon: float

    def __len__(self):
        return len(self.theta_lift)

    @property
    def x(self):
        return self.points[:, 0]

    @property
    def theta(self):
        return self.points[:, 1]


def iterate(sys: FastSlowSystem, p0, n: int, max_iterations: int = MAX_ITERATIONS) -> Trajectory:
    """Orbit of ``p0`` of length ``n + 1``.

    The lift is reset at ``p0``: ``theta_lift[0] = p0.theta``.
    """
    n = int(n)
    if n < 0:
        raise ValueError("n must be non-negative")
    if n > max_iterations:
        raise MemoryError(f"n={n} exceeds the configured maximum of {max_iterations} steps")
    x0, th0 = wrap(p0[0]), wrap(p0[1])
    xs = np.empty(n + 1)
    lift = np.empty(n + 1)
    xs[0], lift[0] = x0, th0
    f, omega, eps = sys.f, sys.omega, sys.epsilon
    x, th = x0, th0
    for k in range(n):
        if sys.dither:
            x, th = float(_fast(sys, np.float64(x), np.float64(th))), th + eps * float(omega(x, th))
        else:
            x, th = wrap(f(x, th)), th + eps * float(omega(x, th))
        xs[k + 1] = x
        lift[k + 1] = th
    points = np.column_stack([xs, wrap(lift)])
    return Trajectory(points=points, theta_lift=lift, epsilon=sys.epsilon)


def theta_process(traj: Trajectory, t: float, epsilon: float | None = None) -> float:
    """Polygonal interpolation of the lifted slow variable at slow time ``t``."""
    eps = traj.epsilon if epsilon is None else epsilon
    if eps <= 0:
        raise ValueError("the slow-time process needs epsilon > 0")
    return float(interpolate_lift(traj.theta_lift, t, eps))


def interpolate_lift(lift_sequence, t: float, epsilon: float):
    """``theta_eps(t)`` for a lifted sequence; last axis is time."""
    seq = np.asarray(lift_sequence, dtype=float)
    s = t / epsilon
    k = int(math.floor(s))
    w = s - k
    if t < 0 or k + 1 >= seq.shape[-1] and not (w == 0.0 and k < seq.shape[-1]):
        raise IndexError(f"t={t} lies outside the trajectory")
    if w == 0.0:
        return seq[..., k]
    return seq[..., k] + w * (seq[..., k + 1] - seq[..., k])
