"""Monte Carlo ensembles of the deterministic map and their statistics.

Initial data are a single near-horizontal curve ``theta = G(x)`` carrying a
smooth density (the simplest realisation of a standard pair).  Samples are
drawn in fixed-size chunks with one counter-based stream per chunk, so every
statistic depends on the seed only, never on the worker count.
"""
from __future__ import annotations

import csv
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .averaged import OdeSolution, ZeroSet, find_zeros
from .stochastic import CHUNK, EnsembleSamples, GaussianSpec, SdeSpec, chunk_rng, em_paths
from .systems import MAX_ITERATIONS, FastSlowSystem, step_lifted, wrap
from .transfer import SlowFields, build_ulam, srb_density

__all__ = [
    "UnderSampledWarning",
    "EmptyBasinWarning",
    "InitialEnsemble",
    "EnsembleSamples",
    "Histogram",
    "run_deterministic",
    "propagate",
    "deviation_samples",
    "histogram",
    "common_edges",
    "tv_distance",
    "ks_normal",
    "ks_two_sample",
    "CompareRow",
    "CompareReport",
    "compare_det_vs_sde",
    "MetastableFit",
    "fit_metastable",
    "SrbCheck",
    "srb_structure_check",
    "exceedance_stats",
    "DEFAULT_LADDER",
]

DEFAULT_LADDER = (1e-2, 2.5e-3, 6.25e-4)

# stream tags keep the deterministic and stochastic draws independent
TAG_INITIAL = 2
TAG_SDE = 3


class UnderSampledWarning(UserWarning):
    """Histogram sampling noise is comparable to the statistic being measured."""


class EmptyBasinWarning(UserWarning):
    """A stable zero received no samples."""


@dataclass(frozen=True)
class InitialEnsemble:
    """Curve ``theta = theta0 + slope (x - x_start)`` over ``[x_start, x_start + length]``
    with density proportional to ``exp(kappa (x - x_start))``.

    The standard-pair constraints are enforced: ``|slope| <= c1 * epsilon``,
    ``length`` in ``[delta / 2, delta]`` and ``|kappa| <= c2``.
    """

    theta0: float
    epsilon: float
    n_samples: int
    x_start: float = 0.0
    length: float = 0.5
    slope: float = 0.0
    kappa: float = 0.0
    delta: float = 0.5
    c1: float = 1.0
    c2: float = 1.0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")
        if not self.delta / 2 <= self.length <= self.delta:
            raise ValueError("length must lie in [delta/2, delta]")
        if self.delta > 1:
            raise ValueError("delta must not exceed 1")
        if abs(self.slope) > self.c1 * self.epsilon + 1e-15:
            raise ValueError("curve slope exceeds c1 * epsilon")
        if abs(self.kappa) > self.c2:
            raise ValueError("log-density slope exceeds c2")

    def curve(self, x):
        return self.theta0 + self.slope * (np.asarray(x) - self.x_start)

    def density(self, x):
        """Normalised density on the curve's x-range (zero outside)."""
        x = np.asarray(x, dtype=float)
        u = x - self.x_start
        k, L = self.kappa, self.length
        norm = L if k == 0 else math.expm1(k * L) / k
        inside = (u >= 0) & (u <= L)
        return np.where(inside, np.exp(k * u) / norm, 0.0)

    def inverse_cdf(self, u):
        u = np.asarray(u, dtype=float)
        k, L = self.kappa, self.length
        if k == 0:
            return self.x_start + u * L
        return self.x_start + np.log1p(u * math.expm1(k * L)) / k

    def sample_chunk(self, seed: int, chunk: int, size: int):
        """``(x, theta)`` for chunk ``chunk``; ``x`` is not reduced mod 1."""
        u = chunk_rng(seed, TAG_INITIAL, chunk).random(size)
        x = self.inverse_cdf(u)
        return x, self.curve(x)

    def sample(self, seed: int):
        parts = [self.sample_chunk(seed, c, s) for c, s in enumerate(_chunk_sizes(self.n_samples))]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _chunk_sizes(n: int) -> list:
    return [min(CHUNK, n - c0) for c0 in range(0, n, CHUNK)]


def _step_index(t: float, eps: float) -> tuple[int, float]:
    u = t / eps
    k = int(math.floor(u + 1e-9))
    return k, max(0.0, u - k)


def propagate(sys: FastSlowSystem, x, theta, n_steps: int):
    """Apply the map ``n_steps`` times to arrays; ``theta`` stays lifted."""
    x = wrap(np.asarray(x, dtype=float))
    th = np.asarray(theta, dtype=float).copy()
    for _ in range(int(n_steps)):
        x, th = step_lifted(sys, x, th)
    return x, th


def _run_chunk(sys, x, th, times):
    eps = sys.epsilon
    idx = [_step_index(t, eps) for t in times]
    last = max(k for k, _ in idx) + 1
    out = np.empty((len(times), len(x)))
    x = wrap(x)
    # every time needs theta at steps k and k + 1
    want = {}
    for i, (k, fr) in enumerate(idx):
        want.setdefault(k, []).append((i, 1.0 - fr))
        want.setdefault(k + 1, []).append((i, fr))
    out[:] = 0.0
    for n in range(last + 1):
        for i, wgt in want.get(n, ()):
            if wgt:
                out[i] += wgt * th
        if n < last:
            x, th = step_lifted(sys, x, th)
    return out, x, th


def run_deterministic(sys: FastSlowSystem, init: InitialEnsemble, times: Sequence[float],
                      seed: int = 0, *, workers: int = 1, return_state: bool = False,
                      budget: float = 2e11):
    """Lifted slow variable ``theta_eps(t)`` for every sample and requested time.

    ``theta_eps(t)`` interpolates linearly between steps ``floor(t/eps)`` and
    ``floor(t/eps) + 1``.  Returns a list of :class:`EnsembleSamples` (and, with
    ``return_state``, the ``(x, theta)`` arrays after the last step).
    """
    times = [float(t) for t in times]
    if any(t < 0 for t in times):
        raise ValueError("times must be non-negative")
    eps = sys.epsilon
    if eps == 0:
        x, th = init.sample(seed)
        res = [EnsembleSamples(th.copy(), t, 0.0, seed) for t in times]
        return (res, (wrap(x), th)) if return_state else res
    if eps != init.epsilon:
        raise ValueError("system and initial ensemble disagree on epsilon")
    n_steps = _step_index(max(times), eps)[0] + 1
    if n_steps > MAX_ITERATIONS or n_steps * init.n_samples > budget:
        raise MemoryError(f"{n_steps} steps x {init.n_samples} samples exceeds the budget")

    def run(c, size):
        x, th = init.sample_chunk(seed, c, size)
        return _run_chunk(sys, x, th, times)

    sizes = _chunk_sizes(init.n_samples)
    if workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, range(len(sizes)), sizes))
    else:
        parts = [run(c, s) for c, s in enumerate(sizes)]
    vals = np.concatenate([p[0] for p in parts], axis=1)
    res = [EnsembleSamples(vals[i], t, eps, seed) for i, t in enumerate(times)]
    if return_state:
        return res, (np.concatenate([p[1] for p in parts]), np.concatenate([p[2] for p in parts]))
    return res


def deviation_samples(samples: EnsembleSamples, sol: OdeSolution, epsilon: float | None = None):
    """``(theta_eps(t) - theta_bar(t)) / sqrt(eps)`` on the lift."""
    eps = samples.epsilon if epsilon is None else float(epsilon)
    if eps == 0:
        return EnsembleSamples(np.zeros(len(samples)), samples.t, 0.0, samples.seed, "deviation")
    if samples.t > sol.t_grid[-1] + 1e-12:
        raise ValueError("solution does not reach the sample time")
    ref = float(sol.at(samples.t))
    return EnsembleSamples((samples.values - ref) / math.sqrt(eps), samples.t, eps,
                           samples.seed, "deviation")


# ----------------------------------------------------------------------------
# histograms and distances


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.edges) <= 0):
            raise ValueError("edges must be increasing")
        if len(self.masses) != len(self.edges) - 1:
            raise ValueError("masses and edges disagree")
        if np.any(self.masses < 0) or abs(float(np.sum(self.masses)) - 1.0) > 1e-12:
            raise ValueError("masses must be non-negative and sum to 1")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["left", "right", "mass"])
            for a, b, p in zip(self.edges[:-1], self.edges[1:], self.masses):
                w.writerow([repr(float(a)), repr(float(b)), repr(float(p))])


def common_edges(width: float, *samples) -> np.ndarray:
    """Bins of the given width, anchored at 0, covering every sample."""
    lo = min(float(np.min(s)) for s in samples)
    hi = max(float(np.max(s)) for s in samples)
    a = math.floor(lo / width)
    b = math.floor(hi / width) + 1
    return np.arange(a, b + 1) * width


def histogram(values, edges) -> Histogram:
    """Empirical masses on ``edges``; every value must fall inside the range."""
    values = np.asarray(values, dtype=float)
    edges = np.asarray(edges, dtype=float)
    if values.min() < edges[0] or values.max() > edges[-1]:
        raise ValueError("values fall outside the histogram range")
    counts, _ = np.histogram(values, bins=edges)
    return Histogram(edges, counts / counts.sum())


def tv_distance(a: Histogram, b: Histogram) -> float:
    """Total variation ``(1/2) sum |p - q|`` on a common binning."""
    if a.edges.shape != b.edges.shape or not np.array_equal(a.edges, b.edges):
        raise ValueError("histograms must share their edges")
    return float(min(1.0, 0.5 * np.sum(np.abs(a.masses - b.masses))))


def ks_normal(values, mean: float, var: float) -> float:
    """Kolmogorov-Smirnov distance from the empirical law to ``Normal(mean, var)``."""
    return float(stats.kstest(np.asarray(values, dtype=float), "norm",
                              args=(mean, math.sqrt(var))).statistic)


def ks_two_sample(a, b) -> float:
    return float(stats.ks_2samp(np.asarray(a), np.asarray(b)).statistic)


# ----------------------------------------------------------------------------
# deterministic vs diffusion


@dataclass(frozen=True)
class CompareRow:
    epsilon: float
    tv: float
    bin_width: float
    n_bins: int
    noise_floor: float
    det_mean: float
    sde_mean: float
    det_var: float
    sde_var: float


@dataclass(frozen=True)
class CompareReport:
    t: float
    n: int
    rows: tuple

    @property
    def tvs(self) -> np.ndarray:
        return np.array([r.tv for r in self.rows])

    @property
    def ratios(self) -> np.ndarray:
        tv = self.tvs
        return tv[1:] / tv[:-1]

    @property
    def decreasing(self) -> bool:
        return bool(np.all(np.diff(self.tvs) < 0))

    def to_csv(self, path) -> None:
        names = list(CompareRow.__dataclass_fields__)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for r in self.rows:
                w.writerow([repr(getattr(r, k)) for k in names])


def compare_det_vs_sde(sys: FastSlowSystem, fields: SlowFields, theta0: float, t: float,
                       epsilons: Sequence[float] = DEFAULT_LADDER, n: int = 100_000,
                       seed: int = 0, *, bin_scale: float = 1 / 8, sde_step: float = 1.0,
                       init_kwargs: dict | None = None, workers: int = 1) -> CompareReport:
    """Total variation between binned laws of ``theta_eps(t)`` and ``Theta(t)``.

    For each ``eps`` both ensembles have ``n`` members; bins have width
    ``bin_scale * sqrt(eps)``.  ``sde_step`` is the Euler-Maruyama step in
    units of ``eps``.  ``noise_floor = sqrt(bins / n)`` is the order of the
    TV between two independent samples of the same law; an
    :class:`UnderSampledWarning` is raised when it exceeds the measured TV.
    """
    rows = []
    for k, eps in enumerate(epsilons):
        s = sys.with_epsilon(eps)
        init = InitialEnsemble(theta0, eps, n, **(init_kwargs or {}))
        det = run_deterministic(s, init, [t], seed + 7919 * k, workers=workers)[0].values
        if t > 0:
            spec = SdeSpec(fields, eps, step=eps * sde_step, seed=seed + 7919 * k)
            sde = em_paths(spec, theta0, t, n, workers=workers, tag=TAG_SDE).values
        else:
            sde = np.full(n, float(theta0))
        w = bin_scale * math.sqrt(eps)
        edges = common_edges(w, det, sde)
        ha, hb = histogram(det, edges), histogram(sde, edges)
        tv = tv_distance(ha, hb)
        occupied = int(np.count_nonzero((ha.masses + hb.masses) > 0))
        floor = math.sqrt(occupied / n)
        if floor > tv:
            warnings.warn(f"eps={eps:g}: noise floor {floor:.3g} exceeds TV {tv:.3g}",
                          UnderSampledWarning, stacklevel=2)
        rows.append(CompareRow(float(eps), tv, w, len(edges) - 1, floor,
                               float(np.mean(det)), float(np.mean(sde)),
                               float(np.var(det)), float(np.var(sde))))
    return CompareReport(float(t), int(n), tuple(rows))


# ----------------------------------------------------------------------------
# metastable structure


@dataclass(frozen=True)
class MetastableFit:
    weights: np.ndarray
    counts: np.ndarray
    ks: np.ndarray
    components: tuple

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mean", "var", "weight", "count", "ks"])
            for g, wt, c, k in zip(self.components, self.weights, self.counts, self.ks):
                w.writerow([repr(float(g.mean)), repr(float(g.var)), repr(float(wt)), int(c),
                            repr(float(k))])


def _centred(values, mean):
    """Lifted offsets from ``mean``, reduced to ``[-1/2, 1/2)``."""
    return wrap(np.asarray(values) - mean + 0.5) - 0.5


def fit_metastable(samples, mixture: Sequence[GaussianSpec], zeros: ZeroSet) -> MetastableFit:
    """Assign samples to sink basins; empirical weights and per-sink KS distances."""
    values = np.asarray(getattr(samples, "values", samples), dtype=float)
    if len(mixture) != len(zeros.stable):
        raise ValueError("one Gaussian per stable zero expected")
    basin = zeros.basin_index(values)
    counts = np.bincount(basin, minlength=len(mixture))
    weights = counts / counts.sum()
    ks = np.full(len(mixture), np.nan)
    for i, g in enumerate(mixture):
        mine = values[basin == i]
        if len(mine) == 0:
            warnings.warn(f"no samples in the basin of the sink at {g.mean:.4f}",
                          EmptyBasinWarning, stacklevel=2)
            continue
        ks[i] = ks_normal(_centred(mine, g.mean), 0.0, g.var)
    comps = tuple(GaussianSpec(g.mean, g.var, float(w)) for g, w in zip(mixture, weights))
    return MetastableFit(weights, counts, ks, comps)


@dataclass(frozen=True)
class SrbCheck:
    regime: str
    tv: float
    n_used: int
    observed: np.ndarray = field(repr=False)
    predicted: np.ndarray = field(repr=False)
    theta_edges: np.ndarray = field(repr=False)


def _x_conditionals(sys, theta_centres, nx, n_bins):
    base = sys.with_epsilon(0.0)
    rows = []
    for th in theta_centres:
        mass = srb_density(build_ulam(base, float(wrap(th)), n_bins)).mass
        rows.append(mass.reshape(nx, -1).sum(axis=1))
    return np.array(rows)


def srb_structure_check(sys: FastSlowSystem, fields: SlowFields, x, theta, *, nx: int = 16,
                        ntheta: int = 16, n_bins: int = 1024, expected_regime: str | None = None,
                        window: float = 4.0) -> SrbCheck:
    """Compare a long-run cloud with the predicted product density.

    Rotation regime: ``h(x, theta) / bar omega(theta)`` over the whole torus.
    Sink regime: the metastable Gaussian mixture (weights fitted to the cloud)
    times ``h(x, theta)``, on a theta-window of ``window`` standard deviations
    around the most populated sink; samples outside the window are dropped.
    """
    if n_bins % nx:
        raise ValueError("n_bins must be a multiple of nx")
    from .stochastic import metastable_mixture

    zeros = find_zeros(fields)
    regime = "rotation" if zeros.rotation else "sink"
    if expected_regime is not None and expected_regime != regime:
        raise ValueError(f"expected a {expected_regime} regime, fields give {regime}")
    x = wrap(np.asarray(x, dtype=float))
    theta = np.asarray(theta, dtype=float)
    fi = fields.interpolant()
    if regime == "rotation":
        if np.min(fields.omega_bar) * np.max(fields.omega_bar) <= 0:
            raise ValueError("rotation regime needs a drift of one sign")
        th_edges = np.linspace(0.0, 1.0, ntheta + 1)
        fine = (np.arange(ntheta * 64) + 0.5) / (ntheta * 64)
        p_theta = (1.0 / np.abs(fi.omega_bar(fine))).reshape(ntheta, -1).sum(axis=1)
        p_theta /= p_theta.sum()
        th_used = wrap(theta)
        keep = np.ones(len(x), dtype=bool)
    else:
        mix = metastable_mixture(zeros, fi, sys.epsilon)
        fit = fit_metastable(theta, mix, zeros)
        g = fit.components[int(np.argmax(fit.weights))]
        sd = math.sqrt(g.var)
        th_edges = g.mean + np.linspace(-window * sd, window * sd, ntheta + 1)
        th_used = g.mean + _centred(theta, g.mean)
        keep = (th_used >= th_edges[0]) & (th_used < th_edges[-1])
        cdf = stats.norm.cdf(th_edges, g.mean, sd)
        p_theta = np.diff(cdf) / (cdf[-1] - cdf[0])
    centres = 0.5 * (th_edges[1:] + th_edges[:-1])
    pred = p_theta[:, None] * _x_conditionals(sys, centres, nx, n_bins)
    pred /= pred.sum()
    obs, _, _ = np.histogram2d(th_used[keep], x[keep], bins=[th_edges, np.linspace(0, 1, nx + 1)])
    obs /= max(obs.sum(), 1)
    tv = float(0.5 * np.sum(np.abs(obs - pred)))
    return SrbCheck(regime, tv, int(keep.sum()), obs, pred, th_edges)


def exceedance_stats(deviations, thresholds) -> np.ndarray:
    """Rows ``(R, P(sup |deviation| >= R))``.

    A 2-D input is read as ``(samples, times)`` and reduced by the supremum
    over times.  With ``n`` samples, probabilities below ``1/n`` read as 0.
    """
    d = np.abs(np.asarray(getattr(deviations, "values", deviations), dtype=float))
    if d.ndim == 2:
        d = d.max(axis=1)
    R = np.asarray(thresholds, dtype=float)
    srt = np.sort(d)
    prob = 1.0 - np.searchsorted(srt, R, side="left") / len(srt)
    return np.column_stack([R, prob])
