"""Command-line experiment runner.

Every subcommand reads one YAML or JSON config (see ``configs/default.yaml``),
writes CSV tables plus a JSON report into the output directory and never
stamps times or hostnames into them, so equal configs and seeds give
byte-identical files.  Files are written to a temporary name and renamed.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import math
import os
import sys
import tempfile
import warnings
from importlib import resources
from pathlib import Path
from typing import Literal

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, \
    model_validator

from . import acceptance
from .averaged import find_zeros, solve_averaged, variance_curve
from .ensemble import (DEFAULT_LADDER, InitialEnsemble, compare_det_vs_sde, fit_metastable,
                       run_deterministic)
from .foliation import conjugacy, integrate_leaves, multiplier_obstruction
from .lyapunov import (ContractionError, center_field, chi_c_formula, chi_c_orbit,
                       mostly_contracting, psi_bar_star)
from .stochastic import (adjoint_generator_residual, metastable_mixture, rate_function,
                         shooting_jacobian, stationary_density)
from .systems import FastSlowSystem, example_family, skew_product
from .transfer import SlowFields, slow_fields

CONFIG_VERSION = 1
SYSTEMS = {"example_family": example_family, "skew_product": skew_product}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SystemBlock(_Strict):
    name: Literal["example_family", "skew_product"] = "example_family"
    params: dict[str, float | int | bool] = Field(default_factory=dict)
    epsilon: float = Field(1e-3, gt=0)

    @model_validator(mode="after")
    def _builds(self):
        build_system(self)
        return self


class ResolutionBlock(_Strict):
    n_bins: int = Field(4096, ge=64)
    m: int = Field(256, ge=64)
    stationary_m: int | None = Field(None, ge=64)
    n_x: int = Field(512, ge=8)
    n_theta: int = Field(256, ge=8)
    ode_step: float = Field(1e-3, gt=0, le=1e-2)
    leaf_step: float = Field(1 / 1024, gt=0, le=0.5)
    conjugacy_grid: int = Field(1024, ge=16)

    @field_validator("stationary_m")
    @classmethod
    def _even(cls, v):
        if v is not None and v % 2:
            raise ValueError("stationary_m must be even")
        return v


class RunBlock(_Strict):
    seed: int = Field(0, ge=0)
    n_samples: int = Field(100_000, ge=1)
    theta0: float = 0.1
    times: list[float] = Field(default_factory=lambda: [1.0])
    eps_ladder: list[float] = Field(default_factory=lambda: list(DEFAULT_LADDER))
    orbits: int = Field(100, ge=1)
    orbit_steps: int = Field(100_000, ge=1)
    y_max: float = Field(0.1, gt=0)
    n_y: int = Field(9, ge=2)
    leaves: int = Field(50, ge=1)
    multiplier_thetas: list[float] = Field(default_factory=lambda: [0.0, 0.25])
    profile: Literal["full", "quick"] = "full"
    criteria: list[int] | None = None

    @field_validator("times", "eps_ladder")
    @classmethod
    def _positive(cls, v):
        if not v or min(v) <= 0:
            raise ValueError("must be a non-empty list of positive numbers")
        return v

    @field_validator("criteria")
    @classmethod
    def _known(cls, v):
        if v is not None and not set(v) <= set(acceptance.CRITERIA):
            raise ValueError(f"criteria must be drawn from {sorted(acceptance.CRITERIA)}")
        return v


class OutputBlock(_Strict):
    directory: str = "out"
    formats: list[Literal["csv", "json"]] = Field(default_factory=lambda: ["csv", "json"])


class ExperimentConfig(_Strict):
    """Validated experiment description; unknown keys are rejected."""

    version: Literal[1] = CONFIG_VERSION
    system: SystemBlock = Field(default_factory=SystemBlock)
    resolution: ResolutionBlock = Field(default_factory=ResolutionBlock)
    run: RunBlock = Field(default_factory=RunBlock)
    output: OutputBlock = Field(default_factory=OutputBlock)
    fields_csv: str | None = None


def build_system(block: SystemBlock, epsilon: float | None = None) -> FastSlowSystem:
    ctor = SYSTEMS[block.name]
    eps = block.epsilon if epsilon is None else epsilon
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return ctor(epsilon=eps, **block.params)
    except TypeError as exc:
        raise ValueError(f"bad parameters for {block.name}: {exc}") from None


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    text = Path(path).read_text()
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    return ExperimentConfig.model_validate(data or {})


def shipped_config(name: str) -> Path:
    return Path(str(resources.files("fastslow") / "configs" / f"{name}.yaml"))


# ----------------------------------------------------------------------------
# output


@contextlib.contextmanager
def _atomic(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


class Writer:
    def __init__(self, cfg: ExperimentConfig):
        self.root = Path(cfg.output.directory)
        self.formats = set(cfg.output.formats)
        self.written: list[Path] = []

    def table(self, name: str, obj) -> None:
        """Write through the object's ``to_csv``."""
        if "csv" not in self.formats:
            return
        path = self.root / f"{name}.csv"
        with _atomic(path) as tmp:
            obj.to_csv(tmp)
        self.written.append(path)

    def rows(self, name: str, header, rows) -> None:
        if "csv" not in self.formats:
            return
        path = self.root / f"{name}.csv"
        with _atomic(path) as tmp, open(tmp, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_cell(v) for v in r])
        self.written.append(path)

    def report(self, name: str, data: dict) -> None:
        if "json" not in self.formats:
            return
        path = self.root / f"{name}.json"
        with _atomic(path) as tmp, open(tmp, "w") as fh:
            json.dump(_jsonable(data), fh, indent=2, sort_keys=True, allow_nan=True)
            fh.write("\n")
        self.written.append(path)


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    return v


# ----------------------------------------------------------------------------
# subcommands


def _fields(cfg: ExperimentConfig, workers: int) -> SlowFields:
    if cfg.fields_csv is not None:
        return SlowFields.from_csv(cfg.fields_csv)
    s = build_system(cfg.system, epsilon=0.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return slow_fields(s, m=cfg.resolution.m, n_bins=cfg.resolution.n_bins, workers=workers)


def cmd_fields(cfg, out: Writer, workers: int) -> int:
    f = _fields(cfg, workers)
    out.table("fields", f)
    zeros = find_zeros(f)
    out.report("fields", {"m": f.m, "gk_terms": f.gk_terms,
                          "richardson_error": f.richardson_error,
                          "min_var2": float(np.min(f.var2)),
                          "zeros": [z._asdict() for z in zeros]})
    return 0


def cmd_stationary(cfg, out: Writer, workers: int) -> int:
    f = _fields(cfg, workers)
    eps = cfg.system.epsilon
    d = stationary_density(f, eps, m=cfg.resolution.stationary_m)
    out.table("stationary", d)
    out.report("stationary", {"epsilon": eps, "v_eps": d.v_eps, "log_abs_v": d.log_abs_v,
                              "Z": d.Z, "log_Z": d.log_Z, "flux": d.flux, "mass": d.mass,
                              "Omega_1": d.Omega_1,
                              "adjoint_residual": adjoint_generator_residual(f, d)})
    return 0


def cmd_lyapunov(cfg, out: Writer, workers: int) -> int:
    s = build_system(cfg.system)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.run.seed, spawn_key=(11,)))
    p0 = np.column_stack([rng.random(cfg.run.orbits), cfg.run.theta0
                          + 0.01 * rng.standard_normal(cfg.run.orbits)])
    est = chi_c_orbit(s, p0, cfg.run.orbit_steps)
    f = _fields(cfg, workers)
    sinks = [z.theta for z in find_zeros(f).stable]
    frozen = s.with_epsilon(0.0)
    formula = chi_c_formula(frozen, sinks, n_bins=cfg.resolution.n_bins) if sinks else None
    psi = psi_bar_star(frozen, sinks, n_bins=cfg.resolution.n_bins) if sinks else []
    out.report("lyapunov", {"epsilon": s.epsilon, "chi_c": est.chi_c, "stderr": est.stderr,
                            "chi_c_over_eps": est.scaled,
                            "chi_c_over_eps_stderr": est.scaled_stderr,
                            "orbits": est.n_orbits, "steps": est.n_steps,
                            "sinks": sinks, "psi_bar_star_at_sinks": list(psi),
                            "formula": formula,
                            "mostly_contracting": mostly_contracting(psi) if sinks else None})
    return 0


def cmd_compare(cfg, out: Writer, workers: int) -> int:
    f = _fields(cfg, workers)
    s = build_system(cfg.system)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = compare_det_vs_sde(s, f, cfg.run.theta0, cfg.run.times[0], cfg.run.eps_ladder,
                                 n=cfg.run.n_samples, seed=cfg.run.seed, workers=workers)
    out.table("compare", rep)
    out.report("compare", {"t": rep.t, "n": rep.n, "tv": rep.tvs, "ratios": rep.ratios,
                           "decreasing": rep.decreasing})
    return 0


def cmd_metastable(cfg, out: Writer, workers: int) -> int:
    f = _fields(cfg, workers)
    s = build_system(cfg.system)
    zeros = find_zeros(f)
    mix = metastable_mixture(zeros, f, s.epsilon)
    init = InitialEnsemble(cfg.run.theta0, s.epsilon, cfg.run.n_samples)
    t = cfg.run.times[-1]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        samples = run_deterministic(s, init, [t], cfg.run.seed, workers=workers)[0]
        fit = fit_metastable(samples, mix, zeros)
    out.table("metastable", fit)
    out.report("metastable", {"t": t, "epsilon": s.epsilon, "weights": fit.weights,
                              "counts": fit.counts, "ks": fit.ks,
                              "means": [g.mean for g in fit.components],
                              "variances": [g.var for g in fit.components]})
    return 0


def cmd_foliation(cfg, out: Writer, workers: int) -> int:
    s = build_system(cfg.system)
    r = cfg.resolution
    report = {}
    try:
        cf = center_field(s, r.n_x, r.n_theta)
    except ContractionError as exc:
        # leaves need a contracting graph transform; the multiplier table does not
        report["center_field_error"] = str(exc)
    else:
        rng = np.random.default_rng(np.random.SeedSequence(cfg.run.seed, spawn_key=(11, 1)))
        leaves = integrate_leaves(cf, rng.random((cfg.run.leaves, 2)), r.leaf_step)
        out.rows("leaves", ["leaf", "theta", "x"],
                 ((i, t, x) for i, lf in enumerate(leaves)
                  for t, x in zip(lf.theta_grid, lf.x_values)))
        report.update({"sigma": cf.sigma, "sigma_bound": cf.sigma_bound, "K": cf.K,
                       "residual": cf.residual, "iterations": cf.iterations,
                       "closure_gaps": [lf.closure_gap for lf in leaves],
                       "lengths": [lf.length for lf in leaves],
                       "length_bound": leaves[0].bound})
    frozen = s.with_epsilon(0.0)
    mult = multiplier_obstruction(frozen, cfg.run.multiplier_thetas)
    out.table("multipliers", mult)
    conj = {}
    for th in cfg.run.multiplier_thetas:
        if th == 0:
            continue
        try:
            h = conjugacy(frozen, th, n_grid=r.conjugacy_grid)
        except ValueError as exc:
            conj[repr(float(th))] = {"error": str(exc)}
            continue
        out.table(f"conjugacy_theta_{th:g}", h)
        conj[repr(float(th))] = {"residual": h.residual, "order_error": h.order_error}
    report.update({"multipliers": mult.multipliers, "spread": mult.spread,
                   "obstructed": mult.obstructed, "conjugacy": conj})
    out.report("foliation", report)
    return 0


def cmd_ratefn(cfg, out: Writer, workers: int) -> int:
    f = _fields(cfg, workers)
    t = cfg.run.times[0]
    y = np.linspace(-cfg.run.y_max, cfg.run.y_max, cfg.run.n_y)
    step = cfg.resolution.ode_step
    res = rate_function(f, cfg.run.theta0, t, y, step=step)
    vt2 = variance_curve(f, solve_averaged(f, cfg.run.theta0, t, step)).final
    jac, xi = shooting_jacobian(f, cfg.run.theta0, t, step)
    out.table("ratefn", res)
    out.report("ratefn", {"t": t, "theta0": cfg.run.theta0, "var_t2": vt2,
                          "quadratic": list(y ** 2 / vt2), "V": res.V,
                          "failed": list(res.failed), "jacobian": jac, "xi_closed_form": xi})
    return 0


def cmd_verify(cfg, out: Writer, workers: int) -> int:
    sizes = acceptance.QUICK if cfg.run.profile == "quick" else acceptance.FULL
    ctx = acceptance.Context(sizes, cfg.run.seed, workers)
    echo = lambda line: print(line, flush=True)  # noqa: E731
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        results = acceptance.run_all(ctx, cfg.run.criteria, echo=echo)
    out.rows("acceptance", ["criterion", "name", "passed", "value", "tolerance"],
             ((r.number, r.name, r.passed, r.value, r.tolerance)
              for r in results))
    out.report("acceptance", {"profile": cfg.run.profile, "seed": cfg.run.seed,
                              "all_passed": all(r.passed for r in results),
                              "criteria": [{"number": r.number, "name": r.name,
                                            "passed": r.passed, "value": r.value,
                                            "tolerance": r.tolerance,
                                            "stats": dict(r.stats)} for r in results]})
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {"fields": cmd_fields, "stationary": cmd_stationary, "lyapunov": cmd_lyapunov,
            "compare": cmd_compare, "metastable": cmd_metastable, "foliation": cmd_foliation,
            "ratefn": cmd_ratefn, "verify": cmd_verify}


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fastslow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sp = sub.add_parser(name, help=(fn.__doc__ or name).splitlines()[0])
        sp.add_argument("--config", help="YAML or JSON config (defaults built in)")
        sp.add_argument("--seed", type=int, help="override run.seed")
        sp.add_argument("--workers", type=int, default=1, help="thread cap (default 1)")
        sp.add_argument("--out", help="override output.directory")
        if name == "verify":
            sp.add_argument("--quick", action="store_true", help="use the quick profile")
            sp.add_argument("--only", type=int, nargs="+", metavar="N",
                            help="run only these criteria")
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        run = dict(cfg.run.model_dump())
        if args.seed is not None:
            run["seed"] = args.seed
        if getattr(args, "quick", False):
            run["profile"] = "quick"
        if getattr(args, "only", None):
            run["criteria"] = args.only
        data = cfg.model_dump()
        data["run"] = run
        if args.out is not None:
            data["output"]["directory"] = args.out
        cfg = ExperimentConfig.model_validate(data)
    except (ValidationError, ValueError, OSError, yaml.YAMLError) as exc:
        print(f"fastslow: invalid config: {exc}", file=sys.stderr)
        return 2
    if args.workers < 1:
        print("fastslow: --workers must be at least 1", file=sys.stderr)
        return 2
    out = Writer(cfg)
    try:
        status = COMMANDS[args.command](cfg, out, args.workers)
    except MemoryError as exc:
        print(f"fastslow {args.command}: resource limit: {exc}", file=sys.stderr)
        return 3
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"fastslow {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    for path in out.written:
        print(f"wrote {path}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
