"""Command-line front end."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, RunConfig, compile_function, load_config
from .core import NodalMCError, NumericalError, UsageError
from .estimators import estimate_vmc_energy, symmetry_diagnostic
from .models import list_models, make_model
from . import oracle as _oracle
from . import workflows as wf

log = logging.getLogger("nodalmc")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
CSV_HEADER = ("quantity", "value", "stderr", "n_eff", "seed", "config_digest", "walltime_s")


class StatisticalFailure(NumericalError):
    """A run finished but failed its own statistical consistency check."""


@dataclass
class ResultRecord:
    quantity: str
    value: float | np.ndarray
    stderr: float | np.ndarray
    n_eff: float
    seed: int
    config_digest: str
    walltime_s: float | None = None
    covariance: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def rows(self) -> list[tuple]:
        v = np.atleast_1d(np.asarray(self.value, dtype=float))
        s = np.atleast_1d(np.asarray(self.stderr, dtype=float))
        if s.size == 1 and v.size > 1:
            s = np.full(v.size, s[0])
        wt = "" if self.walltime_s is None else f"{self.walltime_s:.3f}"
        names = [self.quantity] if v.size == 1 and np.ndim(self.value) == 0 else [
            f"{self.quantity}[{i}]" for i in range(v.size)]
        return [(n, _num(a), _num(b), _num(self.n_eff), str(self.seed), self.config_digest, wt)
                for n, a, b in zip(names, v, s)]

    def as_json(self) -> dict:
        d = {
            "quantity": self.quantity,
            "value": _jsonify(self.value),
            "stderr": _jsonify(self.stderr),
            "n_eff": _jsonify(self.n_eff),
            "seed": self.seed,
            "config_digest": self.config_digest,
            "walltime_s": self.walltime_s,
        }
        if self.covariance is not None:
            d["covariance"] = _jsonify(np.atleast_2d(self.covariance))
        if self.extra:
            d["extra"] = _jsonify(self.extra)
        return d


def _num(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def _jsonify(v):
    if isinstance(v, np.ndarray):
        return [_jsonify(a) for a in v.tolist()] if v.ndim else _jsonify(v.item())
    if isinstance(v, (list, tuple)):
        return [_jsonify(a) for a in v]
    if isinstance(v, dict):
        return {str(k): _jsonify(a) for k, a in v.items()}
    if isinstance(v, (np.floating, float)):
        f = float(v)
        return f if math.isfinite(f) else str(f)
    if isinstance(v, np.integer):
        return int(v)
    return v


def render_csv(records: Sequence[ResultRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in records:
        w.writerows(r.rows())
    return buf.getvalue()


def render_json(records: Sequence[ResultRecord]) -> str:
    return json.dumps([r.as_json() for r in records], indent=2, sort_keys=True) + "\n"


def write_outputs(records: Sequence[ResultRecord], path: str | Path | None,
                  fmt: str = "csv") -> str:
    """Render records as CSV or JSON and write them to ``path`` (stdout when ``None``).

    Raises
    ------
    UsageError
        for an empty record list or an unknown format.
    OSError
        when the file cannot be written.
    """
    if not records:
        raise UsageError("no records to write")
    if fmt not in ("csv", "json"):
        raise UsageError(f"unknown output format {fmt!r}")
    text = render_csv(records) if fmt == "csv" else render_json(records)
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)
    return text


# --------------------------------------------------------------------------- commands


def _est_record(name, est, cfg: RunConfig, t0, timing, **extra) -> ResultRecord:
    cov = est.covariance if np.ndim(est.value) else None
    return ResultRecord(name, est.value, est.std_error, float(est.n_effective), cfg.seed,
                        cfg.digest(), _elapsed(t0, timing), cov, extra)


def _elapsed(t0, timing):
    return time.perf_counter() - t0 if timing else None


def _functionals(cfg: RunConfig, key: str = "functionals", section: str = "estimators"):
    exprs = getattr(cfg, section).get(key)
    entry = cfg.entry
    if exprs is None:
        exprs = ["1"] + (["x"] if entry.model.dimension == 1 else [])
    return {e: compile_function(str(e), entry.model.dimension, dict(entry.test_functions))
            for e in exprs}


def cmd_vmc(cfg: RunConfig, timing: bool):
    t0 = time.perf_counter()
    e = cfg.entry
    est = estimate_vmc_energy(
        e.model, e.family, cfg.theta_array(), n_steps=int(cfg.setting("vmc_steps", 2000)),
        proposal_scale=float(cfg.setting("proposal_scale", 0.5)), seed=cfg.seed,
        n_chains=int(cfg.setting("vmc_chains", 256)),
    )
    rec = _est_record("vmc_energy", est, cfg, t0, timing)
    var = est.metadata.get("sample_variance", math.nan)
    return [rec, ResultRecord("vmc_sample_variance", var, 0.0, float(est.n_effective),
                              cfg.seed, cfg.digest(), _elapsed(t0, timing))]


def cmd_dmc(cfg: RunConfig, timing: bool):
    t0 = time.perf_counter()
    run = wf.run_dmc(cfg.entry, cfg.theta_array(), cfg.propagation(), cfg.N, cfg.seed)
    recs = [_est_record("energy", run.energy, cfg, t0, timing),
            _est_record("energy_mixed", run.mixed, cfg, t0, timing)]
    eta = run.eta
    for name, fn in _functionals(cfg).items():
        recs.append(_est_record(f"eta:{name}", eta.mean(fn), cfg, t0, timing))
    ens = run.ensemble
    recs.append(ResultRecord("alive_fraction", ens.n_alive / ens.size, 0.0, float(ens.size),
                             cfg.seed, cfg.digest(), _elapsed(t0, timing)))
    return recs


def cmd_mu(cfg: RunConfig, timing: bool):
    t0 = time.perf_counter()
    funcs = _functionals(cfg)
    run = wf.run_mu(cfg.entry, cfg.theta_array(), cfg.propagation(), cfg.N, cfg.seed,
                    functionals={k: v for k, v in funcs.items() if k != "1"})
    recs = [_est_record("energy", run.energy, cfg, t0, timing),
            _est_record("mu:1", run.mu.mass, cfg, t0, timing)]
    for name, est in run.mu.functionals.items():
        recs.append(_est_record(f"mu:{name}", est, cfg, t0, timing))
    recs.append(ResultRecord("censored_fraction", run.mu.censored_fraction, 0.0,
                             float(len(run.hits)), cfg.seed, cfg.digest(), _elapsed(t0, timing)))
    return recs


def cmd_grad(cfg: RunConfig, timing: bool):
    t0 = time.perf_counter()
    forms = cfg.estimators.get("forms", ["surface", "bulk"])
    g = wf.run_gradient(cfg.entry, cfg.theta_array(), cfg.propagation(), cfg.N, cfg.seed,
                        forms=forms)
    recs = [_est_record("energy", g.energy, cfg, t0, timing)]
    if g.surface is not None:
        recs.append(_est_record("grad_surface", g.surface, cfg, t0, timing, z=g.surface.z))
    if g.bulk is not None:
        recs.append(_est_record("grad_bulk", g.bulk, cfg, t0, timing, z=g.bulk.z))
    cz = g.consistency_z()
    if cz is not None:
        recs.append(ResultRecord("grad_consistency_z", cz, np.zeros_like(cz), math.nan,
                                 cfg.seed, cfg.digest(), _elapsed(t0, timing)))
        limit = float(cfg.estimators.get("consistency_z", 3.0))
        if np.any(np.abs(cz) > limit):
            raise StatisticalFailure(
                f"surface and bulk gradients disagree: z = {np.round(cz, 2).tolist()}",
                recs)
    return recs


def cmd_symmetry(cfg: RunConfig, timing: bool):
    t0 = time.perf_counter()
    e = cfg.entry
    names = cfg.estimators.get("test_functions") or list(e.test_functions)
    if not names:
        raise ConfigError(f"{cfg.source}: estimators.test_functions is required for {e.name}")
    tests = {n: compile_function(str(n), e.model.dimension, dict(e.test_functions)) for n in names}
    run = wf.run_mu(e, cfg.theta_array(), cfg.propagation(), cfg.N, cfg.seed)
    rows = symmetry_diagnostic(run.hits, e.model.group, tests, full=True)
    recs = [ResultRecord(f"symmetry:{r['name']}", r["value"], r["stderr"], r["n_eff"],
                         cfg.seed, cfg.digest(), _elapsed(t0, timing), extra={"z": r["z"]})
            for r in rows]
    zmax = max(abs(r["z"]) for r in rows)
    recs.append(ResultRecord("symmetry_max_abs_z", zmax, 0.0, rows[0]["n_eff"], cfg.seed,
                             cfg.digest(), _elapsed(t0, timing)))
    limit = cfg.estimators.get("max_z")
    if limit is not None and zmax > limit:
        bad = {r["name"]: round(r["z"], 2) for r in rows if abs(r["z"]) > limit}
        raise StatisticalFailure(f"symmetry broken beyond |z| = {limit}: {bad}", recs)
    return recs


def z_table(records: Sequence[ResultRecord]) -> str:
    lines = [f"{'function':<14}{'value':>14}{'stderr':>12}{'z':>9}"]
    for r in records:
        if "z" in r.extra:
            lines.append(f"{r.quantity.split(':', 1)[1]:<14}{float(r.value):>14.6g}"
                         f"{float(r.stderr):>12.3g}{r.extra['z']:>9.2f}")
    return "\n".join(lines)


def cmd_shape(cfg: RunConfig, timing: bool):
    t0 = time.perf_counter()
    est, run = wf.run_shape(cfg.entry, cfg.propagation(), cfg.N, cfg.seed,
                            velocity=cfg.estimators.get("velocity", "right"))
    return [_est_record("energy", run.energy, cfg, t0, timing),
            _est_record("shape_derivative", est, cfg, t0, timing)]


def _grid(cfg: RunConfig) -> _oracle.GridSpec:
    e = cfg.entry
    g = cfg.grid
    h = g.get("h", e.defaults.get("grid_h"))
    if h is None:
        raise ConfigError(f"{cfg.source}: grid.h is required for {e.name}")
    lower = g.get("lower", e.defaults.get("grid_lower"))
    upper = g.get("upper", e.defaults.get("grid_upper"))
    if lower is None or upper is None:
        fam = e.family
        if hasattr(fam, "domain"):
            # room for the domain to grow under finite differences
            lo, hi = fam.domain(cfg.theta_array())
            pad = 0.25 * (hi - lo)
            lower, upper = lo - pad, hi + pad
        else:
            lower, upper = e.model.lower, e.model.upper
    return _oracle.GridSpec.from_spacing(lower, upper, float(h))


def cmd_oracle(cfg: RunConfig, timing: bool):
    t0 = time.perf_counter()
    e = cfg.entry
    grid = _grid(cfg)
    theta = cfg.theta_array()
    sol = _oracle.solve_dirichlet_groundstate(e.model, e.family, theta, grid,
                                              method=cfg.grid.get("method", "auto"))
    dig = cfg.digest()
    recs = [ResultRecord("oracle_energy", sol.energy, 0.0, math.nan, cfg.seed, dig,
                         _elapsed(t0, timing), extra={"residual": sol.residual,
                                                      "converged": sol.converged}),
            ResultRecord("oracle_residual", sol.residual, 0.0, math.nan, cfg.seed, dig,
                         _elapsed(t0, timing))]
    if cfg.grid.get("fd_gradient", False):
        fd = _oracle.finite_difference_theta_gradient(e.model, e.family, theta, grid,
                                                      delta=float(cfg.grid.get("delta", 0.02)))
        recs.append(ResultRecord("oracle_fd_gradient", np.asarray(fd, float),
                                 np.zeros(np.size(fd)), math.nan, cfg.seed, dig,
                                 _elapsed(t0, timing)))
    if "functionals" in cfg.grid:
        lam = float(cfg.setting("lam", 0.0))
        for name, fn in _functionals(cfg, "functionals", "grid").items():
            _, val = _oracle.solve_exit_functional(e.model, grid, lam, fn, e.family, theta, sol)
            recs.append(ResultRecord(f"oracle_mu:{name}", val, 0.0, math.nan, cfg.seed, dig,
                                     _elapsed(t0, timing)))
    return recs


def cmd_optimize(cfg: RunConfig, timing: bool):
    t0 = time.perf_counter()
    o = cfg.optimize
    res = wf.nmc_optimize(cfg.entry, cfg.theta_array(), cfg.propagation(), cfg.N, cfg.seed,
                          gamma=float(o.get("gamma", 0.5)),
                          iterations=int(o.get("iterations", 15)),
                          form=o.get("form", "surface"),
                          n_sigma=float(o.get("n_sigma", 2.0)))
    dig = cfg.digest()
    recs = []
    for s in res.trace:
        recs.append(ResultRecord(f"trace_energy[{s.iteration}]", s.energy, s.energy_stderr,
                                 math.nan, cfg.seed, dig, _elapsed(t0, timing),
                                 extra=s.as_dict()))
    recs.append(ResultRecord("theta_final", res.theta, np.zeros(res.theta.size), math.nan,
                             cfg.seed, dig, _elapsed(t0, timing)))
    recs.append(ResultRecord("energy_final", res.energy.value, res.energy.std_error,
                             float(res.energy.n_effective), cfg.seed, dig, _elapsed(t0, timing),
                             extra={"monotone_within_2sigma": res.monotone_within(2.0)}))
    return recs


COMMANDS = {
    "vmc": cmd_vmc,
    "dmc": cmd_dmc,
    "mu": cmd_mu,
    "grad": cmd_grad,
    "symmetry": cmd_symmetry,
    "shape": cmd_shape,
    "oracle": cmd_oracle,
    "optimize": cmd_optimize,
}


def execute(command: str, cfg: RunConfig, timing: bool = True) -> list[ResultRecord]:
    """Run one subcommand on a validated configuration and return its records."""
    try:
        fn = COMMANDS[command]
    except KeyError:
        raise UsageError(f"unknown command {command!r}") from None
    return fn(cfg, timing)


# --------------------------------------------------------------------------- argv


_HELP = {
    "vmc": "variational energy of the trial function",
    "dmc": "fixed-node energy and summaries of the conditioned law",
    "mu": "functionals of the hitting measure",
    "grad": "fixed-node energy gradient in surface and bulk form",
    "symmetry": "symmetry z-scores of the hitting measure",
    "shape": "energy derivative under a boundary motion",
    "oracle": "grid groundstate, finite-difference gradient and exit functionals",
    "optimize": "nodal Monte-Carlo descent of the fixed-node energy",
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nodalmc", description="Nodal Monte-Carlo toolkit")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="TOML configuration file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output file (.csv or .json); stdout by default")
        sp.add_argument("--format", choices=("csv", "json"))
        sp.add_argument("--threads", type=int)
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. run.N=20000")
        sp.add_argument("--no-timing", action="store_true",
                        help="leave the wall-time column empty (byte-stable output)")

    for name in COMMANDS:
        common(sub.add_parser(name, help=_HELP[name]))
    ck = sub.add_parser("check", help="run the acceptance suite")
    ck.add_argument("--only", help="comma-separated criterion numbers")
    ck.add_argument("--threads", type=int, default=1)
    ck.add_argument("--out", help="write the table as JSON")
    md = sub.add_parser("models", help="model catalog")
    msub = md.add_subparsers(dest="models_command", required=True)
    msub.add_parser("list")
    de = msub.add_parser("describe")
    de.add_argument("name")
    de.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    return p


def _models(args) -> int:
    if args.models_command == "list":
        for name in list_models():
            e = make_model(name)
            tag = " (experimental)" if e.experimental else ""
            print(f"{name:<20}{e.description}{tag}")
        return EXIT_OK
    from .config import _parse_value

    params = {}
    for item in args.set:
        k, _, v = item.partition("=")
        params[k.strip()] = _parse_value(v.strip())
    print(json.dumps(make_model(args.name, params).describe(), indent=2, sort_keys=True))
    return EXIT_OK


def _check(args) -> int:
    from .acceptance import format_table, run_acceptance

    only = None
    if args.only:
        try:
            only = [int(s) for s in args.only.split(",")]
        except ValueError:
            raise UsageError("--only takes comma-separated integers") from None
    results = run_acceptance(only, threads=args.threads, progress=print)
    print(format_table(results))
    if args.out:
        Path(args.out).write_text(json.dumps([r.as_dict() for r in results], indent=2,
                                             sort_keys=True, default=_jsonify) + "\n")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERICAL


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "models":
            return _models(args)
        if args.command == "check":
            return _check(args)
        cfg = load_config(args.config, args.set, args.seed, args.threads)
        fmt = args.format or cfg.output.get("format")
        out = args.out or cfg.output.get("path")
        if fmt is None:
            fmt = "json" if out and str(out).endswith(".json") else "csv"
        timing = cfg.output.get("timing", True) and not args.no_timing
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("default")
                records = execute(args.command, cfg, timing)
        except StatisticalFailure as exc:
            msg, recs = exc.args
            write_outputs(recs, out, fmt)
            print(f"nodalmc: statistical failure: {msg}", file=sys.stderr)
            return EXIT_NUMERICAL
        write_outputs(records, out, fmt)
        if args.command == "symmetry":
            print(z_table(records), file=sys.stderr)
        return EXIT_OK
    except ConfigError as exc:
        print(f"nodalmc: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as exc:
        print(f"nodalmc: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"nodalmc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except NodalMCError as exc:  # pragma: no cover
        print(f"nodalmc: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"nodalmc: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
