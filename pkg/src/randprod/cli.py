"""Command-line front end.

    randprod run      --builtin pure_rotation --theta 1.0 --steps 1000 --track 1,0
    randprod estimate --method integral --builtin signed_pair --samples 100000
    randprod verify   --suite all --seed 7

Exit codes: 0 success, 1 verification failure, 2 validation or usage error,
3 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import diagnostics as diag
from . import estimators as est
from .engine import TrajectoryRecord, run_trajectories
from .ensembles import EnsembleSpec, builtin, from_dict, parametric
from .errors import NumericalError, RandProdError
from .rng import RngStream
from .verify import SUITES, run_suite

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

METHODS = ("psi", "phi", "integral", "orbit", "gamma-eps", "lyapunov")
PARAM_FLAGS = ("theta", "alpha", "beta", "tau")
RUN_KEYS = ("steps", "replicas", "burn_in", "samples", "eps", "tail", "track",
            "record_every", "seed", "out_csv", "out_json", "method", "suite", "dim")


class UsageError(RandProdError, ValueError):
    pass


@dataclass
class RunConfig:
    ensemble: EnsembleSpec | None
    steps: int = est.DEFAULT_STEPS
    replicas: int | None = None  # 1 for run, 64 for estimate
    burn_in: int = est.DEFAULT_BURN_IN
    samples: int = 100_000
    eps: list[float] = field(default_factory=lambda: [1e-3])
    tail: int = est.DEFAULT_BURN_IN
    track: list[list[float]] = field(default_factory=list)
    record_every: int = 1
    seed: int = 0
    out_csv: str | None = None
    out_json: str | None = None
    method: str = "psi"
    suite: str = "all"

    def check(self) -> None:
        for name in ("steps", "burn_in", "samples", "tail", "record_every"):
            if getattr(self, name) < 1:
                raise UsageError(f"--{name.replace('_', '-')} must be >= 1")
        if self.replicas is not None and self.replicas < 1:
            raise UsageError("--replicas must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise UsageError("--seed must fit in 64 unsigned bits")
        if self.method not in METHODS:
            raise UsageError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.suite not in SUITES:
            raise UsageError(f"unknown suite {self.suite!r}; choose from {', '.join(SUITES)}")


def _vector(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    try:
        return [float(v) for v in str(text).split(",")]
    except ValueError as exc:
        raise UsageError(f"bad vector {text!r}; expected comma-separated numbers") from exc


def _param(text: str) -> tuple[str, float]:
    name, sep, value = text.partition("=")
    if not sep:
        raise UsageError(f"bad --param {text!r}; expected NAME=VALUE")
    try:
        return name.strip(), float(value)
    except ValueError as exc:
        raise UsageError(f"--param {name}: {value!r} is not a number") from exc


def _read_config(path: str) -> tuple[dict | None, dict]:
    """Split a config file into (ensemble mapping, run settings)."""
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
    except yaml.YAMLError as exc:
        raise UsageError(f"malformed config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a mapping")
    settings = {k.replace("-", "_"): v for k, v in data.items()}
    # dim belongs to the ensemble when the file describes one inline
    run = {k: settings.pop(k) for k in list(settings) if k in RUN_KEYS and k != "dim"}
    ens = settings.pop("ensemble", None)
    if ens is None and settings:
        ens = settings
    elif settings:
        raise UsageError(f"unknown config keys: {', '.join(sorted(settings))}")
    return ens, run


def build_config(args: argparse.Namespace, needs_ensemble: bool = True) -> RunConfig:
    """Merge config file and flags; flags win."""
    ens_data, run = _read_config(args.config) if args.config else (None, {})
    for key in RUN_KEYS:
        value = getattr(args, key, None)
        if value is not None and value != []:
            run[key] = value

    params = {p: getattr(args, p) for p in PARAM_FLAGS if getattr(args, p) is not None}
    params.update(dict(_param(p) for p in args.param or []))
    spec = None
    if args.builtin:
        if args.builtin == "custom_parametric":
            spec = parametric(int(run.get("dim", 2)), **params)
        else:
            spec = builtin(args.builtin, params)
    elif ens_data is not None:
        if params:
            ens_data = {**ens_data, "params": {**(ens_data.get("params") or {}), **params}}
        spec = from_dict(ens_data)
    elif needs_ensemble:
        raise UsageError("give an ensemble with --builtin or --config")
    if spec is not None and "dim" in run and int(run["dim"]) != spec.dim:
        raise UsageError(f"--dim {run['dim']} does not match the ensemble dimension {spec.dim}")

    cfg = RunConfig(spec)
    for key in ("steps", "replicas", "burn_in", "samples", "tail", "record_every", "seed"):
        if key in run:
            try:
                setattr(cfg, key, int(run[key]))
            except (TypeError, ValueError) as exc:
                raise UsageError(f"{key} must be an integer") from exc
    if "eps" in run:
        eps = run["eps"] if isinstance(run["eps"], list) else [run["eps"]]
        cfg.eps = [float(e) for e in eps]
    if "track" in run:
        cfg.track = [_vector(t) for t in run["track"]]
    for key in ("out_csv", "out_json", "method", "suite"):
        if key in run:
            setattr(cfg, key, run[key])
    cfg.check()
    return cfg


def _write(path: str | None, text: str) -> None:
    if path:
        with open(path, "w", newline="") as fh:
            fh.write(text)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def _finite(v: float):
    v = float(v)
    return v if np.isfinite(v) else None


# ---------------------------------------------------------------------------
# commands


def cmd_run(cfg: RunConfig) -> int:
    spec = cfg.ensemble
    cfg.replicas = cfg.replicas or 1
    track = cfg.track or [est.generic_start(spec.dim).tolist()]
    rngs = [RngStream.for_purpose(cfg.seed, "run", r) for r in range(cfg.replicas)]
    records = run_trajectories(spec, cfg.steps, rngs, track, cfg.record_every)
    _write(cfg.out_csv, trajectory_csv(records))
    summary = run_summary(cfg, records)
    _write(cfg.out_json, _dumps(summary))
    if not cfg.out_json:
        sys.stdout.write(_dumps(summary))
    return EXIT_OK


def trajectory_csv(records: Sequence[TrajectoryRecord]) -> str:
    """Engine CSV for one record; with several, a leading replica column."""
    if len(records) == 1:
        return records[0].csv_text()
    out = io.StringIO()
    for r, rec in enumerate(records):
        lines = rec.csv_text().splitlines(keepends=True)
        if r == 0:
            out.write("replica," + lines[0])
        out.writelines(f"{r},{line}" for line in lines[1:])
    return out.getvalue()


def run_summary(cfg: RunConfig, records: Sequence[TrajectoryRecord]) -> dict:
    spec = cfg.ensemble
    finals = []
    for rec in records:
        st = rec.final_state
        tracked = [{"x0": tv.x0.tolist(), "phi_over_n": tv.phi / st.n, "psi_over_n": tv.psi / st.n}
                   for tv in st.tracked]
        finals.append({"log_norm_S_over_n": float(st.log_norm_S) / st.n, "tracked": tracked})
    diagnostics = [diag.alignment_curve(records[0], k).to_dict() for k in range(records[0].n_tracked)]
    return {
        "command": "run",
        "ensemble_kind": spec.kind,
        "ensemble_digest": spec.digest(),
        "steps": cfg.steps,
        "replicas": cfg.replicas,
        "record_every": cfg.record_every,
        "seed": cfg.seed,
        "final": finals,
        "diagnostics": diagnostics,
    }


def cmd_estimate(cfg: RunConfig) -> int:
    spec, m = cfg.ensemble, cfg.method
    cfg.replicas = cfg.replicas or 64
    per_replica = None
    if m == "psi":
        e = est.estimate_xi_psi(spec, cfg.steps, cfg.replicas, cfg.seed)
        report, per_replica = e.to_dict(), e.replicas
    elif m == "phi":
        e = est.estimate_abs_xi_phi(spec, cfg.steps, cfg.replicas, cfg.seed)
        report, per_replica = e.to_dict(), e.replicas
    elif m == "integral":
        e = est.estimate_xi_integral(spec, cfg.samples, cfg.burn_in, cfg.seed)
        report = e.to_dict()
    elif m == "orbit":
        e = est.xi_orbit_average(spec, cfg.steps, cfg.tail, cfg.seed, replicas=cfg.replicas,
                                 burn_in=cfg.burn_in)
        report, per_replica = e.to_dict(), e.replicas
    elif m == "gamma-eps":
        rows = est.gamma_eps_derivative(spec, cfg.eps, cfg.steps, cfg.replicas, cfg.seed)
        report = {
            "method": "gamma_eps",
            "ratios": [{"eps": eps, "ratio": r, "std_err": se} for eps, r, se in rows],
            "steps": cfg.steps, "replicas": cfg.replicas, "seed": cfg.seed,
            "ensemble_digest": spec.digest(),
        }
    else:
        e = est.estimate_lyapunov(spec, cfg.steps, cfg.replicas, cfg.seed)
        report = {"method": "lyapunov", "seed": cfg.seed, "ensemble_digest": spec.digest(),
                  **e.to_dict()}
        per_replica = e.replicas
    report = {k: (_finite(v) if isinstance(v, float) else v) for k, v in report.items()}
    if per_replica is not None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["replica", "value"])
        for r, v in enumerate(np.asarray(per_replica, dtype=float)):
            w.writerow([r, format(v, ".17g")])
        _write(cfg.out_csv, buf.getvalue())
    _write(cfg.out_json, _dumps(report))
    sys.stdout.write(_dumps(report))
    return EXIT_OK


def cmd_verify(cfg: RunConfig) -> int:
    checks = run_suite(cfg.suite, cfg.seed)
    width = max(len(c.key) for c in checks)
    for c in checks:
        print(f"{'PASS' if c.passed else 'FAIL'}  {c.key:<{width}}  {c.seconds:7.2f}s  {c.title}")
    n_pass = sum(c.passed for c in checks)
    print(f"{n_pass}/{len(checks)} passed")
    report = {"suite": cfg.suite, "seed": cfg.seed, "passed": n_pass == len(checks),
              "checks": [c.to_dict() for c in checks]}
    _write(cfg.out_json, _dumps(report))
    if cfg.out_csv:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["check", "passed", "quantity", "value"])
        for c in checks:
            for k, v in c.to_dict()["values"].items():
                w.writerow([c.key, int(c.passed), k, format(v, ".17g") if isinstance(v, float) else v])
        _write(cfg.out_csv, buf.getvalue())
    return EXIT_OK if n_pass == len(checks) else EXIT_VERIFY


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors share the validation exit code
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("ensemble")
    g.add_argument("--config", metavar="PATH", help="YAML or JSON config; flags override it")
    g.add_argument("--builtin", metavar="NAME", help="reference ensemble name")
    for p in PARAM_FLAGS:
        g.add_argument(f"--{p}", type=float, metavar="FLOAT")
    g.add_argument("--param", action="append", metavar="NAME=VALUE",
                   help="any other ensemble parameter (repeatable)")
    g.add_argument("--dim", type=int, metavar="INT")
    r = common.add_argument_group("run")
    r.add_argument("--steps", type=int, metavar="INT")
    r.add_argument("--replicas", type=int, metavar="INT")
    r.add_argument("--burn-in", dest="burn_in", type=int, metavar="INT")
    r.add_argument("--samples", type=int, metavar="INT")
    r.add_argument("--eps", type=float, action="append", metavar="FLOAT")
    r.add_argument("--tail", type=int, metavar="INT")
    r.add_argument("--track", action="append", metavar="CSV", help="tracked vector, e.g. 1,0")
    r.add_argument("--record-every", dest="record_every", type=int, metavar="INT")
    r.add_argument("--seed", type=int, metavar="INT")
    r.add_argument("--out-csv", dest="out_csv", metavar="PATH")
    r.add_argument("--out-json", dest="out_json", metavar="PATH")

    parser = _Parser(prog="randprod", description="Random matrix products and their derived products.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("run", parents=[common], help="record trajectories")
    p_est = sub.add_parser("estimate", parents=[common], help="estimate E[xi] or Lyapunov exponents")
    p_est.add_argument("--method", choices=METHODS, default=None)
    p_ver = sub.add_parser("verify", parents=[common], help="run a verification suite")
    p_ver.add_argument("--suite", choices=sorted(SUITES), default=None)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = build_config(args, needs_ensemble=args.command != "verify")
        if args.command == "run":
            return cmd_run(cfg)
        if args.command == "estimate":
            return cmd_estimate(cfg)
        return cmd_verify(cfg)
    except NumericalError as exc:
        print(f"numerical abort: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (RandProdError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
