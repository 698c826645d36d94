"""Checks of the qualitative limit behaviour on recorded trajectories.

Each check returns a DiagnosticSeries of (n, value) samples with a verdict
read from the last 10% of the samples only, since the limits are asymptotic
and early transients are expected.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import linalg
from .engine import ProductState, TrajectoryRecord, run_trajectories
from .ensembles import EnsembleSpec, sample_pairs
from .errors import NoTrackedVector, ZeroT
from .estimators import DEFAULT_BURN_IN, forward_direction, transpose_direction, generic_start
from .rng import RngStream

DEFAULT_TOL = 1e-3
TAIL_FRACTION = 0.1


@dataclass(frozen=True)
class Verdict:
    kind: str  # "converged_to", "diverged" or "inconclusive"
    target: float | None = None
    tol: float | None = None

    def __str__(self) -> str:
        if self.kind == "converged_to":
            return f"converged_to({self.target:g}, {self.tol:g})"
        if self.kind == "diverged":
            return f"diverged({self.tol:g})"
        return "inconclusive"

    @property
    def passed(self) -> bool:
        return self.kind == "converged_to"


@dataclass
class DiagnosticSeries:
    name: str
    samples: list[tuple[int, float]]
    verdict: Verdict
    detail: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def tail_max(self) -> float:
        tail = tail_values(self.samples)
        return float(np.max(tail)) if tail.size else math.nan

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "verdict": str(self.verdict),
            "detail": self.detail,
            "n_samples": len(self.samples),
            "tail_max": _json_float(self.tail_max),
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["n", "value"])
        for n, v in self.samples:
            writer.writerow([int(n), format(float(v), ".17g")])
        return buf.getvalue()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.csv_text())


def _json_float(v: float):
    return None if not math.isfinite(v) else float(v)


def tail_values(samples: list[tuple[int, float]]) -> np.ndarray:
    if not samples:
        return np.array([])
    k = max(1, int(math.ceil(TAIL_FRACTION * len(samples))))
    return np.array([v for _, v in samples[-k:]], dtype=float)


def verdict_towards(samples: list[tuple[int, float]], target: float = 0.0, tol: float = DEFAULT_TOL) -> Verdict:
    """converged_to if the tail stays within tol of target, diverged if the
    whole tail is farther than tol, inconclusive otherwise."""
    tail = tail_values(samples)
    if tail.size == 0:
        return Verdict("inconclusive")
    dist = np.abs(tail - target)
    if dist.max() < tol:
        return Verdict("converged_to", target, tol)
    if dist.min() > tol:
        return Verdict("diverged", None, tol)
    return Verdict("inconclusive")


def _series(record: TrajectoryRecord, column: str, k: int) -> list[tuple[int, float]]:
    if not 0 <= k < record.n_tracked:
        raise NoTrackedVector(f"record has no tracked vector {k}")
    n = record.n
    v = record.tracked_column(column, k)
    keep = np.isfinite(v)  # phi = 0 rows are NaN and skipped
    return [(int(a), float(b)) for a, b in zip(n[keep], v[keep])]


def alignment_curve(record: TrajectoryRecord, tracked_index: int = 0,
                    tol: float = DEFAULT_TOL) -> DiagnosticSeries:
    """delta(x_n, y_n) along the record, skipping rows with phi = 0."""
    samples = _series(record, "delta_xy", tracked_index)
    skipped = len(record.n) - len(samples)
    return DiagnosticSeries(
        f"alignment_{tracked_index}", samples, verdict_towards(samples, 0.0, tol),
        f"delta(x_n, y_n); {skipped} rows with phi = 0 skipped",
    )


def sign_alignment(record: TrajectoryRecord, tracked_index: int, xi_sign: int,
                   tol: float = DEFAULT_TOL) -> DiagnosticSeries:
    """||x_n - y_n|| for xi_sign = +1, ||x_n + y_n|| for xi_sign = -1."""
    if xi_sign not in (1, -1):
        raise ValueError("xi_sign must be +1 or -1")
    column = "sign_gap_plus" if xi_sign == 1 else "sign_gap_minus"
    samples = _series(record, column, tracked_index)
    op = "-" if xi_sign == 1 else "+"
    return DiagnosticSeries(
        f"sign_alignment_{tracked_index}", samples, verdict_towards(samples, 0.0, tol),
        f"||x_n {op} y_n||",
    )


def rank_one_ratio(state: ProductState):
    """sigma_2 / sigma_1 of U (equivalently of T_n)."""
    U = state.U
    if U.shape[-1] < 2:
        raise ValueError("rank_one_ratio needs d >= 2")
    sv = np.linalg.svd(U, compute_uv=False)
    top = sv[..., 0]
    if np.any(np.asarray(state.t_zero)) or np.any(top == 0.0):
        raise ZeroT("T_n is zero; the ratio is undefined")
    out = sv[..., 1] / top
    return float(out) if np.ndim(out) == 0 else out


def zero_visits(record: TrajectoryRecord, tol_policy="engine") -> list[int]:
    """Steps n >= 1 where T_n counts as zero.

    ``"engine"`` reads the engine's snapped flag for the whole matrix,
    ``"tracked"`` uses phi_n = 0 for tracked vector 0, and a float uses
    phi_n < tol_policy.
    """
    n = record.n
    if tol_policy == "engine":
        hit = record.column("t_zero") != 0.0
    elif tol_policy == "tracked":
        hit = record.tracked_column("phi", 0) == 0.0
    else:
        hit = record.tracked_column("phi", 0) < float(tol_policy)
    return [int(k) for k in n[hit & (n >= 1)]]


def wedge_ratio(record: TrajectoryRecord, i: int = 0, j: int = 1) -> DiagnosticSeries:
    """||wedge^2 S_n|| / (||S_n x|| ||S_n y||) for tracked vectors x, y."""
    for k in (i, j):
        if not 0 <= k < record.n_tracked:
            raise NoTrackedVector(f"record has no tracked vector {k}")
    logs = (record.column("log_norm_wedge") - record.tracked_column("log_norm_sx", i)
            - record.tracked_column("log_norm_sx", j))
    samples = [(int(a), float(math.exp(b))) for a, b in zip(record.n, logs)]
    return DiagnosticSeries(f"wedge_ratio_{i}_{j}", samples, verdict_towards(samples, 0.0, 1e-6),
                            "||wedge^2 S_n|| / (||S_n x|| ||S_n y||)")


def norm_ratio_errors(state: ProductState, xs, y0=None) -> np.ndarray:
    """| ||S_n x|| / ||S_n|| - |<x, z>| | for each unit x, with z = S_n^T y0
    normalized (the transpose-product direction of the same trajectory)."""
    S_hat = state.S_hat
    d = S_hat.shape[-1]
    y0 = generic_start(d) if y0 is None else np.asarray(y0, dtype=float)
    z = linalg.normalize(S_hat.T @ y0)
    xs = linalg.normalize(np.atleast_2d(np.asarray(xs, dtype=float)))
    lhs = np.linalg.norm(xs @ S_hat.T, axis=-1) / linalg.spectral_norm(S_hat)
    return np.abs(lhs - np.abs(xs @ z))


def direction_overlaps(spec: EnsembleSpec, n_draws: int, seed: int = 0,
                       burn_in: int = DEFAULT_BURN_IN) -> np.ndarray:
    """|<z~, z>| for independent draws z ~ nu and z~ ~ nu*."""
    d = spec.dim
    start = generic_start(d)
    A, _ = sample_pairs(spec, RngStream.for_purpose(seed, "overlap/nu"), n_draws * burn_in)
    At, _ = sample_pairs(spec, RngStream.for_purpose(seed, "overlap/nu_star"), n_draws * burn_in)
    z, _ = forward_direction(A.reshape(n_draws, burn_in, d, d), start)
    zt, _ = transpose_direction(At.reshape(n_draws, burn_in, d, d), start)
    return np.abs(np.einsum("si,si->s", z, zt))


def theorem_records(spec: EnsembleSpec, steps: int, seeds: Iterable[int],
                    tracked_inits, record_every: int = 1) -> list[TrajectoryRecord]:
    """Records for several seeds, one diagnostic stream per seed."""
    rngs = [RngStream.for_purpose(s, "diagnostics") for s in seeds]
    return run_trajectories(spec, steps, rngs, tracked_inits, record_every)

