"""Verification suites: oracle cross-checks, closed-form fixtures and the
asymptotic theorem checks.

Every check is a function of the seed alone and returns a Check whose
``values`` are deterministic; wall-clock time is kept separately so reports
stay byte-identical across runs.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diagnostics as diag
from .engine import (
    block_oracle, dual_product_oracle, replay_pairs, run_trajectories, run_trajectory,
    simulate, trace_cocycle_check,
)
from .ensembles import builtin, parametric
from .estimators import (
    combined_se, estimate_abs_xi_phi, estimate_xi_integral, estimate_xi_psi,
    gamma_eps_derivative, generic_start, xi_orbit_average,
)
from .rng import RngStream


@dataclass
class Check:
    key: str
    title: str
    passed: bool
    values: dict
    seconds: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict:
        return {"key": self.key, "title": self.title, "passed": self.passed,
                "values": {k: _clean(v) for k, v in sorted(self.values.items())}}


def _clean(v):
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def _timed(fn: Callable[[int], Check]) -> Callable[[int], Check]:
    def run(seed: int) -> Check:
        t0 = time.perf_counter()
        out = fn(seed)
        out.seconds = time.perf_counter() - t0
        return out
    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def _stream(seed: int, purpose: str, i: int = 0) -> RngStream:
    return RngStream.for_purpose(seed, f"verify/{purpose}", i)


# ---------------------------------------------------------------------------
# oracles


@_timed
def oracle_equivalence(seed: int, n_seeds: int = 20, steps: int = 200) -> Check:
    """Engine (S_n, T_n) against the block and dual-number oracles."""
    worst = 0.0
    for d in (2, 3):
        spec = parametric(d)
        for i in range(n_seeds):
            rng = _stream(seed, f"oracle-{d}", i)
            final = simulate(spec, steps, [rng]).replica(0)
            A, B = replay_pairs(spec, rng, steps)
            pairs = list(zip(A, B))
            S, T = final.S, final.T
            for So, To in (block_oracle(pairs), dual_product_oracle(pairs)):
                worst = max(worst, _rel(S, So), _rel(T, To))
    return Check("oracle_equivalence", "engine vs block and dual oracles",
                 worst <= 1e-10, {"max_rel_err": worst, "tol": 1e-10})


TRACE_ALPHA = 0.05


@_timed
def trace_cocycle(seed: int, n_seeds: int = 20, steps: int = 500) -> Check:
    """tr(T_n S_n^-1) against the running sum of tr(B A^-1)."""
    worst = 0.0
    ok = True
    for d in (2, 3):
        # Inverting S_hat amplifies rounding in U by cond(S_n), which grows
        # like exp((gamma_1 - gamma_2) n); alpha = 0.05 keeps it below ~1e3.
        spec = parametric(d, alpha=TRACE_ALPHA)
        rngs = [_stream(seed, f"trace-{d}", i) for i in range(n_seeds)]
        final = simulate(spec, steps, rngs)
        for r in range(n_seeds):
            lhs, rhs, good = trace_cocycle_check(final.replica(r))
            ok &= good
            worst = max(worst, abs(lhs - rhs) / max(1.0, abs(rhs)))
    return Check("trace_cocycle", "trace cocycle at n = 500",
                 bool(ok and worst <= 1e-8), {"max_scaled_err": worst, "tol": 1e-8})


@_timed
def linear_trick(seed: int, steps: int = 1000) -> Check:
    """psi_n(B + alpha A) - psi_n(B) = n alpha on replayed pairs."""
    spec = builtin("positive_bernoulli")
    x = generic_start(2)
    rng = _stream(seed, "linear")
    base = run_trajectory(spec, steps, rng.fresh(), [x])
    n = base.n
    psi0 = base.tracked_column("psi", 0)
    worst = 0.0
    for alpha in (0.5, -0.5):
        shifted = run_trajectory(spec, steps, rng.fresh(), [x],
                                 transform=lambda A, B, a=alpha: (A, B + a * A))
        diff = shifted.tracked_column("psi", 0) - psi0
        worst = max(worst, float(np.max(np.abs(diff - n * alpha))))
    return Check("linear_trick", "psi shift by n alpha", worst <= 1e-9,
                 {"max_abs_err": worst, "tol": 1e-9})


# ---------------------------------------------------------------------------
# closed-form examples


@_timed
def pure_rotation(seed: int, steps: int = 1000, theta: float = 1.0) -> Check:
    """phi_n / n = 1, psi_n / n = cos theta, delta = sin theta."""
    spec = builtin("pure_rotation", {"theta": theta})
    rng = np.random.default_rng(_stream(seed, "rotation-x").stream_id)
    xs = [np.array([1.0, 0.0]), rng.standard_normal(2)]
    rec = run_trajectory(spec, steps, _stream(seed, "rotation"), xs)
    n = rec.n
    err = 0.0
    for k in range(len(xs)):
        err = max(err,
                  float(np.max(np.abs(rec.tracked_column("phi", k) / n - 1.0))),
                  float(np.max(np.abs(rec.tracked_column("psi", k) / n - math.cos(theta)))),
                  float(np.max(np.abs(rec.tracked_column("delta_xy", k) - abs(math.sin(theta))))))
    return Check("pure_rotation", "rotation fixture (theta = 1)", err <= 1e-10,
                 {"max_abs_err": err, "tol": 1e-10})


def diag_rotation_phi(n: np.ndarray, alpha: float, beta: float, which: int) -> np.ndarray:
    """Closed-form phi_n for A = diag(alpha, beta), B = quarter turn.

    For e1 the sum is sum_j (beta/alpha)^j / alpha, for e2 it is
    sum_j (alpha/beta)^j / beta, both over j = 0 .. n-1.
    """
    n = np.asarray(n, dtype=float)
    r = beta / alpha if which == 0 else alpha / beta
    scale = 1.0 / alpha if which == 0 else 1.0 / beta
    return scale * (r ** n - 1.0) / (r - 1.0)


@_timed
def diag_rotation(seed: int) -> Check:
    """Contracting and expanding directions of the diagonal-plus-rotation pair."""
    alpha, beta = 2.0, 0.5
    spec = builtin("diag_rotation", {"alpha": alpha, "beta": beta})
    r1 = run_trajectory(spec, 1000, _stream(seed, "diag"), [[1.0, 0.0]])
    n1 = r1.n
    phi1 = r1.tracked_column("phi", 0)
    err1 = float(np.max(np.abs(phi1 - diag_rotation_phi(n1, alpha, beta, 0))))
    last = float(phi1[-1] / n1[-1])
    r2 = run_trajectory(spec, 25, _stream(seed, "diag"), [[0.0, 1.0]])
    n2 = r2.n
    phi2 = r2.tracked_column("phi", 0)
    err2 = float(np.max(np.abs(phi2 / diag_rotation_phi(n2, alpha, beta, 1) - 1.0)))
    over = n2[phi2 / n2 > 1e3]
    first = int(over[0]) if over.size else -1
    ok = last < 1e-2 and err1 <= 1e-8 and err2 <= 1e-8 and 0 < first <= 25
    return Check("diag_rotation", "diagonal-rotation fixture", ok, {
        "e1_phi_over_n_at_1000": last, "e1_max_abs_err": err1,
        "e2_max_rel_err": err2, "e2_first_n_over_1e3": first,
    })


def walk_from_pairs(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Partial sums of the signs s_k with B_k = s_k A_k."""
    return np.cumsum(np.sign(B[:, 0, 0] / A[:, 0, 0]))


@_timed
def signed_pair(seed: int, n_seeds: int = 100, steps: int = 10_000,
                n_samples: int = 100_000) -> Check:
    """psi_n is the simple random walk of the signs; it returns to zero;
    the integral route gives E[xi] = 0."""
    spec = builtin("signed_pair")
    rngs = [_stream(seed, "signed", i) for i in range(n_seeds)]
    recs = run_trajectories(spec, steps, rngs, [[1.0, 0.0]])
    int_err = walk_err = 0.0
    zero_match = True
    visited = 0
    for rng, rec in zip(rngs, recs):
        psi = rec.tracked_column("psi", 0)
        int_err = max(int_err, float(np.max(np.abs(psi - np.round(psi)))))
        walk = walk_from_pairs(*replay_pairs(spec, rng, steps))
        walk_err = max(walk_err, float(np.max(np.abs(psi - walk))))
        visits = diag.zero_visits(rec)
        zero_match &= visits == [int(k) for k in np.flatnonzero(walk == 0) + 1]
        visited += bool(visits)
    frac = visited / n_seeds
    est = estimate_xi_integral(spec, n_samples, seed=seed)
    ok = (int_err <= 1e-9 and walk_err <= 1e-9 and zero_match and frac >= 0.95
          and est.std_err <= 0.02 and abs(est.value) <= 3 * est.std_err)
    return Check("signed_pair", "signed-pair random walk fixture", ok, {
        "max_integer_err": int_err, "max_walk_err": walk_err, "zero_sets_match": zero_match,
        "fraction_with_zero_visits": frac, "integral_value": est.value,
        "integral_std_err": est.std_err,
    })


@_timed
def scalar(seed: int, steps: int = 100_000, replicas: int = 16) -> Check:
    """psi_n / n and phi_n / n approach E[b / a] = 1."""
    spec = builtin("scalar_iid")
    psi = estimate_xi_psi(spec, steps, replicas, seed)
    phi = estimate_abs_xi_phi(spec, steps, replicas, seed)
    ok = all(e.std_err < 5e-3 and abs(e.abs_value - 1.0) <= 3 * e.std_err for e in (psi, phi))
    return Check("scalar", "scalar fixture", ok, {
        "psi": psi.value, "psi_std_err": psi.std_err,
        "phi": phi.abs_value, "phi_std_err": phi.std_err,
    })


# ---------------------------------------------------------------------------
# estimators and limit theorems


@_timed
def estimator_consistency(seed: int, steps: int = 10_000, replicas: int = 64,
                          n_samples: int = 100_000) -> Check:
    """psi, integral and orbit routes agree; phi matches |psi|."""
    spec = builtin("positive_bernoulli")
    psi = estimate_xi_psi(spec, steps, replicas, seed)
    phi = estimate_abs_xi_phi(spec, steps, replicas, seed)
    integral = estimate_xi_integral(spec, n_samples, seed=seed)
    orbit = xi_orbit_average(spec, steps, seed=seed, replicas=replicas)
    routes = {"psi": psi, "integral": integral, "orbit": orbit}
    values: dict = {f"{k}": v.value for k, v in routes.items()}
    values.update({f"{k}_std_err": v.std_err for k, v in routes.items()})
    ok = True
    names = list(routes)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            gap = abs(routes[a].value - routes[b].value)
            z = gap / combined_se(routes[a].std_err, routes[b].std_err)
            values[f"z_{a}_{b}"] = z
            ok &= z <= 3.0
    z_phi = abs(phi.abs_value - abs(psi.value)) / combined_se(phi.std_err, psi.std_err)
    values.update({"phi": phi.abs_value, "phi_std_err": phi.std_err, "z_phi_abs_psi": z_phi})
    return Check("estimator_consistency", "E[xi] routes agree", bool(ok and z_phi <= 3.0), values)


def scalar_gamma_ratio(eps: float, a: float = 2.0, bs=(1.0, 3.0)) -> float:
    """(E log|a + eps b| - log|a|) / eps for b uniform on bs."""
    return float(np.mean([math.log1p(eps * b / a) for b in bs]) / eps)


@_timed
def derivative(seed: int, eps: float = 1e-3, steps: int = 10_000, replicas: int = 64) -> Check:
    """Finite difference of gamma(eps) against the psi route."""
    values: dict = {"eps": eps}
    ok = True
    for name in ("scalar_iid", "positive_bernoulli"):
        spec = builtin(name)
        (_, ratio, se), = gamma_eps_derivative(spec, [eps], steps, replicas, seed)
        psi = estimate_xi_psi(spec, steps, replicas, seed)
        gap = abs(ratio - psi.value)
        allowed = max(3 * combined_se(se, psi.std_err), 5e-3)
        ok &= gap <= allowed
        values.update({f"{name}_ratio": ratio, f"{name}_ratio_std_err": se,
                       f"{name}_psi": psi.value, f"{name}_psi_std_err": psi.std_err, f"{name}_gap": gap, f"{name}_allowed": allowed})
        if name == "scalar_iid":
            exact = scalar_gamma_ratio(eps)
            values["scalar_iid_exact_ratio"] = exact
            ok &= abs(ratio - exact) <= max(3 * se, 1e-12)
    return Check("derivative", "gamma(eps) finite difference", bool(ok), values)


@_timed
def theorems(seed: int, n_seeds: int = 10, steps: int = 10_000, short: int = 500,
             n_x: int = 20) -> Check:
    """Alignment, signed alignment, rank-one collapse, wedge decay and the
    uniform norm-ratio limit on positive_bernoulli."""
    spec = builtin("positive_bernoulli")
    seeds = [seed * 1000 + i for i in range(n_seeds)]
    xs = [[1.0, 0.0], [0.0, 1.0]]
    sign_est = estimate_xi_psi(spec, 2000, 16, seed)
    xi_sign = 1 if sign_est.value >= 0 else -1

    long = diag.theorem_records(spec, steps, seeds, xs, record_every=10)
    align = max(diag.alignment_curve(r, k).tail_max for r in long for k in range(2))
    gap = max(diag.sign_alignment(r, k, xi_sign).tail_max for r in long for k in range(2))

    recs = diag.theorem_records(spec, short, seeds, xs)
    rank_one = max(diag.rank_one_ratio(r.final_state) for r in recs)
    wedge = max(diag.wedge_ratio(r).samples[-1][1] for r in recs)
    rng = np.random.default_rng(_stream(seed, "unit-x").stream_id)
    units = rng.standard_normal((n_x, 2))
    norm_err = max(float(diag.norm_ratio_errors(r.final_state, units).max()) for r in recs)
    overlap = float(diag.direction_overlaps(spec, 1000, seed).min())

    ok = (align < 1e-3 and gap < 1e-3 and rank_one < 1e-6 and wedge < 1e-6
          and norm_err < 1e-3 and overlap > 1e-3)
    return Check("theorems", "limit theorems on positive_bernoulli", ok, {
        "xi_sign": xi_sign, "alignment_tail_max": align, "sign_gap_tail_max": gap,
        "rank_one_ratio_max": rank_one, "wedge_ratio_max": wedge,
        "norm_ratio_max_err": norm_err, "overlap_min": overlap,
    })


SUITES: dict[str, list[Callable[[int], Check]]] = {
    "oracles": [oracle_equivalence, trace_cocycle, linear_trick],
    "examples": [scalar, signed_pair, diag_rotation, pure_rotation],
    "theorems": [estimator_consistency, derivative, theorems],
}
SUITES["all"] = SUITES["oracles"] + SUITES["examples"] + SUITES["theorems"]


def run_suite(name: str, seed: int) -> list[Check]:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    return [check(seed) for check in SUITES[name]]
