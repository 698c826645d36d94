"""Monte Carlo estimators: Lyapunov exponents, the random limit directions
and the constant E[xi] by four routes.

Routes for E[xi]:

* ``psi_route``      psi_n(x) / n along long trajectories
* ``phi_route``      phi_n(x) / n, which only sees |E[xi]|
* ``integral_route`` <z~, B z> / <z~, A z> with z, z~ drawn from the two
                     invariant measures and (A, B) from the ensemble
* ``orbit_route``    (1/m) <z~(m), T_m z> / <z~(m), S_m z> on one orbit

Replicas run on independent streams derived from ``(seed, purpose, index)``
and are aggregated through mergeable (count, mean, M2) summaries.

Backward products S_n(sigma^{-n} w) are sampled with fresh forward pairs; the
pair sequence is i.i.d. so the laws agree, but no pathwise coupling with a
particular trajectory is implied.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import linalg
from .engine import simulate
from .ensembles import EnsembleSpec, sample_pairs
from .errors import HypothesisSuspect, NearZeroDenominator, SingularPerturbedAtom
from .rng import RngStream

DEFAULT_BURN_IN = 200
DEFAULT_STEPS = 10_000
DENOMINATOR_TOL = 1e-12
MAX_REJECT_FRACTION = 0.01
NONCONVERGENCE_DELTA = 0.1
_SAMPLE_CHUNK = 4096


@dataclass(frozen=True)
class RunningStats:
    """Mergeable (count, mean, M2) summary."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    @classmethod
    def of(cls, values: Iterable[float]) -> "RunningStats":
        v = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=float)
        if v.size == 0:
            return cls()
        mean = float(v.mean())
        return cls(int(v.size), mean, float(((v - mean) ** 2).sum()))

    def merge(self, other: "RunningStats") -> "RunningStats":
        if self.count == 0:
            return other
        if other.count == 0:
            return self
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * other.count / n
        m2 = self.m2 + other.m2 + delta * delta * self.count * other.count / n
        return RunningStats(n, mean, m2)

    @property
    def variance(self) -> float:
        return self.m2 / (self.count - 1) if self.count > 1 else 0.0

    @property
    def std_err(self) -> float:
        return math.sqrt(self.variance / self.count) if self.count > 1 else 0.0


def _stats(values: np.ndarray, chunk: int = 1024) -> RunningStats:
    total = RunningStats()
    for i in range(0, len(values), chunk):
        total = total.merge(RunningStats.of(values[i : i + chunk]))
    return total


@dataclass(frozen=True)
class Direction:
    unit: np.ndarray
    burn_in: int
    drift: float = 0.0

    @property
    def converged(self) -> bool:
        """False when the last two iterates still differ by delta > 0.1."""
        return self.drift <= NONCONVERGENCE_DELTA


@dataclass(frozen=True)
class LyapunovEstimate:
    gamma: float
    gamma2: float
    n_steps: int
    n_replicas: int
    std_err_gamma: float
    std_err_gamma2: float = 0.0
    replicas: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "gamma2": self.gamma2,
            "std_err_gamma": self.std_err_gamma,
            "std_err_gamma2": self.std_err_gamma2,
            "steps": self.n_steps,
            "replicas": self.n_replicas,
        }


@dataclass(frozen=True)
class XiEstimate:
    value: float
    abs_value: float
    method: str
    replicas: np.ndarray
    std_err: float
    steps: int = 0
    seed: int = 0
    ensemble_digest: str = ""
    rejected_samples: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def n_replicas(self) -> int:
        return len(self.replicas)

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "value": None if self.method == "phi_route" else self.value,
            "abs_value": self.abs_value,
            "std_err": self.std_err,
            "replicas": self.n_replicas,
            "steps": self.steps,
            "seed": self.seed,
            "ensemble_digest": self.ensemble_digest,
            "rejected_samples": self.rejected_samples,
        }
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _xi(method: str, values: np.ndarray, spec: EnsembleSpec, seed: int, steps: int,
        rejected: int = 0, **extra) -> XiEstimate:
    st = _stats(values)
    return XiEstimate(
        value=st.mean,
        abs_value=abs(st.mean),
        method=method,
        replicas=np.asarray(values, dtype=float),
        std_err=st.std_err,
        steps=steps,
        seed=seed,
        ensemble_digest=spec.digest(),
        rejected_samples=rejected,
        extra=extra,
    )


def _streams(seed: int, purpose: str, count: int) -> list[RngStream]:
    return [RngStream.for_purpose(seed, purpose, i) for i in range(count)]


def generic_start(d: int) -> np.ndarray:
    return np.ones(d) / math.sqrt(d)


def canonical_sign(v: np.ndarray) -> np.ndarray:
    """Flip v so its largest-magnitude entry is positive (cosmetic)."""
    v = np.asarray(v, dtype=float)
    idx = np.argmax(np.abs(v), axis=-1)
    lead = np.take_along_axis(v, idx[..., None], axis=-1)
    return np.where(lead < 0, -v, v)


# ---------------------------------------------------------------------------
# Lyapunov exponents


def estimate_lyapunov(spec: EnsembleSpec, steps: int = DEFAULT_STEPS, replicas: int = 16,
                      seed: int = 0) -> LyapunovEstimate:
    if steps < 100:
        raise ValueError("estimate_lyapunov needs steps >= 100")
    if replicas < 1:
        raise ValueError("replicas must be >= 1")
    state = simulate(spec, steps, _streams(seed, "lyapunov", replicas))
    g1 = state.log_norm_S / steps
    s1 = _stats(g1)
    if state.wedge_hat is None:
        g2 = np.full(replicas, np.nan)
        s2 = RunningStats(replicas, float("nan"), float("nan"))
    else:
        g2 = state.log_norm_wedge / steps - g1
        s2 = _stats(g2)
    return LyapunovEstimate(s1.mean, s2.mean, steps, replicas, s1.std_err, s2.std_err, g1)


# ---------------------------------------------------------------------------
# Random directions


def forward_direction(A: np.ndarray, x0: np.ndarray) -> tuple[np.ndarray, float]:
    """Normalized A_n ... A_1 x0 for A of shape (..., n, d, d), plus the
    delta between the last two iterates."""
    v = np.broadcast_to(x0, A.shape[:-3] + x0.shape[-1:]).copy()
    prev = v
    for j in range(A.shape[-3]):
        prev = v
        v = np.einsum("...ij,...j->...i", A[..., j, :, :], v)
        v /= np.linalg.norm(v, axis=-1, keepdims=True)
    return v, linalg.delta(v, prev)


def transpose_direction(A: np.ndarray, y0: np.ndarray) -> tuple[np.ndarray, float]:
    """Normalized A_1^T ... A_n^T y0 (innermost factor applied first)."""
    v = np.broadcast_to(y0, A.shape[:-3] + y0.shape[-1:]).copy()
    prev = v
    for j in range(A.shape[-3] - 1, -1, -1):
        prev = v
        v = np.einsum("...ji,...j->...i", A[..., j, :, :], v)
        v /= np.linalg.norm(v, axis=-1, keepdims=True)
    return v, linalg.delta(v, prev)


def sample_direction_nu(spec: EnsembleSpec, burn_in: int = DEFAULT_BURN_IN,
                        rng: RngStream | None = None, x0=None) -> Direction:
    """Approximate draw of Z from the invariant measure of the ensemble.

    Meaningful only for strongly irreducible, contracting ensembles; that is
    not checked, but ``Direction.converged`` reports a moving estimate.
    """
    if burn_in < 1:
        raise ValueError("burn_in must be >= 1")
    rng = rng or RngStream(0)
    x0 = linalg.normalize(generic_start(spec.dim) if x0 is None else x0)
    A, _ = sample_pairs(spec, rng, burn_in)
    v, drift = forward_direction(A, x0)
    return Direction(canonical_sign(v), burn_in, float(drift))


def sample_direction_nu_star(spec: EnsembleSpec, burn_in: int = DEFAULT_BURN_IN,
                             rng: RngStream | None = None, y0=None) -> Direction:
    """Approximate draw of Z~, the limit direction of A_1^T ... A_n^T.

    The transposed product is accumulated as a renormalized matrix,
    appending each new factor on the inner (right) end.
    """
    if burn_in < 1:
        raise ValueError("burn_in must be >= 1")
    rng = rng or RngStream(0)
    y0 = linalg.normalize(generic_start(spec.dim) if y0 is None else y0)
    A, _ = sample_pairs(spec, rng, burn_in)
    M = np.eye(spec.dim)
    prev = y0
    v = y0
    for j in range(burn_in):
        M = M @ A[j].T
        M /= linalg.spectral_norm(M)
        prev, v = v, linalg.normalize(M @ y0)
    return Direction(canonical_sign(v), burn_in, float(linalg.delta(v, prev)))


# ---------------------------------------------------------------------------
# E[xi] routes


def _check_rejections(rejected: int, total: int) -> None:
    if total and rejected > MAX_REJECT_FRACTION * total:
        raise HypothesisSuspect(
            f"{rejected} of {total} samples had a near-zero denominator; "
            "the ensemble is probably not strongly irreducible and contracting"
        )


def xi_samples_integral(spec: EnsembleSpec, n_samples: int, burn_in: int = DEFAULT_BURN_IN,
                        seed: int = 0) -> tuple[np.ndarray, int]:
    """Per-sample values <z~, B z> / <z~, A z> and the rejection count.

    z, z~ and (A, B) come from three separate streams; each sample consumes
    its own disjoint block of draws.
    """
    z_rng = RngStream.for_purpose(seed, "integral/nu")
    zt_rng = RngStream.for_purpose(seed, "integral/nu_star")
    ab_rng = RngStream.for_purpose(seed, "integral/pair")
    d = spec.dim
    start = generic_start(d)
    values, rejected = [], 0
    done = 0
    while done < n_samples:
        m = min(_SAMPLE_CHUNK, n_samples - done)
        Az, _ = sample_pairs(spec, z_rng, m * burn_in)
        Azt, _ = sample_pairs(spec, zt_rng, m * burn_in)
        A, B = sample_pairs(spec, ab_rng, m)
        z, _ = forward_direction(Az.reshape(m, burn_in, d, d), start)
        zt, _ = transpose_direction(Azt.reshape(m, burn_in, d, d), start)
        num = np.einsum("si,sij,sj->s", zt, B, z)
        den = np.einsum("si,sij,sj->s", zt, A, z)
        ok = np.abs(den) >= DENOMINATOR_TOL * np.atleast_1d(linalg.spectral_norm(A))
        rejected += int((~ok).sum())
        values.append(num[ok] / den[ok])
        done += m
    _check_rejections(rejected, n_samples)
    return np.concatenate(values), rejected


def estimate_xi_integral(spec: EnsembleSpec, n_samples: int = 100_000,
                         burn_in: int = DEFAULT_BURN_IN, seed: int = 0) -> XiEstimate:
    values, rejected = xi_samples_integral(spec, n_samples, burn_in, seed)
    return _xi("integral_route", values, spec, seed, burn_in, rejected, samples=n_samples)


def _trajectory_psi_phi(spec, steps, replicas, seed, x0, purpose) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    x0 = generic_start(spec.dim) if x0 is None else np.asarray(x0, dtype=float)
    half = steps // 2
    mid = {}

    def on_step(state):
        if state.n == half:
            mid["psi"], mid["phi"] = state.psi[:, 0].copy(), state.phi[:, 0].copy()

    state = simulate(spec, steps, _streams(seed, purpose, replicas), [x0],
                     on_step=on_step, call_at=(half,))
    psi, phi = state.psi[:, 0], state.phi[:, 0]
    hpsi = mid.get("psi", psi) / max(half, 1)
    hphi = mid.get("phi", phi) / max(half, 1)
    return psi / steps, phi / steps, hpsi, hphi


def estimate_xi_psi(spec: EnsembleSpec, steps: int = DEFAULT_STEPS, replicas: int = 64,
                    seed: int = 0, x0=None) -> XiEstimate:
    """psi_n(x)/n per replica; valid for E[xi] = 0 as well."""
    psi, _, hpsi, _ = _trajectory_psi_phi(spec, steps, replicas, seed, x0, "xi-psi")
    return _xi("psi_route", psi, spec, seed, steps, half_value=float(hpsi.mean()))


def estimate_abs_xi_phi(spec: EnsembleSpec, steps: int = DEFAULT_STEPS, replicas: int = 64,
                        seed: int = 0, x0=None) -> XiEstimate:
    """phi_n(x)/n per replica; estimates |E[xi]| only.

    Uses its own streams, so it is independent of the psi route.
    """
    _, phi, _, hphi = _trajectory_psi_phi(spec, steps, replicas, seed, x0, "xi-phi")
    return _xi("phi_route", phi, spec, seed, steps, half_value=float(hphi.mean()))


def xi_orbit_average(spec: EnsembleSpec, m: int = DEFAULT_STEPS, tail: int = DEFAULT_BURN_IN,
                     seed: int = 0, x0=None, y0=None, replicas: int = 64,
                     burn_in: int = DEFAULT_BURN_IN, z=None) -> XiEstimate:
    """(1/m) <z~, T_m z> / <z~, S_m z> with z~ estimated from the next
    ``tail`` pairs of the same stream (the shifted orbit) and z from an
    independent burn-in started at x0, unless z is supplied."""
    if m < 1 or tail < 1:
        raise ValueError("m and tail must be >= 1")
    d = spec.dim
    x0 = generic_start(d) if x0 is None else linalg.normalize(x0)
    y0 = generic_start(d) if y0 is None else linalg.normalize(y0)
    orbit = _streams(seed, "orbit/pairs", replicas)
    if z is None:
        zs = np.stack([
            forward_direction(sample_pairs(spec, RngStream.for_purpose(seed, "orbit/z", r), burn_in)[0], x0)[0]
            for r in range(replicas)
        ])
    else:
        zs = np.broadcast_to(linalg.normalize(z), (replicas, d)).copy()

    s, t = zs.copy(), np.zeros_like(zs)
    done = 0
    while done < m:
        k = min(1024, m - done)
        draws = [sample_pairs(spec, rng, k) for rng in orbit]
        A = np.stack([a for a, _ in draws], axis=1)
        B = np.stack([b for _, b in draws], axis=1)
        for j in range(k):
            As = np.einsum("rij,rj->ri", A[j], s)
            t = np.einsum("rij,rj->ri", B[j], s) + np.einsum("rij,rj->ri", A[j], t)
            nrm = np.linalg.norm(As, axis=-1, keepdims=True)
            s, t = As / nrm, t / nrm
        done += k
    tail_A = np.stack([sample_pairs(spec, rng, tail)[0] for rng in orbit])
    zt, _ = transpose_direction(tail_A, y0)
    den = np.einsum("ri,ri->r", zt, s)
    num = np.einsum("ri,ri->r", zt, t)
    ok = np.abs(den) >= DENOMINATOR_TOL
    rejected = int((~ok).sum())
    if rejected and ok.sum() == 0:
        raise NearZeroDenominator("every orbit replica had <z~, S_m z> ~ 0")
    _check_rejections(rejected, replicas)
    return _xi("orbit_route", num[ok] / den[ok] / m, spec, seed, m, rejected, tail=tail)


def gamma_eps_derivative(spec: EnsembleSpec, eps_list: Sequence[float], steps: int = DEFAULT_STEPS,
                         replicas: int = 64, seed: int = 0) -> list[tuple[float, float, float]]:
    """Finite differences (gamma(eps) - gamma(0)) / eps on common random numbers.

    Returns (eps, ratio, std_err) per eps; every replica runs the unperturbed
    and the perturbed product on the same pairs.
    """
    if spec.is_finite:
        for eps in eps_list:
            for i, atom in enumerate(spec.atoms):
                sv = linalg.singular_values(atom.A + eps * atom.B)
                if not sv[-1] > linalg.SINGULAR_RCOND * sv[0]:
                    raise SingularPerturbedAtom(f"A + eps B is singular for atom {i} at eps={eps}")

    def streams():
        return _streams(seed, "gamma-eps", replicas)

    base = simulate(spec, steps, streams()).log_norm_S
    out = []
    for eps in eps_list:
        if eps == 0:
            raise ValueError("eps must be nonzero")

        def perturb(A, B, eps=eps):
            P = A + eps * B
            if not spec.is_finite:
                sv = np.linalg.svd(P, compute_uv=False)
                if np.any(sv[..., -1] <= linalg.SINGULAR_RCOND * sv[..., 0]):
                    raise SingularPerturbedAtom(f"A + eps B is singular at eps={eps}")
            return P, np.zeros_like(B)

        pert = simulate(spec, steps, streams(), transform=perturb).log_norm_S
        st = _stats((pert - base) / (steps * eps))
        out.append((float(eps), st.mean, st.std_err))
    return out


def combined_se(*errs: float) -> float:
    return math.sqrt(sum(e * e for e in errs))
