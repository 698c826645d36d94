"""Renormalized recursion for the product S_n = A_n ... A_1 and its first
derived product T_n = B_n S_{n-1} + A_n T_{n-1}.

The state stores ``S_hat = S_n / ||S_n||_2``, ``U = T_n / ||S_n||_2`` and
``log ||S_n||_2`` so that neither overflows.  Tracked vectors x carry
``S_n x / ||S_n x||`` and ``T_n x / ||S_n x||`` (whose norm is phi_n and whose
projection on the first is psi_n).  All arrays may have leading batch
dimensions: a state with ``S_hat.shape == (R, d, d)`` advances R independent
replicas at once.

Two exact oracles (block-triangular embedding and dual-number jets) and the
trace cocycle tr(T_n S_n^{-1}) provide independent cross-checks.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import linalg
from .ensembles import EnsembleSpec, sample_pairs
from .errors import NonInvertibleA, NumericalError, Overflow, SingularMatrix, ZeroVector
from .rng import RngStream

# T (or T x) counts as exactly zero below ZERO_TOL * (1 + n), relative to S.
ZERO_TOL = 1e-14
# ||A x|| below this times ||A|| means A is numerically singular on x.
NONINVERTIBLE_TOL = 1e-13

Pair = tuple[np.ndarray, np.ndarray]


def _norm(v: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("...i,...i->...", v, v))


def _dot(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.einsum("...i,...i->...", u, v)


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # batched 1x1 matmul is far slower than a broadcast multiply
    if a.shape[-1] == 1 and b.shape[-2] == 1:
        return a * b
    return a @ b


@dataclass(frozen=True)
class TrackedVector:
    x0: np.ndarray
    sx_hat: np.ndarray
    log_norm_sx: float
    phi: float
    psi: float
    y_hat: np.ndarray | None


@dataclass(frozen=True)
class ProductState:
    n: int
    S_hat: np.ndarray
    U: np.ndarray
    log_norm_S: np.ndarray
    x0: np.ndarray
    sx_hat: np.ndarray
    log_norm_sx: np.ndarray
    t_vec: np.ndarray
    trace_sum: np.ndarray
    wedge_hat: np.ndarray | None = None
    log_wedge_scale: np.ndarray | None = None
    t_zero: np.ndarray = field(default_factory=lambda: np.array(False))

    @property
    def dim(self) -> int:
        return self.S_hat.shape[-1]

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.S_hat.shape[:-2]

    @property
    def n_tracked(self) -> int:
        return self.x0.shape[-2]

    @property
    def S(self) -> np.ndarray:
        """S_n itself; overflows for long products."""
        return self.S_hat * np.exp(self.log_norm_S)[..., None, None]

    @property
    def T(self) -> np.ndarray:
        return self.U * np.exp(self.log_norm_S)[..., None, None]

    @property
    def phi(self) -> np.ndarray:
        return _norm(self.t_vec)

    @property
    def psi(self) -> np.ndarray:
        return _dot(self.sx_hat, self.t_vec)

    @property
    def y_hat(self) -> np.ndarray:
        """T_n x / ||T_n x||; NaN rows where phi = 0."""
        phi = self.phi[..., None]
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(phi > 0.0, self.t_vec / phi, np.nan)

    @property
    def log_norm_wedge(self) -> np.ndarray | None:
        """log ||wedge^2 S_n||_2, or None when d < 2."""
        if self.wedge_hat is None:
            return None
        return self.log_wedge_scale + np.log(linalg.spectral_norm(self.wedge_hat))

    @property
    def tracked(self) -> list[TrackedVector]:
        if self.batch_shape:
            raise ValueError("tracked views are only available for unbatched states")
        out = []
        for k in range(self.n_tracked):
            phi = float(_norm(self.t_vec[k]))
            out.append(
                TrackedVector(
                    x0=self.x0[k],
                    sx_hat=self.sx_hat[k],
                    log_norm_sx=float(self.log_norm_sx[k]),
                    phi=phi,
                    psi=float(_dot(self.sx_hat[k], self.t_vec[k])),
                    y_hat=self.t_vec[k] / phi if phi > 0.0 else None,
                )
            )
        return out

    def replica(self, r: int) -> "ProductState":
        """Unbatched view of replica r of a state with one batch axis."""
        def pick(a):
            return None if a is None else a[r]
        return ProductState(
            self.n, self.S_hat[r], self.U[r], self.log_norm_S[r], self.x0[r],
            self.sx_hat[r], self.log_norm_sx[r], self.t_vec[r], self.trace_sum[r],
            pick(self.wedge_hat), pick(self.log_wedge_scale), self.t_zero[r],
        )


def init_state(d: int, tracked_inits: Iterable = (), batch: tuple[int, ...] = ()) -> ProductState:
    """State at n = 0: S = I, T = 0, tracked vectors normalized."""
    inits = [np.asarray(x, dtype=float).reshape(-1) for x in tracked_inits]
    for x in inits:
        if x.shape != (d,):
            raise ValueError(f"tracked vector has dimension {x.shape[0]}, expected {d}")
        if not np.any(x):
            raise ZeroVector("tracked initial vector is zero")
    k = len(inits)
    x0 = np.array([x / np.linalg.norm(x) for x in inits]).reshape(k, d)
    x0 = np.broadcast_to(x0, batch + (k, d)).copy()
    eye = np.broadcast_to(np.eye(d), batch + (d, d)).copy()
    wedge = None
    wscale = None
    if d >= 2:
        m = d * (d - 1) // 2
        wedge = np.broadcast_to(np.eye(m), batch + (m, m)).copy()
        wscale = np.zeros(batch)
    return ProductState(
        n=0,
        S_hat=eye,
        U=np.zeros(batch + (d, d)),
        log_norm_S=np.zeros(batch),
        x0=x0,
        sx_hat=x0.copy(),
        log_norm_sx=np.zeros(batch + (k,)),
        t_vec=np.zeros(batch + (k, d)),
        trace_sum=np.zeros(batch),
        wedge_hat=wedge,
        log_wedge_scale=wscale,
        t_zero=np.ones(batch, dtype=bool),
    )


def step(state: ProductState, A, B, trace_increment=None, *, wedge_A=None,
         a_frob=None) -> ProductState:
    """Advance by one pair (A, B) (batched like the state).

    Callers that precompute per-pair quantities in bulk may pass them:
    ``trace_increment`` = tr(B A^{-1}), ``wedge_A`` = exterior_square(A),
    ``a_frob`` = Frobenius norm of A.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    d = state.dim
    if A.shape[-2:] != (d, d) or B.shape[-2:] != (d, d):
        raise ValueError(f"pair dimension mismatch: expected ({d}, {d})")
    n = state.n + 1
    zero_tol = ZERO_TOL * (1 + n)

    S_raw = _mm(A, state.S_hat)
    U_raw = _mm(B, state.S_hat) + _mm(A, state.U)
    s = linalg.opnorm(S_raw)
    if not s.min() > 0.0:
        raise NonInvertibleA("A annihilated the product", step=n)
    S_hat = S_raw / s[..., None, None]
    U = U_raw / s[..., None, None]
    t_zero = (U * U).sum(axis=(-2, -1)) < zero_tol * zero_tol
    if t_zero.any():
        U = np.where(t_zero[..., None, None], 0.0, U)
    log_norm_S = state.log_norm_S + np.log(s)

    sx_hat, t_vec, log_norm_sx = state.sx_hat, state.t_vec, state.log_norm_sx
    if state.n_tracked:
        # x_{m+1} ~ A x_m ; T_{m+1}x / ||S_m x|| = B x_m + A (T_m x / ||S_m x||)
        At = np.swapaxes(A, -1, -2)
        ax = _mm(state.sx_hat, At)
        tx = _mm(state.sx_hat, np.swapaxes(B, -1, -2)) + _mm(state.t_vec, At)
        nax = np.sqrt((ax * ax).sum(axis=-1))
        if a_frob is None:
            a_frob = np.sqrt((A * A).sum(axis=(-2, -1)))
        if (nax < NONINVERTIBLE_TOL * a_frob[..., None]).any():
            raise NonInvertibleA("A maps a tracked direction to ~0", step=n)
        sx_hat = ax / nax[..., None]
        t_vec = tx / nax[..., None]
        if not np.abs(t_vec).max() < np.inf:
            raise Overflow("phi overflowed double range", step=n)
        with np.errstate(over="ignore"):
            phi2 = (t_vec * t_vec).sum(axis=-1)
        zero = phi2 < zero_tol * zero_tol
        if zero.any():
            t_vec = np.where(zero[..., None], 0.0, t_vec)
        log_norm_sx = state.log_norm_sx + np.log(nax)

    if trace_increment is None:
        trace_increment = np.trace(np.linalg.solve(A, B), axis1=-2, axis2=-1)
    trace_sum = state.trace_sum + trace_increment

    wedge_hat, wscale = state.wedge_hat, state.log_wedge_scale
    if wedge_hat is not None:
        if wedge_A is None:
            wedge_A = linalg.exterior_square(A)
        w_raw = _mm(wedge_A, wedge_hat)
        # Frobenius renormalization; the l2 norm is taken on read.
        fw = np.sqrt((w_raw * w_raw).sum(axis=(-2, -1)))
        wedge_hat = w_raw / fw[..., None, None]
        wscale = wscale + np.log(fw)

    return ProductState(
        n, S_hat, U, log_norm_S, state.x0, sx_hat, log_norm_sx, t_vec, trace_sum,
        wedge_hat, wscale, t_zero,
    )


# ---------------------------------------------------------------------------
# Oracles


def _check_finite(m: np.ndarray, i: int) -> None:
    if not np.all(np.isfinite(m)):
        raise Overflow("oracle product left double range; shorten the sequence", step=i)


def block_oracle(pairs: Sequence[Pair]) -> Pair:
    """(S_n, T_n) read off the product of the 2d x 2d blocks [[A, B], [0, A]]."""
    pairs = list(pairs)
    d = np.asarray(pairs[0][0]).shape[-1]
    M = np.eye(2 * d)
    for i, (A, B) in enumerate(pairs, start=1):
        C = np.zeros((2 * d, 2 * d))
        C[:d, :d] = A
        C[:d, d:] = B
        C[d:, d:] = A
        with np.errstate(over="ignore", invalid="ignore"):
            M = C @ M
        _check_finite(M, i)
    return M[:d, :d].copy(), M[:d, d:].copy()


def dual_product_oracle(pairs: Sequence[Pair]) -> Pair:
    """(S_n, T_n) as value and derivative of the product of jets A + eps B."""
    pairs = list(pairs)
    d = np.asarray(pairs[0][0]).shape[-1]
    V, D = np.eye(d), np.zeros((d, d))
    for i, (A, B) in enumerate(pairs, start=1):
        with np.errstate(over="ignore", invalid="ignore"):
            V, D = A @ V, A @ D + B @ V
        _check_finite(V, i)
        _check_finite(D, i)
    return V, D


def trace_cocycle(state: ProductState) -> float:
    """tr(T_n S_n^{-1}) = tr(U S_hat^{-1}); the scale factors cancel."""
    S_inv = linalg.invert(state.S_hat)
    return float(np.trace(state.U @ S_inv))


def trace_cocycle_check(state: ProductState, running_sum: float | None = None) -> tuple[float, float, bool]:
    if state.n < 1:
        raise ValueError("trace cocycle needs n >= 1")
    rhs = float(state.trace_sum if running_sum is None else running_sum)
    lhs = trace_cocycle(state)
    return lhs, rhs, abs(lhs - rhs) <= 1e-8 * max(1.0, abs(rhs))


# ---------------------------------------------------------------------------
# Trajectories

PairTransform = Callable[[np.ndarray, np.ndarray], Pair]


def simulate(
    spec: EnsembleSpec,
    steps: int,
    rngs: Sequence[RngStream],
    tracked_inits: Iterable = (),
    *,
    transform: PairTransform | None = None,
    on_step: Callable[[ProductState], None] | None = None,
    call_at: Iterable[int] | None = None,
    chunk: int = 1024,
) -> ProductState:
    """Run one replica per stream in lockstep and return the batched state.

    ``transform`` rewrites each sampled pair before it is applied (perturbed
    or shifted ensembles on common random numbers).  ``on_step`` sees every
    intermediate state, or only the states at the steps in ``call_at``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    R = len(rngs)
    state = init_state(spec.dim, tracked_inits, batch=(R,))
    calls = None if call_at is None else set(int(n) for n in call_at)
    if spec.dim == 1 and (on_step is None or calls is not None):
        return _simulate_scalar(spec, steps, rngs, state.x0, transform, on_step, calls or (), chunk)
    done = 0
    while done < steps:
        m = min(chunk, steps - done)
        draws = [sample_pairs(spec, rng, m) for rng in rngs]
        A_all = np.stack([a for a, _ in draws], axis=1)
        B_all = np.stack([b for _, b in draws], axis=1)
        if transform is not None:
            A_all, B_all = transform(A_all, B_all)
        traces = np.trace(np.linalg.solve(A_all, B_all), axis1=-2, axis2=-1)
        frob = np.sqrt((A_all * A_all).sum(axis=(-2, -1)))
        wedges = linalg.exterior_square(A_all) if spec.dim >= 2 else [None] * m
        for j in range(m):
            try:
                # overflow is detected and raised by step itself
                with np.errstate(over="ignore"):
                    state = step(state, A_all[j], B_all[j], traces[j], wedge_A=wedges[j], a_frob=frob[j])
            except NumericalError as exc:
                if exc.step is None:
                    exc.step = done + j + 1
                raise
            if on_step is not None and (calls is None or state.n in calls):
                on_step(state)
        done += m
    return state


def _scalar_state(n, sign, log_s, ratio, x0) -> ProductState:
    R, k = x0.shape[0], x0.shape[1]
    u = np.where(np.abs(ratio) < ZERO_TOL * (1 + n), 0.0, sign * ratio)
    return ProductState(
        n, sign[:, None, None].copy(), u[:, None, None], log_s.copy(), x0,
        sign[:, None, None] * x0, np.repeat(log_s[:, None], k, axis=1).reshape(R, k),
        u[:, None, None] * x0, ratio.copy(), None, None, u == 0.0,
    )


def _simulate_scalar(spec, steps, rngs, x0, transform, on_step, call_at, chunk) -> ProductState:
    """d = 1: scalars commute, so T_n / S_n = sum b_i / a_i and the whole
    trajectory reduces to running sums over the same sampled pairs."""
    R = len(rngs)
    log_s, sign, ratio = np.zeros(R), np.ones(R), np.zeros(R)
    done = 0
    while done < steps:
        m = min(chunk, steps - done)
        draws = [sample_pairs(spec, rng, m) for rng in rngs]
        a = np.stack([x for x, _ in draws], axis=1)
        b = np.stack([y for _, y in draws], axis=1)
        if transform is not None:
            a, b = transform(a, b)
        a, b = a[..., 0, 0], b[..., 0, 0]
        hit = (a == 0.0).any(axis=1)
        if hit.any():
            raise NonInvertibleA("A annihilated the product", step=done + int(np.argmax(hit)) + 1)
        c_log = log_s + np.cumsum(np.log(np.abs(a)), axis=0)
        c_sign = sign * np.cumprod(np.sign(a), axis=0)
        c_ratio = ratio + np.cumsum(b / a, axis=0)
        if on_step is not None:
            for n in sorted(n for n in call_at if done < n <= done + m):
                j = n - done - 1
                on_step(_scalar_state(n, c_sign[j], c_log[j], c_ratio[j], x0))
        log_s, sign, ratio = c_log[-1], c_sign[-1], c_ratio[-1]
        done += m
    return _scalar_state(steps, sign, log_s, ratio, x0)


def replay_pairs(spec: EnsembleSpec, rng: RngStream, steps: int) -> tuple[np.ndarray, np.ndarray]:
    """The pairs a trajectory on ``rng`` consumes (rng is rewound first)."""
    return sample_pairs(spec, rng.fresh(), steps)


TRACKED_COLUMNS = ("log_norm_sx", "phi", "psi", "delta_xy", "sign_gap_plus", "sign_gap_minus")


@dataclass
class TrajectoryRecord:
    """Recorded rows of one trajectory; ``data`` has one row per recorded step."""
    columns: list[str]
    data: np.ndarray
    final_state: ProductState
    n_tracked: int

    @property
    def rows(self) -> list[list[float]]:
        return self.data.tolist()

    def column(self, name: str) -> np.ndarray:
        try:
            return self.data[:, self.columns.index(name)]
        except ValueError:
            raise KeyError(f"no column {name!r}") from None

    def tracked_column(self, name: str, k: int) -> np.ndarray:
        return self.column(f"{name}_{k}")

    @property
    def n(self) -> np.ndarray:
        return self.column("n").astype(int)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.csv_text())

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        ints = [c in _INT_COLUMNS for c in self.columns]
        for row in self.data:
            writer.writerow([str(int(v)) if is_int else format(float(v), ".17g")
                             for v, is_int in zip(row, ints)])
        return buf.getvalue()


_INT_COLUMNS = frozenset({"n", "t_zero"})


def record_columns(n_tracked: int) -> list[str]:
    cols = ["n", "log_norm_S", "log_norm_wedge"]
    for k in range(n_tracked):
        cols += [f"{c}_{k}" for c in TRACKED_COLUMNS]
    return cols + ["trace_cocycle", "trace_sum", "t_zero"]


def _batched_trace_cocycle(state: ProductState) -> np.ndarray:
    if state.n == 0:
        return np.zeros(state.batch_shape)
    sv = np.linalg.svd(state.S_hat, compute_uv=False)
    ok = sv[..., -1] >= linalg.SINGULAR_RCOND * sv[..., 0]
    S = np.where(ok[..., None, None], state.S_hat, np.eye(state.dim))
    tc = np.trace(np.linalg.solve(S, state.U), axis1=-2, axis2=-1)
    return np.where(ok, tc, np.nan)


def record_rows(state: ProductState) -> np.ndarray:
    """CSV rows for every replica of a (possibly batched) state.

    delta_xy and the sign gaps are NaN where phi = 0 (y_n undefined);
    trace_cocycle is NaN once S_hat is too ill-conditioned to invert.
    """
    batch = state.batch_shape
    lw = state.log_norm_wedge
    parts = [
        np.full(batch, float(state.n)),
        state.log_norm_S,
        np.full(batch, np.nan) if lw is None else lw,
    ]
    x, t = state.sx_hat, state.t_vec
    phi = _norm(t)
    psi = _dot(x, t)
    with np.errstate(invalid="ignore", divide="ignore"):
        y = np.where(phi[..., None] > 0.0, t / phi[..., None], np.nan)
    gp, gm = _norm(x - y), _norm(x + y)
    dxy = linalg.sin_from_chord(np.minimum(gp, gm))
    dxy = np.where(phi > 0.0, dxy, np.nan)
    for k in range(state.n_tracked):
        parts += [state.log_norm_sx[..., k], phi[..., k], psi[..., k], dxy[..., k], gp[..., k], gm[..., k]]
    parts += [_batched_trace_cocycle(state), state.trace_sum, state.t_zero.astype(float)]
    return np.stack(parts, axis=-1)


def record_row(state: ProductState) -> list[float]:
    """One CSV row for an unbatched state."""
    return record_rows(state).tolist()


def record_steps(steps: int, record_every: int) -> list[int]:
    """Recorded step indices: multiples of record_every, plus the last step."""
    out = list(range(record_every, steps + 1, record_every))
    if not out or out[-1] != steps:
        out.append(steps)
    return out


def run_trajectories(
    spec: EnsembleSpec,
    steps: int,
    rngs: Sequence[RngStream],
    tracked_inits: Iterable = (),
    record_every: int = 1,
    *,
    transform: PairTransform | None = None,
) -> list[TrajectoryRecord]:
    """One record per stream, all replicas advanced and recorded in lockstep."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if record_every < 1:
        raise ValueError("record_every must be >= 1")
    tracked_inits = list(tracked_inits)
    at = record_steps(steps, record_every)
    blocks: list[np.ndarray] = []

    def on_step(state: ProductState) -> None:
        blocks.append(record_rows(state))

    final = simulate(spec, steps, rngs, tracked_inits, transform=transform,
                     on_step=on_step, call_at=at)
    data = np.stack(blocks, axis=1)
    cols = record_columns(len(tracked_inits))
    return [TrajectoryRecord(cols, data[r], final.replica(r), len(tracked_inits))
            for r in range(len(rngs))]


def run_trajectory(
    spec: EnsembleSpec,
    steps: int,
    rng: RngStream,
    tracked_inits: Iterable = (),
    record_every: int = 1,
    *,
    transform: PairTransform | None = None,
) -> TrajectoryRecord:
    """Drive one trajectory, recording every ``record_every`` steps and the
    last step."""
    return run_trajectories(spec, steps, [rng], tracked_inits, record_every, transform=transform)[0]


def from_scratch_phi_psi(S: np.ndarray, T: np.ndarray, x) -> tuple[float, float]:
    """phi and psi evaluated directly from S_n, T_n."""
    x = np.asarray(x, dtype=float)
    sx, tx = S @ x, T @ x
    nsx2 = float(sx @ sx)
    return math.sqrt(float(tx @ tx) / nsx2), float(sx @ tx) / nsx2
