"""Small dense real matrix algebra.

Everything here works on ``float64`` numpy arrays and accepts leading batch
dimensions, so ``(d, d)`` and ``(R, d, d)`` inputs go through the same code.
The full SVD is a one-sided (Hestenes) Jacobi iteration, which is accurate
and simple for the tiny matrices (d <= 8) this package deals with.  Where
only singular values are needed (norms, conditioning) LAPACK is used, since
those calls sit in the per-step hot path.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .errors import DimensionTooSmall, NotNormalised, SingularMatrix, ZeroVector

# Reject inversion when alpha_d / alpha_1 falls below this.
SINGULAR_RCOND = 1e-12

_JACOBI_TOL = 1e-15
_JACOBI_MAX_SWEEPS = 60


@dataclass(frozen=True)
class SvdResult:
    singular_values: np.ndarray
    left_vectors: np.ndarray
    right_vectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        u, s, v = self.left_vectors, self.singular_values, self.right_vectors
        return (u * s[..., None, :]) @ np.swapaxes(v, -1, -2)


def as_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=float)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"expected square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def as_vector(x) -> np.ndarray:
    v = np.asarray(x, dtype=float)
    if v.ndim < 1:
        raise ValueError("expected a vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


def _complete_frame(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns of ``u`` where ``keep`` is False by an orthonormal
    completion of the kept columns (single matrix)."""
    d = u.shape[0]
    cols = [u[:, j] for j in range(d) if keep[j]]
    out = u.copy()
    candidates = iter(np.eye(d))
    for j in range(d):
        if keep[j]:
            continue
        while True:
            c = next(candidates).copy()
            for b in cols:
                c -= (b @ c) * b
            for b in cols:  # second pass for orthogonality
                c -= (b @ c) * b
            nc = np.linalg.norm(c)
            if nc > 1e-8:
                c /= nc
                break
        cols.append(c)
        out[:, j] = c
    return out


def svd(m) -> SvdResult:
    """Singular value decomposition ``M = U diag(s) V^T`` by one-sided Jacobi.

    Singular values come back sorted nonincreasing; U and V are orthonormal
    even when M is rank deficient.
    """
    a = as_matrix(m)
    d = a.shape[-1]
    batch = a.shape[:-2]
    w = a.copy()
    v = np.broadcast_to(np.eye(d), a.shape).copy()
    pairs = list(combinations(range(d), 2))
    for _ in range(_JACOBI_MAX_SWEEPS):
        rotated = False
        for p, q in pairs:
            wp, wq = w[..., :, p], w[..., :, q]
            alpha = np.einsum("...i,...i->...", wp, wp)
            beta = np.einsum("...i,...i->...", wq, wq)
            gamma = np.einsum("...i,...i->...", wp, wq)
            active = np.abs(gamma) > _JACOBI_TOL * np.sqrt(alpha * beta)
            if not np.any(active):
                continue
            rotated = True
            g = np.where(active, gamma, 1.0)
            with np.errstate(over="ignore"):
                zeta = (beta - alpha) / (2.0 * g)  # inf gives t = 0, the right limit
            sgn = np.where(zeta >= 0.0, 1.0, -1.0)
            t = np.where(active, sgn / (np.abs(zeta) + np.hypot(1.0, zeta)), 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c_, s_ = c[..., None], s[..., None]
            new_p = c_ * wp - s_ * wq
            new_q = s_ * wp + c_ * wq
            w[..., :, p], w[..., :, q] = new_p, new_q
            vp, vq = v[..., :, p].copy(), v[..., :, q].copy()
            v[..., :, p] = c_ * vp - s_ * vq
            v[..., :, q] = s_ * vp + c_ * vq
        if not rotated:
            break

    sigma = np.sqrt(np.einsum("...ij,...ij->...j", w, w))
    order = np.argsort(-sigma, axis=-1, kind="stable")
    sigma = np.take_along_axis(sigma, order, axis=-1)
    w = np.take_along_axis(w, order[..., None, :], axis=-1)
    v = np.take_along_axis(v, order[..., None, :], axis=-1)

    top = sigma[..., :1]
    keep = sigma > 1e-300 + 1e-13 * top
    u = w / np.where(keep, sigma, 1.0)[..., None, :]
    if not np.all(keep):
        flat_u = u.reshape((-1, d, d))
        flat_keep = keep.reshape((-1, d))
        for i in np.flatnonzero(~flat_keep.all(axis=-1)):
            flat_u[i] = _complete_frame(flat_u[i], flat_keep[i])
        u = flat_u.reshape(batch + (d, d))
    return SvdResult(sigma, u, v)


def singular_values(m) -> np.ndarray:
    """Sorted singular values only (LAPACK; the hot path of the engine)."""
    return np.linalg.svd(as_matrix(m), compute_uv=False)


def spectral_norm(m) -> np.ndarray | float:
    """Largest singular value (the l2 operator norm)."""
    out = opnorm(as_matrix(m))
    return float(out) if np.ndim(out) == 0 else out


def opnorm(a: np.ndarray) -> np.ndarray:
    """spectral_norm without input validation, always returning an array."""
    if a.shape[-1] == 1:
        out = np.abs(a[..., 0, 0])
    elif a.shape[-1] == 2:
        out = _spectral_norm_2x2(a)
    else:
        out = np.linalg.svd(a, compute_uv=False)[..., 0]
    return out


def _spectral_norm_2x2(a: np.ndarray) -> np.ndarray:
    # For M = [[p, q], [r, s]]:
    # sigma_1 = (hypot(p+s, r-q) + hypot(p-s, r+q)) / 2, a sum of nonnegatives.
    p, q = a[..., 0, 0], a[..., 0, 1]
    r, s = a[..., 1, 0], a[..., 1, 1]
    e, f = 0.5 * (p + s), 0.5 * (p - s)
    g, h = 0.5 * (r + q), 0.5 * (r - q)
    return np.hypot(e, h) + np.hypot(f, g)


def invert(m) -> np.ndarray:
    """Inverse of a well-conditioned matrix.

    Raises SingularMatrix when alpha_d / alpha_1 < 1e-12.
    """
    a = as_matrix(m)
    sv = singular_values(a)
    top = sv[..., 0]
    if np.any(top == 0.0) or np.any(sv[..., -1] < SINGULAR_RCOND * top):
        raise SingularMatrix("matrix is singular to working precision")
    return np.linalg.inv(a)


def condition_number(m) -> np.ndarray | float:
    sv = singular_values(m)
    with np.errstate(divide="ignore"):
        out = sv[..., 0] / sv[..., -1]
    return float(out) if np.ndim(out) == 0 else out


def exterior_square(m) -> np.ndarray:
    """Matrix of the induced map on the exterior square (2x2 minors),
    in lexicographic order of the index pairs i < j."""
    a = as_matrix(m)
    d = a.shape[-1]
    if d < 2:
        raise DimensionTooSmall("exterior square needs d >= 2")
    idx = np.array(list(combinations(range(d), 2)))
    i, j = idx[:, 0], idx[:, 1]
    # out[..., (i,j), (k,l)] = a[i,k] a[j,l] - a[i,l] a[j,k]
    aik = a[..., i[:, None], i[None, :]]
    ajl = a[..., j[:, None], j[None, :]]
    ail = a[..., i[:, None], j[None, :]]
    ajk = a[..., j[:, None], i[None, :]]
    return aik * ajl - ail * ajk


def exterior_square_norm(m) -> np.ndarray | float:
    """||wedge^2 M||_2, the product of the two largest singular values."""
    a = as_matrix(m)
    if a.shape[-1] < 2:
        raise DimensionTooSmall("exterior square needs d >= 2")
    if a.shape[-1] == 2:
        out = np.abs(a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0])
    else:
        sv = singular_values(a)
        out = sv[..., 0] * sv[..., 1]
    return float(out) if np.ndim(out) == 0 else out


def delta(x, y) -> float:
    """|sin| of the angle between x and y; a metric on projective space."""
    x, y = as_vector(x), as_vector(y)
    nx, ny = np.linalg.norm(x, axis=-1), np.linalg.norm(y, axis=-1)
    if np.any(nx == 0.0) or np.any(ny == 0.0):
        raise ZeroVector("delta is undefined for the zero vector")
    u, w = x / nx[..., None], y / ny[..., None]
    chord = np.minimum(np.linalg.norm(u - w, axis=-1), np.linalg.norm(u + w, axis=-1))
    out = sin_from_chord(chord)
    return float(out) if np.ndim(out) == 0 else out


def sin_from_chord(g):
    """|sin| of the angle between unit vectors at chord length g = ||u - w||.

    The half-angle form keeps full relative accuracy near alignment, where
    sqrt(1 - cos^2) would lose half the digits.
    """
    g = np.asarray(g, dtype=float)
    return g * np.sqrt(np.clip(1.0 - 0.25 * g * g, 0.0, 1.0))


def delta_equiv_bounds(x, y, tol: float = 1e-12) -> tuple[float, float, bool]:
    """Sandwich ``||x - chi y|| / sqrt(2) <= delta(x, y) <= ||x - y||`` for unit
    vectors, with chi the sign of <x, y> (+1 on ties)."""
    x, y = as_vector(x), as_vector(y)
    if abs(np.linalg.norm(x) - 1.0) > tol or abs(np.linalg.norm(y) - 1.0) > tol:
        raise NotNormalised("delta_equiv_bounds expects unit vectors")
    chi = 1.0 if float(x @ y) >= 0.0 else -1.0
    lower = float(np.linalg.norm(x - chi * y)) / np.sqrt(2.0)
    upper = float(np.linalg.norm(x - y))
    dist = delta(x, y)
    slack = 1e-12
    return lower, upper, bool(lower <= dist + slack and dist <= upper + slack)


def normalize(x) -> np.ndarray:
    v = as_vector(x)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise ZeroVector("cannot normalize the zero vector")
    return v / n
