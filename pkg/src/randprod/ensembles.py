"""Laws of the i.i.d. pairs (A_n, B_n): description, validation, sampling.

Finite-atom ensembles are sampled by inverse CDF on one uniform per draw.
The only continuous family is ``custom_parametric``::

    A = I + alpha * G1,    B = beta * G2,    G1, G2 i.i.d. standard Gaussian

redrawn until A passes the invertibility threshold.  The law of transposes is
never stored: sample from the ensemble and transpose.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

import numpy as np
import yaml

from .errors import BadParams, ParseError, UnknownBuiltin, ValidationError
from .linalg import SINGULAR_RCOND, singular_values, spectral_norm
from .rng import RngStream

FINITE_KINDS = (
    "finite_atoms",
    "scalar",
    "signed_pair",
    "diag_rotation",
    "pure_rotation",
    "positive_bernoulli",
)
KINDS = FINITE_KINDS + ("custom_parametric",)
BUILTINS = ("scalar_iid", "signed_pair", "diag_rotation", "pure_rotation", "positive_bernoulli")

SIGNED_PAIR_P = ((2.0, 1.0), (1.0, 1.0))
SIGNED_PAIR_Q = ((1.0, 1.0), (1.0, 2.0))
POSITIVE_ATOMS = (((2.0, 1.0), (1.0, 1.0)), ((1.0, 1.0), (1.0, 2.0)))
POSITIVE_B = ((1.0, 0.5), (1.0, 1.0))

_BUILTIN_DEFAULTS = {
    "scalar_iid": {"a": 2.0, "b_low": 1.0, "b_high": 3.0},
    "signed_pair": {},
    "diag_rotation": {"alpha": 2.0, "beta": 0.5},
    "pure_rotation": {"theta": 1.0},
    "positive_bernoulli": {"p_plus": 0.9, "b_scale": 1.0},
}
_PARAMETRIC_DEFAULTS = {"alpha": 0.1, "beta": 1.0, "tau": 1.0}


@dataclass(frozen=True, eq=False)
class Atom:
    prob: float
    A: np.ndarray
    B: np.ndarray


@dataclass(frozen=True, eq=False)
class EnsembleSpec:
    dim: int
    kind: str
    atoms: tuple[Atom, ...] = ()
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))
        if self.atoms:
            probs = np.array([a.prob for a in self.atoms])
            cum = np.cumsum(probs)
            cum[-1] = 1.0
            object.__setattr__(self, "_cum", cum)
            object.__setattr__(self, "_A", np.stack([a.A for a in self.atoms]))
            object.__setattr__(self, "_B", np.stack([a.B for a in self.atoms]))

    @property
    def is_finite(self) -> bool:
        return self.kind in FINITE_KINDS

    @property
    def atom_A(self) -> np.ndarray:
        return self._A

    @property
    def atom_B(self) -> np.ndarray:
        return self._B

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([a.prob for a in self.atoms])

    def to_dict(self) -> dict:
        out = {"dim": self.dim, "kind": self.kind, "params": dict(sorted(self.params.items()))}
        if self.atoms:
            out["atoms"] = [
                {"prob": a.prob, "A": a.A.tolist(), "B": a.B.tolist()} for a in self.atoms
            ]
        return out

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def map_atoms(self, fn, kind: str | None = None) -> "EnsembleSpec":
        """New finite spec with every atom (A, B) replaced by fn(A, B)."""
        atoms = []
        for a in self.atoms:
            A, B = fn(a.A, a.B)
            atoms.append(Atom(a.prob, _frozen(A), _frozen(B)))
        return validate(EnsembleSpec(self.dim, kind or "finite_atoms", tuple(atoms), self.params))


def _frozen(m) -> np.ndarray:
    a = np.array(m, dtype=float)
    a.setflags(write=False)
    return a


def _matrix(value, dim: int, where: str) -> np.ndarray:
    try:
        a = np.array(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{where}: not a numeric matrix") from exc
    if a.ndim == 0 and dim == 1:
        a = a.reshape(1, 1)
    if a.shape != (dim, dim):
        raise ValidationError(f"{where}: expected shape ({dim}, {dim}), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError(f"{where}: non-finite entries")
    return _frozen(a)


def is_invertible(A: np.ndarray) -> bool:
    sv = singular_values(A)
    return bool(sv[0] > 0.0 and sv[-1] >= SINGULAR_RCOND * sv[0])


def validate(spec: EnsembleSpec) -> EnsembleSpec:
    if not isinstance(spec.dim, (int, np.integer)) or spec.dim < 1:
        raise ValidationError(f"dim must be a positive integer, got {spec.dim!r}")
    if spec.kind not in KINDS:
        raise ValidationError(f"unknown kind {spec.kind!r}")
    if spec.kind == "custom_parametric":
        for name in ("alpha", "beta", "tau"):
            if not math.isfinite(spec.params.get(name, 0.0)):
                raise ValidationError(f"param {name} must be finite")
        if spec.params.get("tau", 1.0) <= 0:
            raise ValidationError("param tau must be positive")
        return spec
    if not spec.atoms:
        raise ValidationError(f"kind {spec.kind} needs at least one atom")
    for i, atom in enumerate(spec.atoms):
        if not (atom.prob > 0.0 and math.isfinite(atom.prob)):
            raise ValidationError(f"atom {i}: probability must be positive, got {atom.prob}")
        for name, m in (("A", atom.A), ("B", atom.B)):
            if m.shape != (spec.dim, spec.dim):
                raise ValidationError(
                    f"atom {i}: {name} has shape {m.shape}, expected ({spec.dim}, {spec.dim})"
                )
        if not is_invertible(atom.A):
            raise ValidationError(f"atom {i}: A is singular")
    total = sum(a.prob for a in spec.atoms)
    if abs(total - 1.0) > 1e-12:
        worst = max(range(len(spec.atoms)), key=lambda i: spec.atoms[i].prob)
        raise ValidationError(
            f"probabilities sum to {total!r}, not 1 (largest is atom {worst})"
        )
    return spec


def _classify(dim: int, atoms: list[Atom]) -> str:
    if dim == 1:
        return "scalar"
    if (
        len(atoms) == 2
        and all(abs(a.prob - 0.5) <= 1e-12 for a in atoms)
        and np.array_equal(atoms[0].B, atoms[0].A)
        and np.array_equal(atoms[1].B, -atoms[1].A)
    ):
        return "signed_pair"
    return "finite_atoms"


def from_dict(data: Mapping) -> EnsembleSpec:
    if not isinstance(data, Mapping):
        raise ParseError("ensemble config must be a mapping")
    if "builtin" in data:
        return builtin(data["builtin"], data.get("params") or {})
    if "dim" not in data:
        raise ParseError("missing required field 'dim'")
    try:
        dim = int(data["dim"])
    except (TypeError, ValueError) as exc:
        raise ParseError("field 'dim' must be an integer") from exc
    kind = data.get("kind")
    params = data.get("params") or {}
    if not isinstance(params, Mapping):
        raise ParseError("field 'params' must be a mapping")
    try:
        params = {str(k): float(v) for k, v in params.items()}
    except (TypeError, ValueError) as exc:
        raise ParseError("params must be real numbers") from exc
    raw_atoms = data.get("atoms")
    if raw_atoms is None:
        if kind == "custom_parametric":
            return validate(
                EnsembleSpec(dim, kind, (), {**_PARAMETRIC_DEFAULTS, **params})
            )
        if kind in _BUILTIN_DEFAULTS or kind == "scalar":
            return builtin("scalar_iid" if kind == "scalar" else kind, params)
        raise ParseError("finite ensembles need an 'atoms' list")
    if not isinstance(raw_atoms, list):
        raise ParseError("field 'atoms' must be a list")
    atoms = []
    for i, raw in enumerate(raw_atoms):
        if not isinstance(raw, Mapping) or not {"prob", "A", "B"} <= set(raw):
            raise ParseError(f"atom {i}: needs keys prob, A, B")
        try:
            prob = float(raw["prob"])
        except (TypeError, ValueError) as exc:
            raise ParseError(f"atom {i}: prob is not a number") from exc
        atoms.append(
            Atom(prob, _matrix(raw["A"], dim, f"atom {i} A"), _matrix(raw["B"], dim, f"atom {i} B"))
        )
    if kind is None:
        kind = _classify(dim, atoms)
    if kind not in FINITE_KINDS:
        raise ValidationError(f"kind {kind!r} cannot be given as atoms")
    return validate(EnsembleSpec(dim, kind, tuple(atoms), params))


def parse_ensemble(config_text: str) -> EnsembleSpec:
    """Parse a YAML (or JSON) ensemble description."""
    try:
        data = yaml.safe_load(config_text)
    except yaml.YAMLError as exc:
        raise ParseError(f"malformed config: {exc}") from exc
    if isinstance(data, Mapping) and "ensemble" in data:
        data = data["ensemble"]
    return from_dict(data)


def load_ensemble(path: str | Path) -> EnsembleSpec:
    return parse_ensemble(Path(path).read_text())


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def builtin(name: str, params: Mapping[str, float] | None = None) -> EnsembleSpec:
    """One of the reference ensembles, with defaults for missing params."""
    if name not in _BUILTIN_DEFAULTS:
        raise UnknownBuiltin(f"unknown builtin {name!r}; choose from {', '.join(BUILTINS)}")
    given = dict(params or {})
    unknown = set(given) - set(_BUILTIN_DEFAULTS[name])
    if unknown:
        raise BadParams(f"{name}: unexpected params {sorted(unknown)}")
    p = {**_BUILTIN_DEFAULTS[name], **{k: float(v) for k, v in given.items()}}
    if not all(math.isfinite(v) for v in p.values()):
        raise BadParams(f"{name}: params must be finite")

    if name == "scalar_iid":
        a = p["a"]
        if a == 0.0:
            raise BadParams("scalar_iid: a must be nonzero")
        atoms = (
            Atom(0.5, _frozen([[a]]), _frozen([[p["b_low"]]])),
            Atom(0.5, _frozen([[a]]), _frozen([[p["b_high"]]])),
        )
        return validate(EnsembleSpec(1, "scalar", atoms, p))
    if name == "signed_pair":
        P, Q = np.array(SIGNED_PAIR_P), np.array(SIGNED_PAIR_Q)
        atoms = (Atom(0.5, _frozen(P), _frozen(P)), Atom(0.5, _frozen(Q), _frozen(-Q)))
        return validate(EnsembleSpec(2, "signed_pair", atoms, p))
    if name == "diag_rotation":
        if not p["alpha"] > p["beta"] > 0.0:
            raise BadParams("diag_rotation needs alpha > beta > 0")
        atoms = (Atom(1.0, _frozen(np.diag([p["alpha"], p["beta"]])), _frozen([[0.0, -1.0], [1.0, 0.0]])),)
        return validate(EnsembleSpec(2, "diag_rotation", atoms, p))
    if name == "pure_rotation":
        atoms = (Atom(1.0, _frozen(rotation(p["theta"])), _frozen(np.eye(2))),)
        return validate(EnsembleSpec(2, "pure_rotation", atoms, p))
    # positive_bernoulli
    q = p["p_plus"]
    if not 0.0 <= q <= 1.0:
        raise BadParams("positive_bernoulli: p_plus must lie in [0, 1]")
    C = p["b_scale"] * np.array(POSITIVE_B)
    atoms = []
    for A in POSITIVE_ATOMS:
        for sign, w in ((1.0, q), (-1.0, 1.0 - q)):
            if w > 0.0:
                atoms.append(Atom(0.5 * w, _frozen(A), _frozen(sign * C)))
    return validate(EnsembleSpec(2, "positive_bernoulli", tuple(atoms), p))


def parametric(dim: int, alpha: float = 0.1, beta: float = 1.0, tau: float = 1.0) -> EnsembleSpec:
    return validate(
        EnsembleSpec(dim, "custom_parametric", (), {"alpha": alpha, "beta": beta, "tau": tau})
    )


def _draw_parametric(spec: EnsembleSpec, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    d = spec.dim
    alpha, beta = spec.params["alpha"], spec.params["beta"]
    while True:
        g = rng.standard_normal((2, d, d))
        A = np.eye(d) + alpha * g[0]
        if is_invertible(A):
            return A, beta * g[1]


def sample_indices(spec: EnsembleSpec, rng: RngStream, n: int) -> np.ndarray:
    """Atom indices for n consecutive draws (finite kinds only)."""
    u = rng.random(n)
    return np.searchsorted(spec._cum, u, side="right").clip(max=len(spec.atoms) - 1)


def sample_pair(spec: EnsembleSpec, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    if spec.is_finite:
        i = int(sample_indices(spec, rng, 1)[0])
        return spec.atom_A[i].copy(), spec.atom_B[i].copy()
    return _draw_parametric(spec, rng)


def sample_pairs(spec: EnsembleSpec, rng: RngStream, n: int) -> tuple[np.ndarray, np.ndarray]:
    """n consecutive draws as arrays of shape (n, d, d); same sequence as n
    calls to sample_pair."""
    if spec.is_finite:
        idx = sample_indices(spec, rng, n)
        return spec.atom_A[idx], spec.atom_B[idx]
    A = np.empty((n, spec.dim, spec.dim))
    B = np.empty_like(A)
    for i in range(n):
        A[i], B[i] = _draw_parametric(spec, rng)
    return A, B


@dataclass(frozen=True)
class FeReport:
    exact: bool
    fe1: bool
    fe2: bool
    fe3: bool
    fe4: bool
    estimates: dict
    diverging: dict
    note: str

    def to_dict(self) -> dict:
        return {
            "exact": self.exact,
            "fe1": self.fe1,
            "fe2": self.fe2,
            "fe3": self.fe3,
            "fe4": self.fe4,
            "estimates": self.estimates,
            "diverging": self.diverging,
            "note": self.note,
        }


def _fe_terms(A: np.ndarray, B: np.ndarray, tau: float) -> dict[str, np.ndarray]:
    Ainv = np.linalg.inv(A)
    nA = np.atleast_1d(spectral_norm(A))
    nAinv = np.atleast_1d(spectral_norm(Ainv))
    log_plus_A = np.maximum(np.log(nA), 0.0)
    log_plus_Ainv = np.maximum(np.log(nAinv), 0.0)
    ell = np.maximum(log_plus_A, log_plus_Ainv)
    return {
        "log_plus_norm_A": log_plus_A,
        "norm_B_Ainv": np.atleast_1d(spectral_norm(B @ Ainv)),
        "log_plus_norm_Ainv": log_plus_Ainv,
        "exp_tau_ell": np.exp(tau * ell),
    }


_FE_KEYS = {
    "fe1": "log_plus_norm_A",
    "fe2": "norm_B_Ainv",
    "fe3": "log_plus_norm_Ainv",
    "fe4": "exp_tau_ell",
}


def validate_fe(spec: EnsembleSpec, n_probe: int = 4096, rng: RngStream | None = None) -> FeReport:
    """Check the finite-expectation conditions.

    Finite-atom ensembles satisfy all four automatically; the expectations are
    then computed exactly.  For the parametric family the means are estimated
    at n_probe/4, n_probe/2 and n_probe draws, and a term is flagged as
    diverging when its running mean keeps growing by more than 25% per doubling.
    """
    tau = float(spec.params.get("tau", 1.0))
    if spec.is_finite:
        terms = _fe_terms(spec.atom_A, spec.atom_B, tau)
        w = spec.probabilities
        est = {k: float(w @ v) for k, v in terms.items()}
        return FeReport(
            True, True, True, True, True, est, {k: False for k in est},
            "finite support with invertible atoms: all conditions hold",
        )
    rng = rng or RngStream(0)
    A, B = sample_pairs(spec, rng, n_probe)
    terms = _fe_terms(A, B, tau)
    sizes = [max(1, n_probe // 4), max(1, n_probe // 2), n_probe]
    est, diverging = {}, {}
    for name, vals in terms.items():
        means = [float(vals[:m].mean()) for m in sizes]
        est[name] = means[-1]
        grows = all(b > 1.25 * a for a, b in zip(means, means[1:]) if a > 0)
        diverging[name] = bool(grows and means[0] > 0) or not math.isfinite(means[-1])
    flags = {fe: not diverging[key] for fe, key in _FE_KEYS.items()}
    return FeReport(
        False, flags["fe1"], flags["fe2"], flags["fe3"], flags["fe4"], est, diverging,
        f"Monte Carlo estimates from {n_probe} draws",
    )
