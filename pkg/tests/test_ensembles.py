import math

import numpy as np
import pytest

from randprod import ensembles as ens
from randprod.errors import BadParams, ParseError, UnknownBuiltin, ValidationError
from randprod.rng import RngStream

SIGNED_PAIR_YAML = """
dim: 2
atoms:
  - {prob: 0.5, A: [[2, 1], [1, 1]], B: [[2, 1], [1, 1]]}
  - {prob: 0.5, A: [[1, 1], [1, 2]], B: [[-1, -1], [-1, -2]]}
"""


def test_parse_signed_pair_config():
    spec = ens.parse_ensemble(SIGNED_PAIR_YAML)
    assert spec.kind == "signed_pair"
    assert spec.dim == 2
    assert np.array_equal(spec.atom_A[0], [[2, 1], [1, 1]])
    assert np.array_equal(spec.atom_B[1], -spec.atom_A[1])
    assert spec.digest() == ens.builtin("signed_pair").digest()


def test_parse_degenerate_single_atom():
    spec = ens.parse_ensemble("dim: 2\natoms:\n  - {prob: 1.0, A: [[1,0],[0,1]], B: [[0,0],[0,0]]}\n")
    assert spec.kind == "finite_atoms"
    assert len(spec.atoms) == 1


def test_parse_accepts_json_and_ensemble_key():
    spec = ens.parse_ensemble('{"ensemble": {"builtin": "pure_rotation", "params": {"theta": 0.3}}}')
    assert spec.kind == "pure_rotation"
    assert spec.params["theta"] == 0.3


@pytest.mark.parametrize("text, err, needle", [
    ("dim: 2\natoms:\n  - {prob: 0.6, A: [[1,0],[0,1]], B: [[0,0],[0,0]]}\n"
     "  - {prob: 0.5, A: [[1,0],[0,1]], B: [[0,0],[0,0]]}\n", ValidationError, "atom"),
    ("dim: 2\natoms:\n  - {prob: 1.0, A: [[1,2],[2,4]], B: [[0,0],[0,0]]}\n", ValidationError, "atom 0"),
    ("dim: 2\natoms:\n  - {prob: 1.0, A: [[1,0,0],[0,1,0],[0,0,1]], B: [[0,0],[0,0]]}\n",
     ValidationError, "atom 0"),
    ("dim: 2\natoms:\n  - {prob: 1.0, A: [[1,0],[0,1]]}\n", ParseError, "atom 0"),
    ("dim: 2\natoms:\n  - {prob: -1.0, A: [[1,0],[0,1]], B: [[0,0],[0,0]]}\n"
     "  - {prob: 2.0, A: [[1,0],[0,1]], B: [[0,0],[0,0]]}\n", ValidationError, "atom 0"),
    ("atoms: []\n", ParseError, "dim"),
    ("dim: [oops\n", ParseError, "malformed"),
    ("- 1\n- 2\n", ParseError, "mapping"),
])
def test_parse_errors(text, err, needle):
    with pytest.raises(err, match=needle):
        ens.parse_ensemble(text)


def test_load_ensemble(tmp_path):
    p = tmp_path / "sp.yaml"
    p.write_text(SIGNED_PAIR_YAML)
    assert ens.load_ensemble(p).kind == "signed_pair"


def test_builtin_diag_rotation():
    spec = ens.builtin("diag_rotation", {"alpha": 2, "beta": 0.5})
    (atom,) = spec.atoms
    assert atom.prob == 1.0
    assert np.array_equal(atom.A, np.diag([2.0, 0.5]))
    assert np.array_equal(atom.B, [[0.0, -1.0], [1.0, 0.0]])
    with pytest.raises(BadParams):
        ens.builtin("diag_rotation", {"alpha": 0.5, "beta": 2})


def test_builtin_pure_rotation():
    spec = ens.builtin("pure_rotation", {"theta": 1.0})
    (atom,) = spec.atoms
    c, s = math.cos(1.0), math.sin(1.0)
    assert np.allclose(atom.A, [[c, -s], [s, c]], atol=0)
    assert np.array_equal(atom.B, np.eye(2))


def test_builtin_scalar_and_positive():
    sc = ens.builtin("scalar_iid")
    assert sc.dim == 1 and sc.kind == "scalar"
    assert sorted(float(b) for b in sc.atom_B[:, 0, 0]) == [1.0, 3.0]
    pb = ens.builtin("positive_bernoulli")
    assert np.all(pb.atom_A > 0)
    assert pb.probabilities.sum() == pytest.approx(1.0)


def test_builtin_errors():
    with pytest.raises(UnknownBuiltin):
        ens.builtin("nope")
    with pytest.raises(BadParams):
        ens.builtin("pure_rotation", {"phi": 1.0})
    with pytest.raises(BadParams):
        ens.builtin("positive_bernoulli", {"p_plus": 1.5})


def test_spec_is_immutable():
    spec = ens.builtin("signed_pair")
    with pytest.raises(Exception):
        spec.atoms[0].A[0, 0] = 5.0
    with pytest.raises(Exception):
        spec.params["x"] = 1.0


def test_single_atom_always_sampled():
    spec = ens.builtin("diag_rotation")
    A, B = ens.sample_pairs(spec, RngStream(1), 50)
    assert np.all(A == spec.atom_A[0]) and np.all(B == spec.atom_B[0])


def test_signed_pair_frequency_binomial():
    spec = ens.builtin("signed_pair")
    idx = ens.sample_indices(spec, RngStream(2024), 100_000)
    assert abs(np.mean(idx == 0) - 0.5) <= 0.005


def test_atom_frequencies_chi_square():
    spec = ens.builtin("positive_bernoulli", {"p_plus": 0.7})
    n = 100_000
    idx = ens.sample_indices(spec, RngStream(5), n)
    observed = np.bincount(idx, minlength=len(spec.atoms))
    expected = n * spec.probabilities
    chi2 = float(((observed - expected) ** 2 / expected).sum())
    # 99% quantile of chi-square with 3 degrees of freedom
    assert chi2 < 11.345


def test_sampling_is_deterministic_and_matches_single_draws():
    for spec in (ens.builtin("positive_bernoulli"), ens.parametric(3)):
        A1, B1 = ens.sample_pairs(spec, RngStream(9, 4), 20)
        A2, B2 = ens.sample_pairs(spec, RngStream(9, 4), 20)
        assert np.array_equal(A1, A2) and np.array_equal(B1, B2)
        rng = RngStream(9, 4)
        singles = [ens.sample_pair(spec, rng) for _ in range(20)]
        assert np.array_equal(A1, np.array([a for a, _ in singles]))
        assert np.array_equal(B1, np.array([b for _, b in singles]))


def test_parametric_draws_are_invertible():
    spec = ens.parametric(4, alpha=0.9)
    A, _ = ens.sample_pairs(spec, RngStream(3), 2000)
    sv = np.linalg.svd(A, compute_uv=False)
    assert np.all(sv[:, -1] >= 1e-12 * sv[:, 0])


def test_validate_fe_finite():
    rep = ens.validate_fe(ens.builtin("signed_pair"))
    assert rep.exact and rep.fe1 and rep.fe2 and rep.fe3 and rep.fe4
    assert "finite" in rep.note


def test_validate_fe_scalar_exact_mean():
    rep = ens.validate_fe(ens.builtin("scalar_iid"))
    assert rep.estimates["norm_B_Ainv"] == pytest.approx(1.0, abs=0.01)


def test_validate_fe_zero_b():
    spec = ens.parse_ensemble("dim: 2\natoms:\n  - {prob: 1.0, A: [[2,0],[0,1]], B: [[0,0],[0,0]]}\n")
    assert ens.validate_fe(spec).estimates["norm_B_Ainv"] == 0.0


def test_validate_fe_parametric_is_estimated():
    rep = ens.validate_fe(ens.parametric(2), n_probe=2048)
    assert not rep.exact
    assert all((rep.fe1, rep.fe2, rep.fe3, rep.fe4))
    assert set(rep.estimates) == {"log_plus_norm_A", "norm_B_Ainv", "log_plus_norm_Ainv", "exp_tau_ell"}


def test_map_atoms_builds_new_spec():
    spec = ens.builtin("signed_pair")
    shifted = spec.map_atoms(lambda A, B: (A, B + 0.5 * A))
    assert shifted.kind == "finite_atoms"
    assert np.allclose(shifted.atom_B[0], 1.5 * spec.atom_A[0])
