import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from randprod import estimators as est
from randprod.ensembles import builtin, parse_ensemble, sample_pairs
from randprod.errors import HypothesisSuspect, SingularPerturbedAtom
from randprod.rng import RngStream

DIAG = "dim: 2\natoms:\n  - {prob: 1.0, A: [[2, 0], [0, 0.5]], B: [[1, 2], [3, 4]]}\n"
PERIOD_TWO = "dim: 2\natoms:\n  - {prob: 1.0, A: [[0, 2], [1, 0]], B: [[0, 0], [0, 0]]}\n"
QUARTER_TURN = "dim: 2\natoms:\n  - {prob: 1.0, A: [[0, -1], [1, 0]], B: [[1, 0], [0, 1]]}\n"


def proportional(alpha):
    """positive_bernoulli atoms with B = alpha A."""
    return builtin("positive_bernoulli").map_atoms(lambda A, B: (A, alpha * A))


def zero_b(name):
    return builtin(name).map_atoms(lambda A, B: (A, 0.0 * B))


@given(st.lists(st.floats(-1e3, 1e3), min_size=0, max_size=40), st.integers(0, 40))
def test_running_stats_merge_matches_direct(values, cut):
    cut = min(cut, len(values))
    merged = est.RunningStats.of(values[:cut]).merge(est.RunningStats.of(values[cut:]))
    direct = est.RunningStats.of(values)
    assert merged.count == direct.count
    assert merged.mean == pytest.approx(direct.mean, abs=1e-9)
    assert merged.m2 == pytest.approx(direct.m2, rel=1e-9, abs=1e-6)


def test_running_stats_std_err():
    s = est.RunningStats.of([1.0, 2.0, 3.0, 4.0])
    assert s.variance == pytest.approx(np.var([1, 2, 3, 4], ddof=1))
    assert s.std_err == pytest.approx(math.sqrt(s.variance / 4))
    assert est.RunningStats.of([5.0]).std_err == 0.0


def test_lyapunov_pure_rotation():
    e = est.estimate_lyapunov(builtin("pure_rotation"), 1000, 4, seed=1)
    assert abs(e.gamma) < 1e-10
    assert abs(e.gamma2) < 1e-10


def test_lyapunov_diagonal():
    e = est.estimate_lyapunov(parse_ensemble(DIAG), 500, 2, seed=0)
    assert e.gamma == pytest.approx(math.log(2.0), abs=1e-12)
    assert e.gamma2 == pytest.approx(math.log(0.5), abs=1e-12)
    assert e.std_err_gamma == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        est.estimate_lyapunov(builtin("pure_rotation"), 50)


def test_lyapunov_matches_long_vector_run():
    spec = builtin("positive_bernoulli")
    e = est.estimate_lyapunov(spec, 2000, 32, seed=3)
    # independent oracle: one long vector recursion on a separate stream
    A, _ = sample_pairs(spec, RngStream(4242), 200_000)
    v = np.array([1.0, 0.0])
    logs = np.empty(len(A))
    for i, a in enumerate(A):
        v = a @ v
        n = math.hypot(v[0], v[1])
        logs[i] = math.log(n)
        v /= n
    batches = logs.reshape(100, -1).sum(axis=1) / (len(A) // 100)
    oracle, oracle_se = batches.mean(), batches.std(ddof=1) / 10
    assert abs(e.gamma - oracle) <= 3 * est.combined_se(e.std_err_gamma, oracle_se)
    assert e.gamma >= e.gamma2


def test_direction_diagonal_converges():
    spec = parse_ensemble(DIAG)
    for sampler in (est.sample_direction_nu, est.sample_direction_nu_star):
        d = sampler(spec, 50, RngStream(0))
        assert abs(d.unit[0]) == pytest.approx(1.0, abs=1e-12)
        assert abs(d.unit[1]) <= 1e-6
        assert d.converged
        assert np.linalg.norm(d.unit) == pytest.approx(1.0, abs=1e-12)


def test_direction_nonconvergent_cases():
    assert not est.sample_direction_nu(builtin("pure_rotation"), 200, RngStream(0)).converged
    assert not est.sample_direction_nu_star(parse_ensemble(PERIOD_TWO), 200, RngStream(0)).converged


def test_direction_deterministic_and_signed():
    spec = builtin("positive_bernoulli")
    a = est.sample_direction_nu(spec, 100, RngStream(5, 1))
    b = est.sample_direction_nu(spec, 100, RngStream(5, 1))
    assert np.array_equal(a.unit, b.unit)
    assert a.unit[np.argmax(np.abs(a.unit))] > 0
    c = est.sample_direction_nu_star(spec, 100, RngStream(5, 1))
    assert np.array_equal(c.unit, est.sample_direction_nu_star(spec, 100, RngStream(5, 1)).unit)


def test_transpose_direction_order(np_rng):
    A = np_rng.standard_normal((6, 3, 3))
    y0 = np.array([1.0, 0.0, 0.0])
    v, _ = est.transpose_direction(A, y0)
    ref = y0
    for a in A[::-1]:
        ref = a.T @ ref
    assert np.allclose(v, ref / np.linalg.norm(ref))


def test_integral_proportional_is_exact():
    e = est.estimate_xi_integral(proportional(0.75), 2000, burn_in=50, seed=1)
    assert e.value == pytest.approx(0.75, abs=1e-12)
    assert e.std_err < 1e-12


def test_integral_signed_pair_and_scalar():
    e = est.estimate_xi_integral(builtin("signed_pair"), 40_000, burn_in=50, seed=2)
    assert abs(e.value) <= 3 * e.std_err
    s = est.estimate_xi_integral(builtin("scalar_iid"), 40_000, burn_in=10, seed=2)
    assert abs(s.value - 1.0) <= 3 * s.std_err


def test_integral_rejections_abort():
    with pytest.raises(HypothesisSuspect):
        est.estimate_xi_integral(parse_ensemble(QUARTER_TURN), 100, burn_in=200, seed=0)


def test_psi_route_examples():
    rot = est.estimate_xi_psi(builtin("pure_rotation", {"theta": 1.0}), 500, 4, seed=0)
    assert np.allclose(rot.replicas, math.cos(1.0), atol=1e-12)
    sc = est.estimate_xi_psi(builtin("scalar_iid"), 4000, 32, seed=0)
    assert abs(sc.value - 1.0) <= 3 * sc.std_err
    zero = est.estimate_xi_psi(zero_b("positive_bernoulli"), 300, 4, seed=0)
    assert zero.value == 0.0 and np.all(zero.replicas == 0.0)
    assert "half_value" in sc.to_dict()


def test_phi_route_examples():
    rot = est.estimate_abs_xi_phi(builtin("pure_rotation"), 500, 4, seed=0)
    assert np.allclose(rot.replicas, 1.0, atol=1e-12)
    sc = est.estimate_abs_xi_phi(builtin("scalar_iid"), 4000, 32, seed=0)
    assert abs(sc.abs_value - 1.0) <= 3 * sc.std_err
    sp = est.estimate_abs_xi_phi(builtin("signed_pair"), 10_000, 16, seed=0)
    assert sp.abs_value < 0.02
    assert sp.to_dict()["value"] is None


def test_phi_route_from_sampled_direction():
    spec = builtin("positive_bernoulli")
    z = est.sample_direction_nu(spec, 200, RngStream(8)).unit
    phi = est.estimate_abs_xi_phi(spec, 4000, 32, seed=8, x0=z)
    psi = est.estimate_xi_psi(spec, 4000, 32, seed=9)
    assert abs(phi.abs_value - abs(psi.value)) <= 3 * est.combined_se(phi.std_err, psi.std_err)


def test_orbit_examples():
    e = est.xi_orbit_average(proportional(-0.4), 300, 20, seed=1, replicas=4)
    assert np.allclose(e.replicas, -0.4, atol=1e-12)
    sc = est.xi_orbit_average(builtin("scalar_iid"), 4000, 10, seed=1, replicas=32)
    assert abs(sc.value - 1.0) <= 3 * sc.std_err
    with pytest.raises(ValueError):
        est.xi_orbit_average(builtin("scalar_iid"), 0, 10)


def test_gamma_eps_zero_b():
    rows = est.gamma_eps_derivative(zero_b("positive_bernoulli"), [1e-3, -1e-2], 300, 4, seed=0)
    assert [r[1] for r in rows] == [0.0, 0.0]


def test_gamma_eps_scalar_closed_form():
    ((eps, ratio, se),) = est.gamma_eps_derivative(builtin("scalar_iid"), [1e-3], 10_000, 16, seed=3)
    exact = 0.5 * (math.log1p(0.5e-3) + math.log1p(1.5e-3)) / 1e-3
    assert abs(ratio - exact) <= 3 * se
    assert abs(ratio - 1.0) <= 2e-3


def test_gamma_eps_singular_perturbation():
    spec = parse_ensemble("dim: 1\natoms:\n  - {prob: 1.0, A: 2, B: -2}\n")
    with pytest.raises(SingularPerturbedAtom):
        est.gamma_eps_derivative(spec, [1.0], 200, 2)
    with pytest.raises(ValueError):
        est.gamma_eps_derivative(builtin("scalar_iid"), [0.0], 200, 2)


def test_std_err_scales_with_replicas():
    spec = builtin("scalar_iid")
    se = {r: est.estimate_xi_psi(spec, 400, r, seed=11).std_err for r in (16, 64, 256)}
    for small, big in ((16, 64), (64, 256)):
        ratio = se[small] / se[big]
        assert abs(ratio / 2.0 - 1.0) <= 0.3


def test_report_json_fields():
    e = est.estimate_xi_psi(builtin("scalar_iid"), 200, 4, seed=2)
    d = json.loads(e.to_json())
    for key in ("method", "value", "abs_value", "std_err", "replicas", "steps", "seed",
                "ensemble_digest", "rejected_samples"):
        assert key in d
    assert d["replicas"] == 4 and d["method"] == "psi_route"
    assert d["ensemble_digest"] == builtin("scalar_iid").digest()


def test_canonical_sign_and_generic_start():
    assert np.array_equal(est.canonical_sign(np.array([0.1, -0.9])), [-0.1, 0.9])
    assert np.allclose(est.generic_start(4), 0.5)
