import numpy as np
import pytest

from src.core import make_rng
from src.errors import ContractError, DomainError, QueryBudgetExceeded
from src.gradest import effective_directions, estimate_gradient, estimate_gradient_discretized
from src.subspace import basis_with_rho, explicit_basis, full_basis
from src.theory import c_coefficient
from src.victim import HardLabelOracle, make_linear_victim


def boundary_setup(m, seed=0, level=0.5):
    rng = make_rng(seed)
    w = rng.standard_normal(m)
    x = np.full(m, level)
    victim = make_linear_victim(w, -float(np.dot(w, x)))
    return victim, x, w


def cosine(a, b):
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_single_probe_is_signed_direction():
    victim, x, _ = boundary_setup(20)
    oracle = HardLabelOracle.from_victim(victim)
    est = estimate_gradient(x, full_basis(20), 1, 1e-3, oracle, make_rng(4))
    assert np.linalg.norm(est.raw) == pytest.approx(1.0)
    assert est.queries_used == 1
    assert not est.degenerate
    np.testing.assert_allclose(est.direction, est.raw)


def test_consumes_exactly_b_queries():
    victim, x, _ = boundary_setup(50)
    oracle = HardLabelOracle.from_victim(victim)
    est = estimate_gradient(x, full_basis(50), 17, 1e-3, oracle, make_rng(1))
    assert est.queries_used == 17
    assert oracle.query_count == 17
    assert len(est.decisions) == 17


def test_budget_runs_out_mid_batch():
    victim, x, _ = boundary_setup(30)
    oracle = HardLabelOracle.from_victim(victim, budget=5)
    with pytest.raises(QueryBudgetExceeded) as exc:
        estimate_gradient(x, full_basis(30), 10, 1e-3, oracle, make_rng(0))
    assert exc.value.count == 5


def test_preconditions():
    victim, x, _ = boundary_setup(8)
    oracle = HardLabelOracle.from_victim(victim)
    with pytest.raises(DomainError):
        estimate_gradient(x, full_basis(8), 4, 0.0, oracle, make_rng(0))
    with pytest.raises(ContractError):
        estimate_gradient(x + 2.0, full_basis(8), 4, 1e-3, oracle, make_rng(0))


def test_full_space_cosine_matches_closed_form():
    m, B = 3072, 100
    victim, x, w = boundary_setup(m)
    basis = full_basis(m)
    cosines = []
    for seed in range(50):
        oracle = HardLabelOracle.from_victim(victim)
        est = estimate_gradient(x, basis, B, 1e-4, oracle, make_rng(seed), orthogonalize=True)
        cosines.append(cosine(est.direction, w))
    cosines = np.asarray(cosines)
    expected = c_coefficient(m) * np.sqrt(B / m)
    assert expected == pytest.approx(0.1440, abs=2e-4)
    stderr = cosines.std(ddof=1) / np.sqrt(len(cosines))
    assert abs(cosines.mean() - expected) < 3 * stderr


def test_one_dimensional_basis_recovers_gradient():
    victim, x, w = boundary_setup(40)
    basis = explicit_basis((w / np.linalg.norm(w))[:, None])
    for seed in range(5):
        oracle = HardLabelOracle.from_victim(victim)
        est = estimate_gradient(x, basis, 8, 1e-3, oracle, make_rng(seed))
        assert cosine(est.direction, w) == pytest.approx(1.0, abs=1e-12)


def test_flipping_every_decision_flips_direction():
    victim, x, _ = boundary_setup(25)
    plain = HardLabelOracle.from_victim(victim)
    flipped = HardLabelOracle(lambda v: -victim.phi(v))
    a = estimate_gradient(x, full_basis(25), 12, 1e-3, plain, make_rng(9))
    b = estimate_gradient(x, full_basis(25), 12, 1e-3, flipped, make_rng(9))
    np.testing.assert_array_equal(b.direction, -a.direction)


def test_concurrent_probes_match_sequential():
    victim, x, _ = boundary_setup(64)
    a = estimate_gradient(x, full_basis(64), 32, 1e-3, HardLabelOracle.from_victim(victim),
                          make_rng(5))
    b = estimate_gradient(x, full_basis(64), 32, 1e-3, HardLabelOracle.from_victim(victim),
                          make_rng(5), workers=4)
    np.testing.assert_array_equal(a.raw, b.raw)


def test_probes_stay_in_box():
    victim, _, _ = boundary_setup(16)
    seen = []

    def decide(v):
        seen.append(v.copy())
        return victim.phi(v)

    x = np.zeros(16)
    x[0] = 1.0
    estimate_gradient(x, full_basis(16), 10, 0.5, HardLabelOracle(decide), make_rng(3))
    stacked = np.vstack(seen)
    assert stacked.min() >= 0.0 and stacked.max() <= 1.0


def test_smaller_subspace_gives_better_cosine():
    m, B = 1024, 16
    rng = make_rng(77)
    victim, x, w = boundary_setup(m, seed=3)
    means = {}
    for n in (m, m // 4, m // 16):
        basis = full_basis(m) if n == m else basis_with_rho(w, n, 1.0, rng)
        cosines = []
        for seed in range(100):
            oracle = HardLabelOracle.from_victim(victim)
            est = estimate_gradient(x, basis, B, 1e-6, oracle, make_rng(seed), orthogonalize=True)
            cosines.append(cosine(est.direction, w))
        cosines = np.asarray(cosines)
        means[n] = (cosines.mean(), cosines.std(ddof=1) / np.sqrt(len(cosines)))
    for big, small in ((m, m // 4), (m // 4, m // 16)):
        gap = means[small][0] - means[big][0]
        assert gap > 3 * np.hypot(means[small][1], means[big][1])


def test_effective_direction_rounding():
    points, eff = effective_directions(np.zeros(3), 0.003, np.eye(3)[:1])
    np.testing.assert_allclose(points[0], [1 / 255, 0.0, 0.0])
    np.testing.assert_allclose(eff[0], [(1 / 255) / 0.003, 0.0, 0.0])


def test_tiny_probes_are_absorbed_by_rounding():
    victim, x, _ = boundary_setup(64, level=128 / 255)
    oracle = HardLabelOracle.from_victim(victim, discretized=True)
    plain = estimate_gradient(x, full_basis(64), 20, 1e-9, oracle, make_rng(0))
    assert plain.degenerate
    assert plain.agreement == 1.0

    disc = estimate_gradient_discretized(x, full_basis(64), 20, 1e-9, oracle, make_rng(0))
    assert disc.degenerate
    assert disc.absorbed == 20
    assert not np.any(disc.raw)


def test_discretized_estimator_keeps_signal():
    victim, x, w = boundary_setup(64, level=128 / 255)
    cosines = []
    for seed in range(40):
        oracle = HardLabelOracle.from_victim(victim, discretized=True)
        est = estimate_gradient_discretized(x, full_basis(64), 20, 4 / 255, oracle, make_rng(seed))
        cosines.append(cosine(est.raw, w) if np.any(est.raw) else 0.0)
    cosines = np.asarray(cosines)
    stderr = cosines.std(ddof=1) / np.sqrt(len(cosines))
    assert cosines.mean() > 3 * stderr


def test_large_probe_radius_matches_plain_estimator():
    victim, x, _ = boundary_setup(64, level=128 / 255)
    for seed in range(3):
        plain = estimate_gradient(x, full_basis(64), 400, 1.0,
                                  HardLabelOracle.from_victim(victim), make_rng(seed))
        disc = estimate_gradient_discretized(x, full_basis(64), 400, 1.0,
                                             HardLabelOracle.from_victim(victim, discretized=True),
                                             make_rng(seed))
        assert cosine(plain.direction, disc.direction) >= 0.99
