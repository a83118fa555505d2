import numpy as np
import pytest

from src.errors import DegenerateVictimError, DimensionError, ParseError, QueryBudgetExceeded
from src.loader import write_mlp_weights
from src.victim import (
    HardLabelOracle, MlpLayer, discretize, make_linear_victim, make_mlp_victim,
    make_quadratic_victim, mlp_victim_from_layers, phi,
)


def central_difference(score, x, h):
    grad = np.zeros_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step[i] = h
        grad[i] = (score(x + step) - score(x - step)) / (2 * h)
    return grad


def test_linear_decisions_and_budget():
    victim = make_linear_victim(np.eye(4)[0], -0.5)
    oracle = HardLabelOracle.from_victim(victim, budget=2)
    assert phi(oracle, np.ones(4)) == 1
    assert phi(oracle, np.zeros(4)) == -1
    with pytest.raises(QueryBudgetExceeded) as exc:
        phi(oracle, np.ones(4))
    assert exc.value.count == 2
    assert oracle.query_count == 2


def test_check_does_not_count():
    oracle = HardLabelOracle.from_victim(make_linear_victim(np.ones(3), -1.0))
    assert oracle.check(np.ones(3)) == 1
    assert oracle.query_count == 0


def test_linear_gradient_and_boundary(rng):
    w = np.eye(6)[0]
    victim = make_linear_victim(w, 0.0)
    for _ in range(10):
        x = rng.random(6)
        np.testing.assert_array_equal(victim.gradient(x), w)
        fd = central_difference(victim.score, x, 1e-4)
        np.testing.assert_allclose(fd, w, rtol=1e-8, atol=1e-8)

    w = rng.standard_normal(6)
    b = -0.3
    victim = make_linear_victim(w, b)
    u = w + 0.1 * rng.standard_normal(6)
    lo, hi = -10.0, 10.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if victim.phi(mid * u) == 1:
            hi = mid
        else:
            lo = mid
    assert hi == pytest.approx(-b / np.dot(w, u), abs=1e-9)


def test_zero_weight_is_degenerate():
    with pytest.raises(DegenerateVictimError):
        make_linear_victim(np.zeros(3), 1.0)


def test_quadratic_center_and_sphere(rng):
    c = np.full(8, 0.5)
    victim = make_quadratic_victim(c, 0.25)
    assert victim.score(c) == pytest.approx(0.0625)
    assert victim.phi(c) == 1
    on_sphere = c.copy()
    on_sphere[0] += 0.25
    assert victim.score(on_sphere) == 0.0
    assert victim.phi(on_sphere) == 1
    for _ in range(10):
        x = rng.random(8)
        fd = central_difference(victim.score, x, 1e-5)
        np.testing.assert_allclose(victim.gradient(x), fd, rtol=1e-6, atol=1e-8)


def test_quadratic_outside_convention():
    victim = make_quadratic_victim(np.zeros(2), 1.0, inside_adversarial=False)
    assert victim.phi(np.zeros(2)) == -1
    assert victim.phi(np.array([3.0, 0.0])) == 1


def _random_layers(rng, sizes, activation="tanh"):
    layers = []
    for i, (n_in, n_out) in enumerate(zip(sizes, sizes[1:])):
        act = activation if i < len(sizes) - 2 else "identity"
        layers.append(MlpLayer(rng.standard_normal((n_out, n_in)) / np.sqrt(n_in),
                               0.1 * rng.standard_normal(n_out), act))
    return layers


def test_single_layer_mlp_is_linear(rng):
    weight = rng.standard_normal((2, 5))
    bias = rng.standard_normal(2)
    victim = mlp_victim_from_layers([MlpLayer(weight, bias)], malicious_class=0)
    linear = make_linear_victim(weight[0] - weight[1], bias[0] - bias[1])
    for _ in range(5):
        x = rng.random(5)
        assert victim.score(x) == pytest.approx(linear.score(x))
        np.testing.assert_allclose(victim.gradient(x), linear.gradient(x))


def test_mlp_gradient_matches_finite_differences(rng):
    victim = mlp_victim_from_layers(_random_layers(rng, [12, 10, 4]), malicious_class=1)
    for _ in range(5):
        x = rng.random(12)
        fd = central_difference(victim.score, x, 1e-5)
        np.testing.assert_allclose(victim.gradient(x), fd, rtol=1e-4, atol=1e-8)


def test_permuting_other_classes_keeps_decisions(rng):
    layers = _random_layers(rng, [6, 8, 4])
    victim = mlp_victim_from_layers(layers, malicious_class=0)
    last = layers[-1]
    order = [0, 2, 1, 3]
    swapped = layers[:-1] + [MlpLayer(last.weight[order], last.bias[order], last.activation)]
    other = mlp_victim_from_layers(swapped, malicious_class=0)
    for _ in range(50):
        x = rng.random(6)
        assert victim.phi(x) == other.phi(x)


def test_mlp_file_roundtrip_and_errors(rng, tmp_path):
    layers = _random_layers(rng, [9, 5, 3], activation="relu")
    path = tmp_path / "net.qmlp"
    write_mlp_weights(str(path), layers, malicious_class=2)
    victim = make_mlp_victim(str(path))
    direct = mlp_victim_from_layers(layers, malicious_class=2)
    x = rng.random(9)
    assert victim.score(x) == direct.score(x)

    with pytest.raises(DimensionError):
        make_mlp_victim(str(path), m=10)

    data = path.read_bytes()
    (tmp_path / "short.qmlp").write_bytes(data[:-4])
    with pytest.raises(ParseError, match="offset"):
        make_mlp_victim(str(tmp_path / "short.qmlp"))
    (tmp_path / "bad.qmlp").write_bytes(b"NOPE 1\n" + data[7:])
    with pytest.raises(ParseError):
        make_mlp_victim(str(tmp_path / "bad.qmlp"))


def test_discretize_rounding(rng):
    assert discretize(np.array([0.5]))[0] == 128 / 255
    np.testing.assert_array_equal(discretize(np.array([0.0, 1.0])), [0.0, 1.0])
    x = rng.random(1000)
    assert np.max(np.abs(discretize(x) - x)) <= 1 / 510 + 1e-15
    once = discretize(x)
    np.testing.assert_array_equal(discretize(once), once)


def test_discretized_oracle_rounds_queries():
    victim = make_linear_victim(np.array([1.0]), -128 / 255)
    oracle = HardLabelOracle.from_victim(victim, discretized=True)
    # 127.6/255 rounds up to 128/255, exactly on the boundary
    assert oracle.phi(np.array([127.6 / 255])) == 1
    assert victim.phi(np.array([127.6 / 255])) == -1
