import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from msgreen.errors import InputShapeError, NumericalOverflowError
from msgreen.net import (
    LayerSpec,
    Network,
    ScaleParams,
    all_pairs,
    backward,
    build_layers,
    evaluate,
    evaluate_jet,
    forward_with_tape,
    init_network,
    jet_batch,
    load_network,
    loss_param_grad,
    param_magnitude_stat,
    save_network,
    zero_network,
)


def one_neuron(a, w, b, scale=None, out_bias=0.0):
    layers = build_layers(len(w), [1])
    p = np.concatenate([np.asarray(w, float), [b], [a], [out_bias]])
    return Network(layers, p, scale=scale or ScaleParams())


def fd_grad_hess(net, z, h):
    D = z.size
    g = np.zeros(D)
    H = np.zeros((D, D))
    for i in range(D):
        e = np.zeros(D)
        e[i] = h
        g[i] = (evaluate(net, z + e) - evaluate(net, z - e)) / (2 * h)
        H[i] = (evaluate_jet(net, z + e).grad - evaluate_jet(net, z - e).grad) / (2 * h)
    return g, H


def rel(a, b):
    return np.linalg.norm(np.ravel(a) - np.ravel(b)) / max(np.linalg.norm(np.ravel(b)), 1e-8)


def test_zero_weight_neuron():
    assert evaluate(one_neuron(1.0, [0.0], 0.0), np.array([0.3])) == 0.0


def test_hand_evaluated_scaled_neuron():
    net = one_neuron(2.0, [1.0], 0.0, ScaleParams(0.5, 1.0, 1.0))
    assert evaluate(net, np.array([0.25])) == pytest.approx(0.5 * 2 * np.tanh(0.5), abs=1e-15)
    assert evaluate(net, np.array([0.25])) == pytest.approx(0.462117, abs=1e-6)


@given(st.floats(-2, 2), st.floats(-2, 2), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_scale_identity_at_unit_epsilon(alpha, beta, seed):
    plain = init_network(3, [7, 5], seed=seed)
    scaled = plain.replace(scale=ScaleParams(1.0, alpha, beta))
    z = np.random.default_rng(seed).uniform(-1, 1, 3)
    assert evaluate(scaled, z) == evaluate(plain, z)


def test_zero_network_jet():
    jet = evaluate_jet(zero_network(4, [6]), np.ones(4))
    assert jet.value == 0.0
    assert not np.any(jet.grad) and not np.any(jet.hess)


def test_one_layer_hessian_closed_form():
    rng = np.random.default_rng(1)
    net = init_network(3, [9], seed=4)
    (W, b), (A, _) = net.weights()
    z = rng.uniform(-1, 1, 3)
    u = z @ W + b
    s2 = -2 * np.tanh(u) * (1 - np.tanh(u) ** 2)
    H = np.einsum("k,ik,jk->ij", A[:, 0] * s2, W, W)
    assert np.max(np.abs(evaluate_jet(net, z).hess - H)) < 1e-12


def test_jet_value_bitwise_and_hess_symmetric():
    rng = np.random.default_rng(2)
    for seed in range(10):
        net = init_network(6, [11, 8], scale=ScaleParams(0.3, 1.0, 1.0), seed=seed)
        z = rng.uniform(-1, 1, 6)
        jet = evaluate_jet(net, z)
        assert jet.value == evaluate(net, z)
        assert np.array_equal(jet.hess, jet.hess.T)


@pytest.mark.parametrize("activation", ["tanh", "arctan"])
def test_jets_match_finite_differences(activation):
    rng = np.random.default_rng(3)
    for seed in range(12):
        depth = 1 + seed % 3
        widths = list(rng.integers(2, 33, depth))
        eps = float(rng.uniform(0.2, 1.0))
        scale = ScaleParams(eps, 1.0, 1.0) if seed % 2 else ScaleParams()
        net = init_network(3, widths, activation, scale, seed)
        z = rng.uniform(-1, 1, 3)
        g, H = fd_grad_hess(net, z, 1e-4 * eps)
        jet = evaluate_jet(net, z)
        assert rel(jet.grad, g) < 1e-6
        assert rel(jet.hess, H) < 1e-6


def test_directional_jets_agree_with_full_hessian():
    rng = np.random.default_rng(5)
    net = init_network(4, [10, 6], seed=9)
    Z = rng.uniform(-1, 1, (7, 4))
    V = rng.normal(size=(2, 4))
    jet = jet_batch(net, Z, V)
    for n in range(7):
        full = evaluate_jet(net, Z[n])
        assert np.allclose(jet.tangents[:, n], V @ full.grad, atol=1e-13)
        for p, (i, j) in enumerate(jet.pairs):
            assert jet.seconds[p, n] == pytest.approx(V[i] @ full.hess @ V[j], abs=1e-12)


def test_shape_errors():
    net = init_network(3, [4])
    with pytest.raises(InputShapeError):
        evaluate(net, np.zeros(2))
    with pytest.raises(InputShapeError):
        jet_batch(net, np.zeros((5, 3)), np.eye(2))
    with pytest.raises(ValueError):
        LayerSpec(0, 3)
    with pytest.raises(ValueError):
        Network(build_layers(3, [4]), np.zeros(5))


def test_overflow_reports_point():
    net = init_network(2, [3], seed=0)
    p = net.params.copy()
    p[-1] = np.inf
    with pytest.raises(NumericalOverflowError) as info:
        evaluate(net.replace(params=p), np.array([[0.1, 0.2], [0.3, 0.4]]))
    assert info.value.point is not None and info.value.point.shape == (2,)


def test_output_bias_gradient_counts_points():
    net = init_network(3, [5], seed=1)
    Z = np.random.default_rng(0).uniform(size=(13, 3))

    def obj(jet):
        return float(jet.value.sum()), (np.ones_like(jet.value), None, None)

    _, g = loss_param_grad(net, Z, obj)
    assert g[-1] == pytest.approx(13.0, abs=1e-12)


def test_zero_net_value_objective_has_zero_gradient():
    net = zero_network(3, [4])

    def obj(jet):
        return float(np.sum(jet.value**2)), (2 * jet.value, None, None)

    _, g = loss_param_grad(net, np.ones((1, 3)), obj)
    assert not np.any(g)


def _hess_objective(target):
    def obj(jet):
        r = jet.seconds[0] + 0.5 * jet.tangents[1] - jet.value * jet.seconds[1] - target
        dv = -2 * r * jet.seconds[1]
        dt = np.zeros_like(jet.tangents)
        dt[1] = r
        ds = np.zeros_like(jet.seconds)
        ds[0] = 2 * r
        ds[1] = -2 * r * jet.value
        return float(np.sum(r * r)), (dv, dt, ds)

    return obj


def test_param_gradient_through_hessian_terms():
    rng = np.random.default_rng(7)
    for seed in range(6):
        depth = 1 + seed % 3
        net = init_network(3, [6] * depth, scale=ScaleParams(0.5, 1.0, 1.0) if seed % 2 else ScaleParams(), seed=seed)
        Z = rng.uniform(-1, 1, (9, 3))
        V = rng.normal(size=(2, 3))
        pairs = ((0, 0), (0, 1))
        obj = _hess_objective(rng.normal(size=9))
        _, g = loss_param_grad(net, Z, obj, V, pairs)
        fd = np.zeros_like(g)
        for k in range(g.size):
            p = net.params.copy()
            h = 1e-6
            p[k] += h
            up = obj(forward_with_tape(net.replace(params=p), Z, V, pairs)[0])[0]
            p[k] -= 2 * h
            dn = obj(forward_with_tape(net.replace(params=p), Z, V, pairs)[0])[0]
            fd[k] = (up - dn) / (2 * h)
        assert rel(g, fd) < 1e-5


def test_backward_with_value_adjoint_only():
    net = init_network(2, [4], seed=2)
    Z = np.random.default_rng(1).uniform(size=(3, 2))
    jet, tape = forward_with_tape(net, Z, np.eye(2), all_pairs(2))
    g1 = backward(net, tape, np.ones(3))
    _, tape0 = forward_with_tape(net, Z)
    g0 = backward(net, tape0, np.ones(3))
    assert np.allclose(g1, g0, atol=1e-14)


def test_param_magnitude_examples():
    assert param_magnitude_stat(zero_network(1, [3])) == 0.0
    assert param_magnitude_stat(one_neuron(1.0, [1.0], 1.0)) == pytest.approx(16.0)
    layers = build_layers(1, [2])
    two = Network(layers, np.array([1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.0]))
    assert param_magnitude_stat(two) == pytest.approx(16.0)


def test_checkpoint_roundtrip(tmp_path):
    net = init_network(6, [12, 7], "arctan", ScaleParams(0.01, 0.0, 1.0), seed=42)
    save_network(net, tmp_path / "n.json")
    back = load_network(tmp_path / "n.json")
    assert np.array_equal(back.params, net.params)
    assert back.scale == net.scale and back.layers == net.layers and back.activation == "arctan"
