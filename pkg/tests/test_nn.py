import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deeposets.nn import (
    Activation,
    AdamState,
    DenseLayer,
    DenseNet,
    DimensionError,
    GradientTape,
    NonFiniteGradientError,
    TraceError,
    adam_step,
    backward,
    forward,
    init_net,
)
from oracles import central_difference, dense_ref, relative_error

ACTIVATIONS = ["identity", "tanh", "selu", "relu"]


def single(w, b, act):
    return DenseNet([DenseLayer(np.array(w, float), np.array(b, float), act)])


def test_forward_identity_layer():
    net = single(np.eye(2), [0, 0], "identity")
    np.testing.assert_array_equal(forward(net, [1.5, -2.0]), [1.5, -2.0])


def test_forward_tanh_zero():
    assert forward(single([[0.0]], [0.0], "tanh"), [7.0])[0] == 0.0


def test_forward_selu_at_one():
    # selu(1) = lambda * 1
    out = forward(single([[1.0]], [0.0], "selu"), [1.0])
    assert out[0] == pytest.approx(1.0507009873554805, abs=1e-15)


def test_forward_selu_negative_branch():
    out = forward(single([[1.0]], [0.0], "selu"), [-2.0])
    assert out[0] == pytest.approx(1.0507009873554805 * 1.6732632423543772 * (np.exp(-2.0) - 1))


def test_forward_batch_matches_rows():
    net = init_net([3, 4, 2], ["selu", "tanh"], seed=3)
    x = np.random.default_rng(0).standard_normal((5, 3))
    batch = forward(net, x)
    for i in range(5):
        np.testing.assert_allclose(batch[i], dense_ref(net, x[i]), rtol=1e-13, atol=1e-14)


def test_forward_dimension_error_names_layer():
    net = init_net([3, 4, 2], "tanh", seed=0)
    with pytest.raises(DimensionError) as err:
        forward(net, np.ones(2))
    assert err.value.layer_index == 0
    assert "layer 0" in str(err.value)


def test_mismatched_layers_rejected():
    with pytest.raises(DimensionError) as err:
        DenseNet([DenseLayer(np.ones((3, 2)), np.zeros(3)), DenseLayer(np.ones((1, 4)), np.zeros(1))])
    assert err.value.layer_index == 1


def test_backward_linear_chain_rule():
    net = single([[2.0]], [0.0], "identity")
    out, trace = forward(net, [3.0], return_trace=True)
    tape = GradientTape.for_net(net)
    dx = backward(net, trace, [1.0], tape)
    assert dx[0] == 2.0
    gw, gb = tape.layer_grads(0)
    assert gw[0, 0] == 3.0 and gb[0] == 1.0


def test_backward_zero_upstream_gives_zero():
    net = init_net([4, 6, 6, 3], ["tanh", "selu", "identity"], seed=1)
    x = np.random.default_rng(1).standard_normal(4)
    _, trace = forward(net, x, return_trace=True)
    tape = GradientTape.for_net(net)
    dx = backward(net, trace, np.zeros(3), tape)
    assert not np.any(dx)
    assert all(not np.any(g) for g in tape.grads)


def test_backward_without_forward():
    net = init_net([2, 2], "tanh", seed=0)
    with pytest.raises(TraceError):
        backward(net, None, np.ones(2), GradientTape.for_net(net))
    other = init_net([2, 2], "tanh", seed=0)
    _, trace = forward(other, np.ones(2), return_trace=True)
    with pytest.raises(TraceError):
        backward(net, trace, np.ones(2), GradientTape.for_net(net))


def test_backward_accumulates():
    net = init_net([2, 3, 1], "tanh", seed=0)
    x = np.array([0.3, -0.1])
    tape = GradientTape.for_net(net)
    for _ in range(2):
        _, trace = forward(net, x, return_trace=True)
        backward(net, trace, [1.0], tape)
    once = GradientTape.for_net(net)
    _, trace = forward(net, x, return_trace=True)
    backward(net, trace, [1.0], once)
    for g2, g1 in zip(tape.grads, once.grads):
        np.testing.assert_allclose(g2, 2 * g1, rtol=1e-15)
    tape.zero()
    assert all(not np.any(g) for g in tape.grads)


def _fd_check(net, x, upstream):
    def f():
        return float(np.sum(forward(net, x) * upstream))

    _, trace = forward(net, x, return_trace=True)
    tape = GradientTape.for_net(net)
    dx = backward(net, trace, upstream, tape)
    numeric = central_difference(f, net.parameters(), step=1e-5)
    errs = [relative_error(a, n) for a, n in zip(tape.grads, numeric)]
    x_arr = np.array(x, dtype=float)
    dx_num = central_difference(lambda: float(np.sum(forward(net, x_arr) * upstream)), [x_arr])[0]
    errs.append(relative_error(dx, dx_num))
    return max(errs)


def test_two_layer_tanh_gradients_match_finite_differences():
    rng = np.random.default_rng(42)
    net = init_net([3, 5, 2], "tanh", seed=42)
    for layer in net.layers:
        layer.bias[:] = rng.standard_normal(layer.out_dim) * 0.3
    assert _fd_check(net, rng.standard_normal(3), rng.standard_normal(2)) < 1e-5


@pytest.mark.parametrize("activation", ACTIVATIONS)
@pytest.mark.parametrize("depth", [1, 2, 3])
def test_gradients_every_activation(activation, depth):
    rng = np.random.default_rng(depth * 10 + ACTIVATIONS.index(activation))
    sizes = [int(s) for s in rng.integers(1, 6, size=depth + 1)]
    net = init_net(sizes, activation, seed=int(rng.integers(1 << 30)))
    for layer in net.layers:
        layer.bias[:] = rng.standard_normal(layer.out_dim) * 0.3
    x = rng.standard_normal((4, sizes[0]))
    assert _fd_check(net, x, rng.standard_normal((4, sizes[-1]))) < 1e-5


def test_init_net_parameter_count():
    net = init_net([1, 40, 40, 40, 40, 100], "tanh", seed=0)
    assert net.parameter_count == 9_100
    assert sum(p.size for p in net.parameters()) == 9_100


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=2, max_size=6))
def test_parameter_count_closed_form(sizes):
    net = init_net(sizes, "tanh", seed=0)
    assert net.parameter_count == sum(o * (i + 1) for i, o in zip(sizes[:-1], sizes[1:]))
    for prev, nxt in zip(net.layers[:-1], net.layers[1:]):
        assert prev.out_dim == nxt.in_dim


def test_init_deterministic_and_seed_sensitive():
    a = init_net([2, 8, 8, 1], ["selu", "selu", "identity"], seed=5)
    b = init_net([2, 8, 8, 1], ["selu", "selu", "identity"], seed=5)
    c = init_net([2, 8, 8, 1], ["selu", "selu", "identity"], seed=6)
    assert all(np.array_equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    assert any(not np.array_equal(p, q) for p, q in zip(a.parameters(), c.parameters()))


def test_init_bounds_and_zero_bias():
    net = init_net([10, 20, 5], ["selu", "tanh"], seed=0)
    assert np.abs(net.layers[0].weights).max() <= np.sqrt(3 / 10)
    assert np.abs(net.layers[1].weights).max() <= np.sqrt(6 / 25)
    assert all(not np.any(layer.bias) for layer in net.layers)


def test_init_rejects_zero_width():
    with pytest.raises(ValueError):
        init_net([3, 0, 1], "tanh")
    with pytest.raises(ValueError):
        init_net([3], "tanh")


def test_activation_enum_from_strings():
    assert Activation("selu") is Activation.SELU
    with pytest.raises(ValueError):
        Activation("gelu")


# --- Adam ------------------------------------------------------------------

def test_adam_first_step_is_lr_times_sign():
    rng = np.random.default_rng(0)
    p = rng.standard_normal(20)
    g = rng.standard_normal(20)
    before = p.copy()
    state = AdamState.for_params([p])
    adam_step([p], [g], state)
    delta = p - before
    np.testing.assert_allclose(np.abs(delta), 1e-3, atol=1e-6)
    assert np.all(np.sign(delta) == -np.sign(g))
    assert state.step == 1


def test_adam_zero_gradient_leaves_params():
    p = np.arange(5.0)
    state = AdamState.for_params([p])
    for _ in range(10):
        adam_step([p], [np.zeros(5)], state)
    np.testing.assert_array_equal(p, np.arange(5.0))


def test_learning_rate_schedule():
    state = AdamState.for_params([np.zeros(1)])
    assert state.learning_rate(0) == 1e-3
    assert state.learning_rate(1999) == 1e-3
    assert state.learning_rate(2000) == pytest.approx(9e-4, rel=1e-15)
    assert state.learning_rate(16_000) == pytest.approx(1e-3 * 0.9**8, rel=1e-15)


@given(st.integers(0, 200_000))
def test_learning_rate_formula(t):
    state = AdamState.for_params([np.zeros(1)])
    assert state.learning_rate(t) == 1e-3 * 0.9 ** (t // 2000)


def test_adam_step_uses_decayed_rate():
    p = np.zeros(3)
    # moments saturated on a constant unit gradient; only bias correction remains
    state = AdamState(m=[np.ones(3)], v=[np.ones(3)], step=2000)
    adam_step([p], [np.ones(3)], state)
    t = 2001
    expected = -9e-4 * (1 / (1 - 0.9**t)) / (np.sqrt(1 / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p, expected, rtol=1e-12)


def test_adam_rejects_nan_and_keeps_state():
    p = np.ones(3)
    state = AdamState.for_params([p])
    with pytest.raises(NonFiniteGradientError):
        adam_step([p], [np.array([1.0, np.nan, 0.0])], state)
    np.testing.assert_array_equal(p, np.ones(3))
    assert state.step == 0


def test_adam_accepts_tape():
    net = init_net([2, 3, 1], "tanh", seed=0)
    _, trace = forward(net, np.ones(2), return_trace=True)
    tape = GradientTape.for_net(net)
    backward(net, trace, [1.0], tape)
    params = net.parameters()
    before = [p.copy() for p in params]
    adam_step(params, tape, AdamState.for_params(params))
    assert any(not np.array_equal(a, b) for a, b in zip(before, params))
    assert all(np.all(np.isfinite(p)) for p in params)
