import numpy as np
import pytest

from hcrl.nn import (AdamState, DenseNet, Layer, adam_step, backward, finite_diff_grad,
                     forward, load_arrays, net_arrays, net_from_arrays, relative_error,
                     save_arrays)


def test_identity_layer_forward():
    net = DenseNet([Layer(np.eye(2), np.zeros(2), "identity")])
    out, _ = forward(net, np.array([1.0, 2.0]))
    assert np.array_equal(out, [1.0, 2.0])


def test_relu_clamps_negatives():
    net = DenseNet([Layer(np.eye(2), np.zeros(2), "relu")])
    out, _ = forward(net, np.array([-1.0, 2.0]))
    assert np.array_equal(out, [0.0, 2.0])


def test_two_layer_tanh_matches_straight_line():
    rng = np.random.default_rng(3)
    net = DenseNet.init([3, 5, 2], rng)
    x = np.array([0.3, -1.2, 0.7])
    W1, b1, W2, b2 = net.params()
    expect = W2 @ np.tanh(W1 @ x + b1) + b2
    out, _ = forward(net, x)
    assert np.allclose(out, expect, rtol=0, atol=1e-15)


def test_dimension_mismatch_rejected():
    net = DenseNet.init([3, 2], np.random.default_rng(0))
    with pytest.raises(ValueError):
        forward(net, np.zeros(4))


def test_layers_must_chain():
    with pytest.raises(ValueError):
        DenseNet([Layer(np.zeros((3, 2)), np.zeros(3)), Layer(np.zeros((1, 4)), np.zeros(1))])


def test_identity_backward():
    net = DenseNet([Layer(np.eye(2), np.zeros(2), "identity")])
    x = np.array([3.0, -1.0])
    _, tape = forward(net, x)
    (gW, gb), gin = backward(net, tape, np.array([1.0, 0.0]))
    assert np.array_equal(gin, [1.0, 0.0])
    assert np.array_equal(gW, np.outer([1.0, 0.0], x))
    assert np.array_equal(gb, [1.0, 0.0])


def test_zero_grad_out_gives_zero_gradients():
    net = DenseNet.init([3, 4, 2], np.random.default_rng(1))
    _, tape = forward(net, np.ones(3))
    grads, gin = backward(net, tape, np.zeros(2))
    assert all(not np.any(g) for g in grads) and not np.any(gin)


def test_foreign_tape_rejected():
    rng = np.random.default_rng(0)
    a, b = DenseNet.init([2, 2], rng), DenseNet.init([2, 2], rng)
    _, tape = forward(a, np.ones(2))
    with pytest.raises(ValueError):
        backward(b, tape, np.ones(2))


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("act", ["tanh", "relu"])
def test_backward_matches_finite_differences(seed, act):
    rng = np.random.default_rng(seed)
    net = DenseNet.init([4, 6, 3], rng, hidden=act)
    X = rng.normal(size=(5, 4))
    gout = rng.normal(size=(5, 3))
    out, tape = forward(net, X)
    grads, gin = backward(net, tape, gout)
    before = [p.copy() for p in net.params()]
    for p, g in zip(net.params(), grads):
        def f(t, p=p):
            saved = p.copy()
            p[...] = t
            val = np.sum(forward(net, X)[0] * gout)
            p[...] = saved
            return val
        assert relative_error(g, finite_diff_grad(f, p.copy())) <= 1e-4
    num_in = finite_diff_grad(lambda t: np.sum(forward(net, t)[0] * gout), X)
    assert relative_error(gin, num_in) <= 1e-4
    assert all(np.array_equal(a, b) for a, b in zip(before, net.params()))


def test_forward_deterministic():
    net = DenseNet.init([3, 4, 2], np.random.default_rng(2))
    x = np.arange(3.0)
    assert np.array_equal(forward(net, x)[0], forward(net, x)[0])


def test_adam_zero_grads_leave_params():
    p = [np.array([1.0, 2.0])]
    st = AdamState.for_params(p)
    st.v[0][...] = 1.0
    adam_step(p, [np.zeros(2)], st)
    assert np.array_equal(p[0], [1.0, 2.0])
    assert np.allclose(st.v[0], 0.999)
    assert st.t == 1


def test_adam_first_step_size():
    p = [np.array([0.0])]
    st = AdamState.for_params(p, lr=0.001)
    adam_step(p, [np.array([1.0])], st)
    # m_hat = v_hat = 1, so the step is lr / (1 + eps)
    assert p[0][0] == pytest.approx(-0.001 / (1 + 1e-8), abs=1e-15)


def test_adam_is_stateful():
    p = [np.array([0.0])]
    st = AdamState.for_params(p)
    adam_step(p, [np.array([1.0])], st)
    first = p[0].copy()
    adam_step(p, [np.array([1.0])], st)
    assert st.t == 2 and p[0][0] != first[0]


def test_adam_rejects_non_finite():
    p = [np.array([0.0])]
    st = AdamState.for_params(p)
    with pytest.raises(FloatingPointError):
        adam_step(p, [np.array([np.nan])], st)
    assert p[0][0] == 0.0 and st.t == 0


def test_finite_diff_quadratic():
    g = finite_diff_grad(lambda t: float(t[0] ** 2), np.array([3.0]))
    assert g[0] == pytest.approx(6.0, abs=1e-8)


def test_finite_diff_constant_and_sine():
    assert not np.any(finite_diff_grad(lambda t: 7.0, np.zeros(4)))
    g = finite_diff_grad(lambda t: float(np.sin(t).sum()), np.zeros(3))
    assert np.allclose(g, 1.0, atol=1e-9)


def test_finite_diff_non_finite_raises():
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore", divide="ignore"):
        finite_diff_grad(lambda t: float(np.log(t[0])), np.array([0.0]))


def test_container_round_trip(tmp_path):
    net = DenseNet.init([3, 4, 2], np.random.default_rng(5))
    arrays = net_arrays(net, "enc")
    save_arrays(tmp_path / "a.bin", arrays, {"note": "x"})
    back, meta = load_arrays(tmp_path / "a.bin")
    assert meta["note"] == "x"
    net2 = net_from_arrays(back, "enc", [l.activation for l in net.layers])
    assert all(np.array_equal(a, b) for a, b in zip(net.params(), net2.params()))
    save_arrays(tmp_path / "b.bin", net_arrays(net2, "enc"), {"note": "x"})
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_container_rejects_bad_magic(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"NOTMAGIC" + bytes(20))
    with pytest.raises(ValueError):
        load_arrays(tmp_path / "bad.bin")
