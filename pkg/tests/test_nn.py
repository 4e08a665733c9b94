import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hardbatch import (
    ConfigurationError,
    DataError,
    MLPNetwork,
    OptimizerState,
    ShapeError,
    backward,
    forward,
    init_network,
    sgd_momentum_step,
    softmax_cross_entropy,
)
from hardbatch.nn import Layer

from conftest import naive_matmul, numeric_gradients, relative_error


class TestInitNetwork:
    def test_biases_are_zero(self):
        net = init_network([2, 2], seed=0)
        for layer in net.layers:
            assert np.array_equal(layer.bias, [0, 0])

    def test_same_seed_is_bitwise_identical(self):
        a = init_network([5, 7, 3], seed=42)
        b = init_network([5, 7, 3], seed=42)
        for p, q in zip(a.parameters(), b.parameters()):
            assert p.tobytes() == q.tobytes()

    def test_different_seed_differs(self):
        a = init_network([5, 7, 3], seed=1)
        b = init_network([5, 7, 3], seed=2)
        assert a.checksum() != b.checksum()

    @pytest.mark.parametrize("sizes", [[4], [], [3, 0, 2], [2, -1]])
    def test_invalid_sizes(self, sizes):
        with pytest.raises(ConfigurationError):
            init_network(sizes, seed=0)

    def test_he_uniform_bound_and_structure(self):
        net = init_network([10, 20, 3], seed=0, dtype=np.float64)
        assert [l.activation for l in net.layers] == ["relu", "identity"]
        assert net.layer_sizes == [10, 20, 3]
        assert net.parameter_count == 10 * 20 + 20 + 20 * 3 + 3
        assert np.abs(net.layers[0].weights).max() <= np.sqrt(6 / 10)
        assert np.abs(net.layers[1].weights).max() <= np.sqrt(6 / 20)
        assert net.layers[0].weights.dtype == np.float64

    def test_final_layer_must_be_linear(self):
        with pytest.raises(ConfigurationError):
            MLPNetwork([Layer(np.eye(2), np.zeros(2), "relu")])

    def test_layer_chaining_checked(self):
        with pytest.raises(ShapeError):
            MLPNetwork([Layer(np.zeros((2, 3)), np.zeros(3)), Layer(np.zeros((4, 2)), np.zeros(2), "identity")])


class TestForward:
    def test_zero_weights_give_zero_logits(self):
        net = init_network([3, 5, 4], seed=0)
        for p in net.parameters():
            p[...] = 0
        x = np.random.default_rng(0).normal(size=(6, 3))
        assert np.all(forward(net, x) == 0)

    def test_identity_network(self):
        net = MLPNetwork([Layer(np.eye(3), np.zeros(3), "identity")], np.float64)
        x = np.random.default_rng(1).normal(size=(4, 3))
        assert np.array_equal(forward(net, x), x)

    def test_matches_naive_matmul_oracle(self):
        rng = np.random.default_rng(7)
        net = init_network([2, 16, 3], seed=7)
        for layer in net.layers:
            layer.bias[...] = rng.normal(size=layer.bias.shape)
        x = rng.normal(size=(9, 2)).astype(np.float32)
        h = x
        for layer in net.layers:
            h = naive_matmul(h, layer.weights) + layer.bias.astype(np.float64)
            if layer.activation == "relu":
                h = np.maximum(h, 0)
        got = forward(net, x)
        assert got.shape == (9, 3)
        np.testing.assert_allclose(got, h, rtol=1e-6, atol=1e-6)

    def test_shape_mismatch(self):
        net = init_network([3, 2], seed=0)
        with pytest.raises(ShapeError):
            forward(net, np.zeros((4, 5)))
        with pytest.raises(ShapeError):
            forward(net, np.zeros(3))


class TestSoftmaxCrossEntropy:
    def test_uniform_logits(self):
        loss, _ = softmax_cross_entropy(np.array([[0.0, 0.0]]), [0])
        assert loss == pytest.approx(np.log(2), abs=1e-12)
        assert round(loss, 6) == 0.693147

    def test_saturated_logits_stay_finite(self):
        loss, grad = softmax_cross_entropy(np.array([[1000.0, -1000.0]], dtype=np.float32), [0])
        assert np.isfinite(loss) and loss == pytest.approx(0.0, abs=1e-12)
        assert np.all(np.isfinite(grad))
        loss, grad = softmax_cross_entropy(np.array([[1e4, -1e4]]), [1])
        assert loss == pytest.approx(2e4)
        assert np.all(np.isfinite(grad))

    def test_gradient_matches_finite_differences_f32(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(4, 5)).astype(np.float32)
        labels = rng.integers(0, 5, size=4)
        _, analytic = softmax_cross_entropy(logits, labels)
        assert analytic.dtype == np.float32
        numeric = np.zeros((4, 5))
        eps = 1e-4
        base = logits.astype(np.float64)
        for idx in np.ndindex(base.shape):
            up, down = base.copy(), base.copy()
            up[idx] += eps
            down[idx] -= eps
            numeric[idx] = (softmax_cross_entropy(up, labels)[0] - softmax_cross_entropy(down, labels)[0]) / (2 * eps)
        assert relative_error(analytic, numeric).max() < 1e-4

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            softmax_cross_entropy(np.zeros((2, 3)), [0, 3])
        with pytest.raises(DataError):
            softmax_cross_entropy(np.zeros((1, 3)), [-1])

    @settings(max_examples=50, deadline=None)
    @given(
        st.integers(1, 6),
        st.integers(2, 5),
        st.floats(0.1, 1000.0),
        st.integers(0, 2**32 - 1),
    )
    def test_loss_is_non_negative(self, n, c, scale, seed):
        rng = np.random.default_rng(seed)
        loss, _ = softmax_cross_entropy(scale * rng.normal(size=(n, c)), rng.integers(0, c, size=n))
        assert loss >= 0


def _random_net(seed, sizes, dtype=np.float64):
    net = init_network(sizes, seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed + 1000)
    for layer in net.layers:
        layer.bias[...] = 0.1 * rng.normal(size=layer.bias.shape)
    return net


class TestBackward:
    def test_closed_form_at_zero_weights(self):
        net = init_network([3, 4, 2], seed=0, dtype=np.float64)
        for p in net.parameters():
            p[...] = 0
        x = np.random.default_rng(0).normal(size=(4, 3))
        labels = np.array([0, 1, 0, 1])
        loss, grads = backward(net, x, labels)
        assert loss == pytest.approx(np.log(2))
        # softmax is uniform, each class is the label of half the rows
        expected = (np.full((4, 2), 0.5) - np.eye(2)[labels]).sum(axis=0) / 4
        np.testing.assert_allclose(grads[3], expected, atol=1e-15)
        np.testing.assert_allclose(grads[3], [0.0, 0.0], atol=1e-15)
        # hidden activations are all zero, so upstream gradients vanish
        assert np.all(grads[0] == 0) and np.all(grads[2] == 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences_f64(self, seed):
        rng = np.random.default_rng(seed)
        net = _random_net(seed, [4, 10, 6, 3])
        assert net.parameter_count <= 200
        x = rng.normal(size=(7, 4))
        y = rng.integers(0, 3, size=7)
        loss, grads = backward(net, x, y)
        numeric = numeric_gradients(net, x, y)
        for g, ng in zip(grads, numeric):
            assert relative_error(g, ng).max() < 1e-6

    def test_finite_differences_f32(self):
        rng = np.random.default_rng(9)
        net32 = _random_net(9, [4, 8, 3], dtype=np.float32)
        x = rng.normal(size=(6, 4)).astype(np.float32)
        y = rng.integers(0, 3, size=6)
        _, grads = backward(net32, x, y)
        numeric = numeric_gradients(net32, x, y)
        for g, ng in zip(grads, numeric):
            assert g.dtype == np.float32
            assert relative_error(g, ng).max() < 1e-4

    def test_network_unchanged(self):
        net = _random_net(0, [3, 5, 2])
        before = net.checksum()
        backward(net, np.ones((2, 3)), [0, 1])
        assert net.checksum() == before

    def test_duplicated_batch_is_invariant(self):
        rng = np.random.default_rng(4)
        net = _random_net(4, [3, 6, 3])
        x = rng.normal(size=(5, 3))
        y = rng.integers(0, 3, size=5)
        loss, grads = backward(net, x, y)
        loss2, grads2 = backward(net, np.concatenate([x, x]), np.concatenate([y, y]))
        assert loss2 == pytest.approx(loss, rel=1e-12)
        for g, g2 in zip(grads, grads2):
            np.testing.assert_allclose(g2, g, rtol=1e-12, atol=1e-15)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_row_permutation_is_invariant(self, seed):
        rng = np.random.default_rng(seed)
        net = _random_net(seed % 1000, [3, 5, 2])
        x = rng.normal(size=(6, 3))
        y = rng.integers(0, 2, size=6)
        perm = rng.permutation(6)
        loss, grads = backward(net, x, y)
        loss_p, grads_p = backward(net, x[perm], y[perm])
        assert loss_p == pytest.approx(loss, rel=1e-12)
        for g, gp in zip(grads, grads_p):
            np.testing.assert_allclose(gp, g, rtol=1e-10, atol=1e-14)


class TestSgdMomentum:
    def _scalar_net(self, w):
        return MLPNetwork([Layer(np.array([[w]]), np.array([0.0]), "identity")], np.float64)

    def test_two_steps(self):
        net = self._scalar_net(1.0)
        state = OptimizerState.zeros_like(net, learning_rate=0.1, momentum=0.9)
        g = [np.array([[1.0]]), np.array([0.0])]
        sgd_momentum_step(net, g, state)
        assert state.velocity[0][0, 0] == pytest.approx(1.0)
        assert net.layers[0].weights[0, 0] == pytest.approx(0.9)
        sgd_momentum_step(net, g, state)
        assert state.velocity[0][0, 0] == pytest.approx(1.9)
        assert net.layers[0].weights[0, 0] == pytest.approx(0.71)

    def test_zero_momentum_is_plain_sgd(self):
        rng = np.random.default_rng(0)
        net = init_network([3, 4, 2], seed=0, dtype=np.float64)
        before = [p.copy() for p in net.parameters()]
        grads = [rng.normal(size=p.shape) for p in net.parameters()]
        state = OptimizerState.zeros_like(net, learning_rate=0.05, momentum=0.0)
        for _ in range(2):
            sgd_momentum_step(net, grads, state)
        for p, p0, g in zip(net.parameters(), before, grads):
            np.testing.assert_allclose(p, p0 - 2 * 0.05 * g, rtol=1e-12)

    def test_shape_mismatch(self):
        net = init_network([2, 2], seed=0)
        state = OptimizerState.zeros_like(net)
        with pytest.raises(ShapeError):
            sgd_momentum_step(net, [np.zeros((3, 2)), np.zeros(2)], state)
        with pytest.raises(ShapeError):
            sgd_momentum_step(net, [np.zeros((2, 2))], state)

    def test_velocity_starts_at_zero(self):
        net = init_network([3, 4, 2], seed=0)
        state = OptimizerState.zeros_like(net)
        assert state.learning_rate == 0.005 and state.momentum == 0.9
        assert all(np.all(v == 0) and v.shape == p.shape for v, p in zip(state.velocity, net.parameters()))

    @pytest.mark.parametrize("lr, mu", [(0.0, 0.9), (0.1, 1.0), (0.1, -0.1)])
    def test_invalid_hyper_parameters(self, lr, mu):
        with pytest.raises(ConfigurationError):
            OptimizerState([], lr, mu)

    def test_deterministic_training_steps(self):
        def run():
            net = init_network([4, 6, 3], seed=5)
            state = OptimizerState.zeros_like(net, 0.01, 0.9)
            rng = np.random.default_rng(5)
            x = rng.normal(size=(8, 4)).astype(np.float32)
            y = rng.integers(0, 3, size=8)
            for _ in range(20):
                _, g = backward(net, x, y)
                sgd_momentum_step(net, g, state)
            return net.checksum()

        assert run() == run()
