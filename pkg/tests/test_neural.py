import numpy as np
import pytest

from deepris.neural import (AdamState, Gradients, MlpParams, StaleCacheError, TrainMode,
                            adam_step, backward, forward, init_mlp, loss)


class _ReplayMask:
    """Stands in for an RNG so a finite-difference probe reuses a fixed dropout mask."""

    def __init__(self, mask):
        self.mask = mask

    def random(self, shape):
        return np.where(self.mask > 0, 0.0, 1.0)


def numeric_grad(p, x, t, lam, mask, p_drop, step=1e-5):
    mode = TrainMode(p_drop, _ReplayMask(mask)) if mask is not None else None

    def f():
        out, _ = forward(p, x, mode)
        return loss(out, t, p, lam).total

    grads = []
    for arr in [*p.weights, *p.biases]:
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + step
            up = f()
            arr[idx] = old - step
            down = f()
            arr[idx] = old
            g[idx] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-8):
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def random_case(seed, dims=(6, 9, 7, 5, 6), batch=4, p_drop=0.5):
    rng = np.random.default_rng(seed)
    p = init_mlp(dims, rng)
    for b in p.biases:
        b[:] = rng.normal(scale=0.2, size=b.shape)
    x = rng.normal(size=(batch, dims[0]))
    t = rng.uniform(-0.7, 0.7, size=(batch, dims[-1]))
    return p, x, t, rng


class TestInit:
    def test_default_shapes(self):
        p = init_mlp([2, 500, 250, 100, 2], np.random.default_rng(0))
        assert p.layer_dims == [2, 500, 250, 100, 2]
        assert [W.shape for W in p.weights] == [(500, 2), (250, 500), (100, 250), (2, 100)]
        assert all(np.all(b == 0) for b in p.biases)

    def test_uniform_bound_and_moment(self):
        p = init_mlp([300, 400, 2], np.random.default_rng(1))
        W = p.weights[0]  # 120 000 draws
        a = np.sqrt(6 / 700)
        assert np.all(np.abs(W) <= a)
        # E|U(-a, a)| = a / 2
        assert np.mean(np.abs(W)) == pytest.approx(a / 2, rel=0.05)

    @pytest.mark.parametrize("dims", [[3], [], [2, 0, 2]])
    def test_invalid_dims(self, dims):
        with pytest.raises(ValueError):
            init_mlp(dims, np.random.default_rng(0))


class TestForward:
    def test_zero_net_gives_zero(self):
        p = init_mlp([4, 5, 3], np.random.default_rng(0))
        for W in p.weights:
            W[:] = 0
        out, _ = forward(p, np.zeros(4))
        np.testing.assert_array_equal(out, 0.0)

    def test_single_layer_hand_value(self):
        p = MlpParams([1, 1], [np.array([[1.0]])], [np.array([0.0])], output_scale=1.0)
        out, _ = forward(p, np.array([0.5]))
        assert out[0] == pytest.approx(np.tanh(0.5), abs=1e-12)
        assert out[0] == pytest.approx(0.46211715726, abs=1e-10)

    def test_bounded_by_z(self):
        rng = np.random.default_rng(2)
        p = init_mlp([8, 20, 8], rng, output_scale=0.7)
        out, _ = forward(p, rng.normal(scale=100, size=(50, 8)))
        assert np.all(np.abs(out) <= 0.7)

    def test_shape_mismatch(self):
        p = init_mlp([4, 5, 3], np.random.default_rng(0))
        with pytest.raises(ValueError):
            forward(p, np.zeros(5))

    def test_inference_is_deterministic(self):
        p, x, _, _ = random_case(3)
        a, ca = forward(p, x)
        b, cb = forward(p, x)
        assert ca.mask is None and cb.mask is None
        assert np.array_equal(a, b)

    def test_dropout_mask_values(self):
        p, x, _, rng = random_case(4)
        _, cache = forward(p, x, TrainMode(0.5, rng))
        assert set(np.unique(cache.mask)) <= {0.0, 2.0}

    def test_dropout_is_unbiased(self):
        rng = np.random.default_rng(5)
        p = init_mlp([3, 4, 6, 2], rng)
        x = rng.normal(size=(1, 3))
        _, clean = forward(p, x)
        h = clean.post[1][0]
        _, cache = forward(p, np.repeat(x, 100_000, axis=0), TrainMode(0.5, rng))
        np.testing.assert_allclose((cache.mask * h).mean(axis=0), h, rtol=0.02)

    def test_tanh_keeps_negative_activations(self):
        p = MlpParams([2, 2, 1], [np.array([[1.0, 0.0], [0.0, -1.0]]), np.ones((1, 2))],
                      [np.zeros(2), np.zeros(1)], output_scale=1.0)
        _, cache = forward(p, np.array([-0.8, 0.6]))
        pre, post = cache.pre[0][0], cache.post[0][0]
        assert np.all(pre < 0)
        assert np.all(post < 0)  # tanh keeps the sign
        assert np.all(np.maximum(pre, 0) == 0)  # ReLU would zero them


class TestLoss:
    def test_perfect_prediction(self):
        p = init_mlp([2, 2], np.random.default_rng(0))
        assert loss(np.ones(4).reshape(1, 4), np.ones((1, 4)), p, 0.0).total == 0.0

    def test_unit_error(self):
        p = init_mlp([2, 2], np.random.default_rng(0))
        assert loss(np.array([[1.0, 0, 0]]), np.zeros((1, 3)), p, 0.0).total == 1.0

    def test_penalty(self):
        p = MlpParams([100, 1], [np.ones((1, 100))], [np.zeros(1)])
        lv = loss(np.zeros((1, 1)), np.zeros((1, 1)), p, 1e-4)
        assert lv.total == pytest.approx(0.01, abs=1e-15)
        assert lv.mse_part == 0 and lv.l2_part == pytest.approx(0.01)

    def test_negative_lambda(self):
        p = init_mlp([2, 2], np.random.default_rng(0))
        with pytest.raises(ValueError):
            loss(np.zeros((1, 2)), np.zeros((1, 2)), p, -1.0)


class TestBackward:
    def test_zero_net_zero_hidden_grads(self):
        p = init_mlp([3, 4, 4, 2], np.random.default_rng(0))
        for W in p.weights:
            W[:] = 0
        out, cache = forward(p, np.zeros(3))
        g = backward(p, cache, np.array([0.5, -0.5]), 0.0)
        for gw in g.weights[:-1]:
            np.testing.assert_array_equal(gw, 0.0)

    def test_penalty_gradient(self):
        p, x, _, _ = random_case(6)
        out, cache = forward(p, x)
        lam = 0.3
        g0 = backward(p, cache, out, 0.0)  # target = output -> data term vanishes
        g1 = backward(p, cache, out, lam)
        for a, b, W in zip(g0.weights, g1.weights, p.weights):
            np.testing.assert_allclose(b - a, 2 * lam * W, atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_finite_differences(self, seed):
        p, x, t, rng = random_case(seed)
        _, cache = forward(p, x, TrainMode(0.5, rng))
        analytic = backward(p, cache, t, 1e-3)
        numeric = numeric_grad(p, x, t, 1e-3, cache.mask, 0.5)
        assert max_rel_error([*analytic.weights, *analytic.biases], numeric) < 1e-5

    def test_stale_cache(self):
        p, x, t, _ = random_case(7)
        _, cache = forward(p, x)
        g = backward(p, cache, t, 0.0)
        adam_step(p, g, AdamState.zeros_like(p))
        with pytest.raises(StaleCacheError):
            backward(p, cache, t, 0.0)


def scalar_problem(g_value):
    p = MlpParams([1, 1], [np.array([[0.0]])], [np.array([0.0])])
    grads = Gradients([np.array([[g_value]])], [np.array([0.0])])
    return p, grads


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p, x, _, _ = random_case(8)
        before = p.copy()
        zero = Gradients([np.zeros_like(W) for W in p.weights], [np.zeros_like(b) for b in p.biases])
        adam_step(p, zero, AdamState.zeros_like(p))
        assert p.equals(before)

    def test_first_step_hand_value(self):
        p, grads = scalar_problem(1.0)
        s = AdamState.zeros_like(p, lr=0.01, delta1=0.9, delta2=0.999, eps=1e-8)
        adam_step(p, grads, s)
        assert s.m_w[0][0, 0] == pytest.approx(0.1, abs=1e-15)
        assert s.v_w[0][0, 0] == pytest.approx(0.001, abs=1e-15)
        # -0.01 * 0.1 / sqrt(0.001 + 1e-8)
        assert p.weights[0][0, 0] == pytest.approx(-0.0316226185, abs=1e-9)

    def test_constant_gradient_step_tends_to_lr(self):
        p, grads = scalar_problem(1.0)
        s = AdamState.zeros_like(p, lr=0.01)
        prev = 0.0
        for _ in range(20_000):
            adam_step(p, grads, s)
            step = prev - p.weights[0][0, 0]
            prev = p.weights[0][0, 0]
        assert step == pytest.approx(0.01, rel=1e-3)

    def test_bias_correction_first_step_is_lr(self):
        p, grads = scalar_problem(3.0)
        s = AdamState.zeros_like(p, lr=0.01, bias_correction=True)
        adam_step(p, grads, s)
        assert p.weights[0][0, 0] == pytest.approx(-0.01, rel=1e-6)
