import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from histoseg import autograd as ag
from histoseg.errors import DimensionError, EmptyKeyError, LabelError


def ln_ref(x, eps=1e-5):
    """Independent layer-norm oracle (gamma=1, beta=0)."""
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


class TestMatmul:
    def test_identity(self):
        x = np.arange(9.0).reshape(3, 3)
        out = ag.matmul(ag.Tensor(np.eye(3)), ag.Tensor(x))
        np.testing.assert_array_equal(out.data, x)

    def test_hand_product(self):
        out = ag.matmul(ag.Tensor([[1.0, 2.0], [3.0, 4.0]]), ag.Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_zeros_annihilate(self):
        x = np.random.default_rng(0).normal(size=(2, 5))
        out = ag.matmul(ag.Tensor(np.zeros((4, 2))), ag.Tensor(x))
        np.testing.assert_array_equal(out.data, np.zeros((4, 5)))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ag.matmul(ag.Tensor(np.ones((2, 3))), ag.Tensor(np.ones((2, 3))))

    def test_backward_both_operands(self):
        a = ag.Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        b = ag.Tensor([[5.0], [6.0]], requires_grad=True)
        ag.tsum(ag.matmul(a, b)).backward()
        # d(sum(AB))/dA = ones @ B^T, /dB = A^T @ ones
        np.testing.assert_allclose(a.grad, np.ones((2, 1)) @ b.data.T)
        np.testing.assert_allclose(b.grad, a.data.T @ np.ones((2, 1)))


class TestCrossAttention:
    def test_single_key_broadcasts_value(self):
        rng = np.random.default_rng(1)
        q = ag.Tensor(rng.normal(size=(5, 4)))
        k = ag.Tensor(rng.normal(size=(1, 4)))
        v = ag.Tensor(rng.normal(size=(1, 4)))
        out = ag.cross_attention(q, k, v)
        np.testing.assert_allclose(out.data, np.repeat(v.data, 5, axis=0), atol=1e-12)

    def test_identical_keys_average_values(self):
        rng = np.random.default_rng(2)
        q = ag.Tensor(rng.normal(size=(3, 4)))
        k = ag.Tensor(np.tile(rng.normal(size=(1, 4)), (6, 1)))
        v = ag.Tensor(rng.normal(size=(6, 4)))
        out = ag.cross_attention(q, k, v)
        np.testing.assert_allclose(out.data, np.tile(v.data.mean(axis=0), (3, 1)), atol=1e-12)

    def test_two_by_two_scalar_oracle(self):
        q = np.array([[1.0, 0.0], [0.0, 1.0]])
        k = np.array([[1.0, 0.0], [0.0, 2.0]])
        v = np.array([[1.0, 2.0], [3.0, 4.0]])
        d = 2
        expected = np.zeros((2, 2))
        for i in range(2):
            s0 = q[i] @ k[0] / math.sqrt(d)
            s1 = q[i] @ k[1] / math.sqrt(d)
            m = max(s0, s1)
            w0, w1 = math.exp(s0 - m), math.exp(s1 - m)
            z = w0 + w1
            expected[i] = (w0 * v[0] + w1 * v[1]) / z
        out = ag.cross_attention(ag.Tensor(q), ag.Tensor(k), ag.Tensor(v))
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_empty_keys_rejected(self):
        with pytest.raises(EmptyKeyError):
            ag.cross_attention(ag.Tensor(np.ones((2, 3))), ag.Tensor(np.ones((0, 3))),
                               ag.Tensor(np.ones((0, 3))))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=1, max_value=5), st.integers(min_value=1, max_value=5),
           st.integers(min_value=0, max_value=1000))
    def test_output_rows_convex_combinations(self, nq, nk, seed):
        rng = np.random.default_rng(seed)
        q = rng.normal(size=(nq, 3))
        k = rng.normal(size=(nk, 3))
        v = rng.normal(size=(nk, 3))
        out = ag.cross_attention(ag.Tensor(q), ag.Tensor(k), ag.Tensor(v)).data
        assert (out >= v.min(axis=0) - 1e-9).all()
        assert (out <= v.max(axis=0) + 1e-9).all()


class TestSoftmax:
    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        y = ag.softmax(ag.Tensor(rng.normal(scale=30.0, size=(10, 7)))).data
        np.testing.assert_allclose(y.sum(axis=-1), np.ones(10), atol=1e-12)


class TestTransformerLayer:
    def _params(self, d, rng):
        return ag.init_transformer_layer(d, 2 * d, rng)

    def test_shape_preserved(self):
        rng = np.random.default_rng(4)
        p = self._params(6, rng)
        x = ag.Tensor(rng.normal(size=(9, 6)))
        assert ag.transformer_encoder_layer(x, p).shape == (9, 6)

    def test_zero_weights_reduce_to_layernorm_composition(self):
        rng = np.random.default_rng(5)
        p = self._params(4, rng)
        for t in (p.wq, p.wk, p.wv, p.wo, p.w1, p.w2):
            t.data[...] = 0.0
        x = rng.normal(size=(3, 4))
        out = ag.transformer_encoder_layer(ag.Tensor(x), p)
        np.testing.assert_allclose(out.data, ln_ref(ln_ref(x)), atol=1e-12)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(6)
        p = self._params(5, rng)
        x = rng.normal(size=(7, 5))
        perm = rng.permutation(7)
        out = ag.transformer_encoder_layer(ag.Tensor(x), p).data
        out_p = ag.transformer_encoder_layer(ag.Tensor(x[perm]), p).data
        np.testing.assert_allclose(out_p, out[perm], atol=1e-10)


class TestConvBnRelu:
    def test_direct_convolution_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(1, 3, 3))
        w = rng.normal(size=(2, 1, 3, 3))
        b = rng.normal(size=2)
        out = ag.conv3x3(ag.Tensor(x), ag.Tensor(w), ag.Tensor(b)).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        expected = np.zeros((2, 3, 3))
        for co in range(2):
            for i in range(3):
                for j in range(3):
                    expected[co, i, j] = (xp[:, i:i + 3, j:j + 3] * w[co]).sum() + b[co]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_identity_kernel(self):
        x = np.arange(9.0).reshape(1, 3, 3)
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        out = ag.conv3x3(ag.Tensor(x), ag.Tensor(w), ag.Tensor(np.zeros(1)))
        np.testing.assert_allclose(out.data, x)

    def test_zero_input_zero_bias_gives_zero(self):
        rng = np.random.default_rng(8)
        p = ag.init_conv_bn(3, 4, rng)
        out = ag.conv3x3_bn_relu(ag.Tensor(np.zeros((3, 5, 5))), p, training=True)
        np.testing.assert_array_equal(out.data, np.zeros((4, 5, 5)))

    def test_output_never_negative(self):
        rng = np.random.default_rng(9)
        p = ag.init_conv_bn(2, 3, rng)
        out = ag.conv3x3_bn_relu(ag.Tensor(rng.normal(size=(2, 6, 6))), p, training=True)
        assert (out.data >= 0.0).all()

    def test_channel_mismatch(self):
        rng = np.random.default_rng(10)
        p = ag.init_conv_bn(2, 3, rng)
        with pytest.raises(DimensionError):
            ag.conv3x3_bn_relu(ag.Tensor(np.zeros((5, 4, 4))), p)


class TestBilinearUpsample:
    def test_constant_preserved(self):
        out = ag.bilinear_upsample_2x(ag.Tensor(np.full((3, 4, 5), 2.5)))
        np.testing.assert_allclose(out.data, np.full((3, 8, 10), 2.5))

    def test_half_pixel_scalar_oracle(self):
        # src coords for outputs 0..3 are -0.25, 0.25, 0.75, 1.25 (clamped)
        out = ag.bilinear_upsample_2x(ag.Tensor(np.array([[[0.0, 1.0]]])))
        assert out.shape == (1, 2, 4)
        np.testing.assert_allclose(out.data[0, 0], [0.0, 0.25, 0.75, 1.0], atol=1e-12)

    def test_resolution_chain(self):
        x = ag.Tensor(np.random.default_rng(11).normal(size=(2, 7, 7)))
        sizes = []
        for _ in range(3):
            x = ag.bilinear_upsample_2x(x)
            sizes.append(x.shape[1])
        assert sizes == [14, 28, 56]
        assert ag.bilinear_upsample(x, 4).shape == (2, 224, 224)

    def test_preserves_minmax_bounds(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(1, 5, 6))
        out = ag.bilinear_upsample_2x(ag.Tensor(x)).data
        assert out.min() >= x.min() - 1e-12 and out.max() <= x.max() + 1e-12


class TestSoftmaxCrossEntropy:
    def test_uniform_logits_ln2(self):
        loss = ag.softmax_cross_entropy(ag.Tensor(np.zeros((2, 4, 4))),
                                        np.random.default_rng(13).integers(0, 2, (4, 4)))
        assert loss.item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_perfect_prediction_loss_vanishes(self):
        labels = np.zeros((3, 3), dtype=int)
        labels[1, 1] = 1
        logits = np.zeros((2, 3, 3))
        logits[1] = np.where(labels == 1, 50.0, -50.0)
        loss = ag.softmax_cross_entropy(ag.Tensor(logits), labels)
        assert loss.item() < 1e-12

    def test_single_pixel_scalar_log_oracle(self):
        # p_fg = 0.8 from logit gap ln 4
        logits = np.array([0.0, math.log(4.0)]).reshape(2, 1, 1)
        loss = ag.softmax_cross_entropy(ag.Tensor(logits), np.ones((1, 1), dtype=int))
        assert loss.item() == pytest.approx(-math.log(0.8), abs=1e-12)

    def test_bad_label_rejected(self):
        with pytest.raises(LabelError):
            ag.softmax_cross_entropy(ag.Tensor(np.zeros((2, 2, 2))), np.full((2, 2), 3))


class TestAdamW:
    def test_zero_grad_zero_decay_fixed_point(self):
        state = ag.AdamWState(lr=1e-3, weight_decay=0.0)
        p = {"w": np.array([1.0, -2.0, 3.0])}
        out = ag.adamw_step(p, {"w": np.zeros(3)}, state)
        np.testing.assert_array_equal(out["w"], p["w"])

    def test_single_step_closed_form(self):
        lr, wd = 1e-3, 0.01
        state = ag.AdamWState(lr=lr, weight_decay=wd)
        out = ag.adamw_step({"w": np.array([1.0])}, {"w": np.array([1.0])}, state)
        # hand-applied update: m_hat = v_hat = 1 after one step with g = 1
        m_hat, v_hat = 1.0, 1.0
        expected = 1.0 - lr * (m_hat / (math.sqrt(v_hat) + 1e-8) + wd * 1.0)
        assert out["w"][0] == pytest.approx(expected, abs=1e-15)

    def test_identical_params_stay_identical(self):
        rng = np.random.default_rng(14)
        w = rng.normal(size=(3, 3))
        g = rng.normal(size=(3, 3))
        state = ag.AdamWState(lr=1e-2)
        out = ag.adamw_step({"a": w.copy(), "b": w.copy()}, {"a": g.copy(), "b": g.copy()}, state)
        np.testing.assert_array_equal(out["a"], out["b"])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ag.adamw_step({"w": np.zeros(3)}, {"w": np.zeros(4)}, ag.AdamWState())

    def test_bitwise_deterministic(self):
        rng = np.random.default_rng(15)
        w = rng.normal(size=(4,))
        g = rng.normal(size=(4,))
        runs = []
        for _ in range(2):
            state = ag.AdamWState(lr=3e-4, weight_decay=0.05)
            cur = {"w": w.copy()}
            for _ in range(5):
                cur = ag.adamw_step(cur, {"w": g}, state)
            runs.append(cur["w"].tobytes())
        assert runs[0] == runs[1]


class TestGradCheck:
    def test_linear_function_exact(self):
        x = ag.Tensor(np.random.default_rng(16).normal(size=(3, 3)), requires_grad=True)
        err = ag.grad_check(lambda t: ag.tsum(t), x)
        assert err < 1e-9

    def test_scalar_square(self):
        x = ag.Tensor(np.array([3.0]), requires_grad=True)
        f = lambda t: ag.tsum(ag.mul(t, t))
        err = ag.grad_check(f, x)
        assert err < 1e-9
        x.zero_grad()
        ag.tsum(ag.mul(x, x)).backward()
        assert x.grad[0] == pytest.approx(6.0, abs=1e-12)

    @pytest.mark.parametrize("name", [
        "matmul", "attention", "transformer", "conv_bn_relu", "upsample",
        "cross_entropy", "layer_norm", "log_softmax", "pointwise",
    ])
    def test_kernels_against_finite_differences(self, name):
        rng = np.random.default_rng(17)
        if name == "matmul":
            b = ag.Tensor(rng.normal(size=(4, 3)))
            c = rng.normal(size=(5, 3))
            f = lambda t: ag.tsum(ag.mul(ag.matmul(t, b), ag.Tensor(c)))
            x = ag.Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        elif name == "attention":
            k = ag.Tensor(rng.normal(size=(4, 3)))
            v = ag.Tensor(rng.normal(size=(4, 3)))
            w = rng.normal(size=(2, 3))
            f = lambda t: ag.tsum(ag.mul(ag.cross_attention(t, k, v), ag.Tensor(w)))
            x = ag.Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        elif name == "transformer":
            p = ag.init_transformer_layer(4, 8, rng)
            w = rng.normal(size=(3, 4))
            f = lambda t: ag.tsum(ag.mul(ag.transformer_encoder_layer(t, p), ag.Tensor(w)))
            x = ag.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        elif name == "conv_bn_relu":
            p = ag.init_conv_bn(2, 3, rng)
            w = rng.normal(size=(3, 4, 4))
            f = lambda t: ag.tsum(ag.mul(ag.conv3x3_bn_relu(t, p, training=True), ag.Tensor(w)))
            x = ag.Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)
        elif name == "upsample":
            w = rng.normal(size=(2, 8, 6))
            f = lambda t: ag.tsum(ag.mul(ag.bilinear_upsample_2x(t), ag.Tensor(w)))
            x = ag.Tensor(rng.normal(size=(2, 4, 3)), requires_grad=True)
        elif name == "cross_entropy":
            labels = rng.integers(0, 2, (3, 3))
            f = lambda t: ag.softmax_cross_entropy(t, labels)
            x = ag.Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
        elif name == "layer_norm":
            g = ag.Tensor(rng.normal(size=4))
            b = ag.Tensor(rng.normal(size=4))
            w = rng.normal(size=(3, 4))
            f = lambda t: ag.tsum(ag.mul(ag.layer_norm(t, g, b), ag.Tensor(w)))
            x = ag.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        elif name == "log_softmax":
            w = rng.normal(size=(3, 5))
            f = lambda t: ag.tsum(ag.mul(ag.log_softmax(t), ag.Tensor(w)))
            x = ag.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        else:
            b = ag.Tensor(rng.uniform(0.5, 2.0, size=(4,)))
            f = lambda t: ag.tsum(ag.div(ag.tanh(ag.exp(t)),
                                         ag.sqrt(ag.add(ag.log(ag.add(ag.mul(t, t), b)), b))))
            x = ag.Tensor(rng.uniform(-1.0, 1.0, size=(4,)), requires_grad=True)
        assert ag.grad_check(f, x, eps=1e-5) < 1e-4
