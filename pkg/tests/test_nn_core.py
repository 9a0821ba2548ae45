import math

import numpy as np
import pytest

from protofuse.errors import NumericError
from protofuse.nn_core import (
    Dropout,
    EncoderBlock,
    Gelu,
    LayerNorm,
    Linear,
    MaskedSelfAttention,
    OptimizerState,
    Param,
    RngStream,
    clip_global_norm,
    cosine_lr,
    cross_entropy_batch,
    cross_entropy_label_smoothing,
    gelu,
    gelu_grad,
    gradcheck,
    l2_normalize,
    rmsprop_step,
    softmax,
)


def numeric_grad(f, x, h=1e-6):
    """Dense central-difference gradient of scalar f w.r.t. array x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f()
        flat[i] = orig - h
        lo = f()
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * h)
    return g


class TestRngStream:
    def test_same_seed_same_sequence(self):
        a = RngStream(123).normal((8,))
        b = RngStream(123).normal((8,))
        np.testing.assert_array_equal(a, b)

    def test_streams_are_independent(self):
        a = RngStream(123, stream=1).normal((8,))
        b = RngStream(123, stream=2).normal((8,))
        assert not np.array_equal(a, b)


class TestLinear:
    def test_identity_weights(self):
        lin = Linear("t", 3, 3, RngStream(0), dtype=np.float64)
        lin.W.value[...] = np.eye(3)
        lin.b.value[...] = 0
        x = np.array([[1.0, -2.0, 0.5]])
        np.testing.assert_array_equal(lin.forward(x), x)

    def test_zero_input_broadcasts_bias(self):
        lin = Linear("t", 3, 2, RngStream(0), dtype=np.float64)
        lin.b.value[...] = [0.7, -0.1]
        out = lin.forward(np.zeros((4, 3)))
        np.testing.assert_allclose(out, np.tile([0.7, -0.1], (4, 1)))

    def test_gradients_match_finite_differences(self):
        rng = RngStream(5)
        lin = Linear("t", 4, 2, rng, dtype=np.float64)
        x = rng.normal((3, 4))
        r = rng.normal((3, 2))

        def loss():
            return float(np.sum(lin.forward(x) * r))

        lin.W.zero_grad(); lin.b.zero_grad()
        lin.forward(x)
        dx = lin.backward(r)
        np.testing.assert_allclose(dx, numeric_grad(loss, x), rtol=1e-4, atol=1e-9)
        np.testing.assert_allclose(lin.W.grad, numeric_grad(loss, lin.W.value),
                                   rtol=1e-4, atol=1e-9)
        np.testing.assert_allclose(lin.b.grad, numeric_grad(loss, lin.b.value),
                                   rtol=1e-4, atol=1e-9)

    def test_shape_mismatch_rejected(self):
        lin = Linear("t", 4, 2, RngStream(0))
        with pytest.raises(ValueError):
            lin.forward(np.zeros((3, 5), dtype=np.float32))


class TestLayerNorm:
    def test_constant_row_maps_to_zeros(self):
        ln = LayerNorm("t", 4, dtype=np.float64)
        out = ln.forward(np.full((1, 4), 3.7))
        np.testing.assert_array_equal(out, np.zeros((1, 4)))

    def test_already_normalized_row(self):
        ln = LayerNorm("t", 2, eps=1e-12, dtype=np.float64)
        out = ln.forward(np.array([[-1.0, 1.0]]))
        np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-9)

    def test_output_rows_standardized(self):
        ln = LayerNorm("t", 16, dtype=np.float64)
        x = RngStream(2).normal((5, 16))
        out = ln.forward(x)
        assert np.all(np.abs(out.mean(axis=-1)) < 1e-6)
        assert np.all(np.abs(out.var(axis=-1) - 1.0) < 1e-4)

    def test_gradients_match_finite_differences(self):
        rng = RngStream(9)
        ln = LayerNorm("t", 8, dtype=np.float64)
        ln.gain.value[...] = rng.normal((8,)) * 0.3 + 1.0
        ln.bias.value[...] = rng.normal((8,)) * 0.1
        x = rng.normal((2, 8))
        r = rng.normal((2, 8))

        def loss():
            return float(np.sum(ln.forward(x) * r))

        ln.gain.zero_grad(); ln.bias.zero_grad()
        ln.forward(x)
        dx = ln.backward(r)
        np.testing.assert_allclose(dx, numeric_grad(loss, x), rtol=1e-4, atol=1e-9)
        np.testing.assert_allclose(ln.gain.grad, numeric_grad(loss, ln.gain.value),
                                   rtol=1e-4, atol=1e-9)
        np.testing.assert_allclose(ln.bias.grad, numeric_grad(loss, ln.bias.value),
                                   rtol=1e-4, atol=1e-9)


class TestGelu:
    def test_zero(self):
        assert gelu(np.array(0.0)) == 0.0

    def test_asymptote(self):
        assert abs(gelu(np.array(10.0)) - 10.0) < 1e-6

    def test_gradient_at_reference_points(self):
        for point in (-2.0, -0.5, 0.3, 1.7):
            x = np.array([point])

            def f():
                return float(gelu(x)[0])

            fd = numeric_grad(f, x)[0]
            assert abs(gelu_grad(np.array([point]))[0] - fd) < 1e-5


class TestDropout:
    def test_p_zero_identity(self):
        drop = Dropout(0.0)
        x = RngStream(1).normal((4, 4))
        for mode in ("train", "eval"):
            np.testing.assert_array_equal(drop.forward(x, mode, RngStream(0)), x)

    def test_eval_mode_identity(self):
        drop = Dropout(0.45)
        x = RngStream(1).normal((4, 4))
        np.testing.assert_array_equal(drop.forward(x, "eval", None), x)

    def test_monte_carlo_survivors_and_scale(self):
        drop = Dropout(0.45)
        x = np.ones(1_000_000)
        out = drop.forward(x, "train", RngStream(7, stream=3))
        survivors = np.count_nonzero(out) / x.size
        assert abs(survivors - 0.55) < 0.005
        assert abs(out.mean() - 1.0) < 0.01

    def test_deterministic_given_stream(self):
        drop = Dropout(0.3)
        x = np.ones((64, 64))
        a = drop.forward(x, "train", RngStream(11, stream=2))
        b = drop.forward(x, "train", RngStream(11, stream=2))
        np.testing.assert_array_equal(a, b)

    def test_invalid_probability(self):
        with pytest.raises(ValueError):
            Dropout(1.0)
        with pytest.raises(ValueError):
            Dropout(-0.1)

    def test_backward_uses_same_mask(self):
        drop = Dropout(0.5)
        x = np.ones((200,))
        out = drop.forward(x, "train", RngStream(3, stream=1))
        dy = np.ones_like(x)
        dx = drop.backward(dy)
        np.testing.assert_array_equal((out != 0), (dx != 0))


class TestMaskedSelfAttention:
    def test_single_token_softmax(self):
        rng = RngStream(4)
        attn = MaskedSelfAttention("a", 8, 2, rng, dtype=np.float64)
        z = rng.normal((1, 8))
        out = attn.forward(z, np.array([1.0]))
        weights = attn.last_attention_weights()
        np.testing.assert_allclose(weights, np.ones_like(weights))
        v = z @ attn.v.W.value + attn.v.b.value
        expected = v @ attn.out.W.value + attn.out.b.value
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_masked_token_cannot_leak(self):
        rng = RngStream(6)
        attn = MaskedSelfAttention("a", 8, 2, rng, dtype=np.float64)
        z = rng.normal((4, 8))
        mask = np.array([1.0, 1.0, 0.0, 1.0])
        base = attn.forward(z, mask)
        z2 = z.copy()
        z2[2] += 1000.0 * rng.normal((8,))
        pert = attn.forward(z2, mask)
        keep = [0, 1, 3]
        np.testing.assert_array_equal(base[keep], pert[keep])

    def test_attention_rows_sum_to_one_and_masked_weights_vanish(self):
        rng = RngStream(8)
        attn = MaskedSelfAttention("a", 12, 3, rng, dtype=np.float64)
        z = rng.normal((5, 12))
        mask = np.array([1.0, 0.0, 1.0, 1.0, 0.0])
        attn.forward(z, mask)
        weights = attn.last_attention_weights()  # (1, H, M, M)
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(weights[..., 1] < 1e-30)
        assert np.all(weights[..., 4] < 1e-30)

    def test_full_backward_matches_finite_differences(self):
        rng = RngStream(10)
        attn = MaskedSelfAttention("a", 8, 2, rng, dtype=np.float64)
        z = rng.normal((3, 8))
        mask = np.array([1.0, 1.0, 0.0])
        r = rng.normal((3, 8))

        def loss():
            return float(np.sum(attn.forward(z, mask) * r))

        for p in attn.params():
            p.zero_grad()
        attn.forward(z, mask)
        dz = attn.backward(r)
        np.testing.assert_allclose(dz, numeric_grad(loss, z), rtol=1e-4, atol=1e-9)
        for p in attn.params():
            fd = numeric_grad(loss, p.value)
            np.testing.assert_allclose(p.grad, fd, rtol=1e-4, atol=1e-9,
                                       err_msg=p.name)

    def test_all_masked_rejected(self):
        attn = MaskedSelfAttention("a", 8, 2, RngStream(0))
        with pytest.raises(ValueError):
            attn.forward(np.zeros((2, 8), dtype=np.float32), np.zeros(2))

    def test_head_divisibility_enforced(self):
        with pytest.raises(ValueError):
            MaskedSelfAttention("a", 9, 2, RngStream(0))


class TestEncoderBlock:
    def test_gradients_match_finite_differences(self):
        rng = RngStream(12)
        block = EncoderBlock("b", 8, 2, 16, 0.0, rng, dtype=np.float64)
        z = rng.normal((1, 3, 8))
        mask = np.ones((1, 3))
        mask[0, 2] = 0.0
        r = rng.normal((1, 3, 8))

        def loss():
            return float(np.sum(block.forward(z, mask, "eval", None) * r))

        for p in block.params():
            p.zero_grad()
        block.forward(z, mask, "eval", None)
        dz = block.backward(r)
        np.testing.assert_allclose(dz, numeric_grad(loss, z), rtol=1e-4, atol=1e-9)
        for p in block.params():
            fd = numeric_grad(loss, p.value)
            np.testing.assert_allclose(p.grad, fd, rtol=1e-4, atol=1e-8,
                                       err_msg=p.name)


class TestCrossEntropy:
    def test_confident_correct_near_zero(self):
        loss, _ = cross_entropy_label_smoothing(np.array([20.0, -20.0]), 0, 0.0)
        assert loss < 1e-6

    def test_uniform_logits_ln2(self):
        for label in (0, 1):
            loss, _ = cross_entropy_label_smoothing(np.array([0.0, 0.0]), label, 0.0)
            assert abs(loss - math.log(2)) < 1e-12

    def test_smoothed_matches_direct_formula(self):
        logits = np.array([1.0, -1.0])
        eps = 0.02
        loss, grad = cross_entropy_label_smoothing(logits, 0, eps)
        # direct scalar evaluation of -sum target_c log softmax_c
        e = np.exp(logits - logits.max())
        p = e / e.sum()
        target = np.array([1 - eps + eps / 2, eps / 2])
        expected = -(target * np.log(p)).sum()
        assert abs(loss - expected) < 1e-8
        x = logits.copy()

        def f():
            val, _ = cross_entropy_label_smoothing(x, 0, eps)
            return val

        np.testing.assert_allclose(grad, numeric_grad(f, x), atol=1e-8)

    def test_invalid_label_rejected(self):
        with pytest.raises(ValueError):
            cross_entropy_label_smoothing(np.zeros(2), 2, 0.0)

    def test_batch_matches_single(self):
        rng = RngStream(13)
        logits = rng.normal((6, 2))
        labels = np.array([0, 1, 1, 0, 1, 0])
        mean_loss, dlogits, per = cross_entropy_batch(logits, labels, 0.02)
        singles = [cross_entropy_label_smoothing(logits[i], labels[i], 0.02)
                   for i in range(6)]
        np.testing.assert_allclose(per, [s[0] for s in singles], atol=1e-12)
        assert abs(mean_loss - np.mean([s[0] for s in singles])) < 1e-12
        np.testing.assert_allclose(dlogits, np.stack([s[1] for s in singles]) / 6,
                                   atol=1e-12)


class TestL2Normalize:
    def test_three_four_five(self):
        np.testing.assert_allclose(l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8],
                                   atol=1e-12)

    def test_scale_invariance(self):
        v = RngStream(3).normal((16,))
        for c in (0.5, 2.0, 1000.0):
            np.testing.assert_allclose(l2_normalize(c * v), l2_normalize(v), atol=1e-9)

    def test_unit_norm(self):
        v = RngStream(4).normal((128,))
        assert abs(np.linalg.norm(l2_normalize(v)) - 1.0) < 1e-6

    def test_zero_vector_does_not_fail(self):
        out = l2_normalize(np.zeros(4))
        assert np.all(np.isfinite(out))


class TestClipGlobalNorm:
    def test_boundary_untouched(self):
        p = Param("p", np.zeros(2, dtype=np.float64))
        p.grad[...] = [0.3, 0.4]
        assert clip_global_norm([p], 0.5) == 1.0
        np.testing.assert_array_equal(p.grad, [0.3, 0.4])

    def test_scales_to_cap(self):
        p = Param("p", np.zeros(2, dtype=np.float64))
        p.grad[...] = [3.0, 4.0]
        factor = clip_global_norm([p], 0.5)
        assert abs(factor - 0.1) < 1e-12
        assert abs(np.linalg.norm(p.grad) - 0.5) < 1e-12

    def test_split_params_equal_concatenated(self):
        rng = RngStream(15)
        chunks = [rng.normal((3,)), rng.normal((4,)), rng.normal((2,))]
        params = []
        for i, c in enumerate(chunks):
            p = Param(f"p{i}", np.zeros_like(c))
            p.grad[...] = c
            params.append(p)
        whole = Param("w", np.zeros(9))
        whole.grad[...] = np.concatenate(chunks)
        clip_global_norm(params, 0.7)
        clip_global_norm([whole], 0.7)
        np.testing.assert_allclose(np.concatenate([p.grad for p in params]),
                                   whole.grad, atol=1e-12)

    def test_never_increases_magnitudes(self):
        rng = RngStream(16)
        for _ in range(10):
            p = Param("p", np.zeros(8))
            p.grad[...] = rng.normal((8,)) * 10
            before = np.abs(p.grad).copy()
            clip_global_norm([p], 0.5)
            assert np.all(np.abs(p.grad) <= before + 1e-15)


class TestRMSprop:
    def test_zero_gradient_no_decay_leaves_params(self):
        p = Param("p", np.array([1.0, -2.0]))
        state = OptimizerState(lr=0.1)
        rmsprop_step([p], state)
        np.testing.assert_array_equal(p.value, [1.0, -2.0])

    def test_hand_stepped_first_update(self):
        p = Param("p", np.array([0.0]))
        p.grad[...] = [1.0]
        state = OptimizerState(lr=0.1, alpha=0.99, eps=1e-8)
        rmsprop_step([p], state)
        # v = 0.01, step = 0.1 * 1 / (0.1 + 1e-8)
        expected = -0.1 * 1.0 / (math.sqrt(0.01) + 1e-8)
        assert abs(p.value[0] - expected) < 1e-12
        assert abs(state.square_avg["p"][0] - 0.01) < 1e-15

    def test_quadratic_trajectory_matches_scalar_oracle(self):
        p = Param("p", np.array([1.0]))
        state = OptimizerState(lr=0.05, alpha=0.99, eps=1e-8)
        # independent scalar re-implementation
        theta, v = 1.0, 0.0
        losses = []
        for _ in range(10):
            p.grad[...] = [2.0 * p.value[0]]
            rmsprop_step([p], state)
            g = 2.0 * theta
            v = 0.99 * v + 0.01 * g * g
            theta = theta - 0.05 * g / (math.sqrt(v) + 1e-8)
            assert abs(p.value[0] - theta) < 1e-12
            losses.append(theta ** 2)
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_weight_decay_coupled(self):
        p = Param("p", np.array([2.0]))
        state = OptimizerState(lr=0.1, weight_decay=0.5)
        rmsprop_step([p], state)  # g = 0 + 0.5*2 = 1
        expected = 2.0 - 0.1 * 1.0 / (math.sqrt(0.01) + 1e-8)
        assert abs(p.value[0] - expected) < 1e-12


class TestCosineLr:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(0, 100, 1e-3, 1e-5) == pytest.approx(1e-3)
        assert cosine_lr(100, 100, 1e-3, 1e-5) == pytest.approx(1e-5)
        assert cosine_lr(50, 100, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2)

    def test_monotone_non_increasing(self):
        values = [cosine_lr(t, 37, 0.1, 0.0) for t in range(38)]
        assert all(b <= a for a, b in zip(values, values[1:]))

    def test_step_past_horizon_rejected(self):
        with pytest.raises(ValueError):
            cosine_lr(11, 10, 0.1)


class TestGradcheckHarness:
    def _linear_setup(self):
        rng = RngStream(17)
        lin = Linear("t", 5, 3, rng, dtype=np.float64)
        x = rng.normal((2, 5))
        r = rng.normal((2, 3))

        def loss_and_grad():
            for p in lin.params():
                p.zero_grad()
            out = lin.forward(x)
            lin.backward(r)
            return float(np.sum(out * r))

        return lin, loss_and_grad

    def test_linear_layer_passes_tightly(self):
        lin, fn = self._linear_setup()
        report = gradcheck(fn, lin.params(), probes=15, tolerance=1e-6)
        assert report.passed
        assert report.max_rel_err < 1e-6

    def test_sign_flip_is_flagged(self):
        lin, fn = self._linear_setup()
        report = gradcheck(fn, lin.params(), probes=15, tolerance=1e-6,
                           corrupt_group="t.W")
        assert not report.passed
        assert "t.W" in report.failed_groups

    def test_non_finite_loss_rejected(self):
        p = Param("p", np.array([1.0]))

        def fn():
            return float("nan")

        with pytest.raises(NumericError):
            gradcheck(fn, [p])


class TestSoftmax:
    def test_rows_sum_to_one(self):
        x = RngStream(19).normal((6, 5)) * 10
        s = softmax(x)
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(s >= 0)
