"""
Tests for the autodiff engine and Adam.

Every differentiable op is checked against central finite differences in
float64. The projection ``sum(out * W)`` with a random W makes each check
cover the full Jacobian-vector product, not just a summed gradient.
"""

import numpy as np
import pytest

from plm_kit import tensor as T
from plm_kit.config import MaskingPolicy
from plm_kit.encoder import encode_ids, init_encoder, mlm_logits
from plm_kit.errors import GradientStateError, ShapeError
from plm_kit.optim import AdamHyper, AdamState, adam_step
from plm_kit.tensor import IGNORE_INDEX, Tensor
from plm_kit.tokenizer import encode_many, mask_ids

H = 1e-6


# ── Finite-difference helpers ─────────────────────────────


def _project(build, arrays, weights):
    with T.no_grad():
        out = build(*[Tensor(a) for a in arrays])
    return float(np.sum(out.data * weights))


def check_gradients(build, *arrays, seed=0, rtol=1e-5, atol=1e-7):
    with T.precision(np.float64):
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = build(*tensors)
        weights = np.random.default_rng(seed + 99).standard_normal(out.shape)
        T.backward(T.sum_(out * Tensor(weights)))

        for i, (t, a) in enumerate(zip(tensors, arrays)):
            numeric = np.zeros_like(a)
            for idx in np.ndindex(a.shape):
                plus = [x.copy() for x in arrays]
                minus = [x.copy() for x in arrays]
                plus[i][idx] += H
                minus[i][idx] -= H
                numeric[idx] = (
                    _project(build, plus, weights) - _project(build, minus, weights)
                ) / (2 * H)
            np.testing.assert_allclose(t.grad, numeric, rtol=rtol, atol=atol)


def _randn(seed, *shape):
    return np.random.default_rng(seed).standard_normal(shape)


SEEDS = [0, 1, 2]


# ── Elementwise ───────────────────────────────────────────


class TestElementwiseGradients:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_add_same_shape(self, seed):
        check_gradients(T.add, _randn(seed, 3, 4), _randn(seed + 10, 3, 4), seed=seed)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_add_bias(self, seed):
        check_gradients(T.add, _randn(seed, 2, 3, 4), _randn(seed + 10, 4), seed=seed)

    def test_add_scalar(self):
        check_gradients(lambda a, b: a + b, _randn(0, 3, 2), np.array(1.5))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_sub_and_neg(self, seed):
        check_gradients(lambda a, b: -(a - b), _randn(seed, 4), _randn(seed + 10, 4), seed=seed)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_mul(self, seed):
        check_gradients(T.mul, _randn(seed, 3, 3), _randn(seed + 10, 3, 3), seed=seed)

    def test_mul_scalar_and_divide(self):
        check_gradients(lambda a: (a * 3.0) / 4.0, _randn(0, 5))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_exp(self, seed):
        check_gradients(T.exp, _randn(seed, 2, 5), seed=seed)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_log(self, seed):
        check_gradients(T.log, np.abs(_randn(seed, 6)) + 0.5, seed=seed)

    def test_clamp_away_from_bounds(self):
        x = np.array([-3.0, -0.5, 0.2, 0.7, 2.5])
        check_gradients(lambda a: T.clamp(a, -1.0, 1.0), x)

    def test_clamp_blocks_gradient_outside(self):
        a = Tensor(np.array([-2.0, 0.0, 2.0]), requires_grad=True)
        T.backward(T.sum_(T.clamp(a, -1.0, 1.0)))
        np.testing.assert_array_equal(a.grad, [0.0, 1.0, 0.0])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gelu(self, seed):
        check_gradients(T.gelu, _randn(seed, 3, 4) * 2.0, seed=seed)

    def test_masked_fill(self):
        mask = np.array([[True, False, False], [False, True, False]])
        check_gradients(lambda a: T.masked_fill(a, mask, -7.0), _randn(0, 2, 3))

    def test_masked_fill_broadcasts_mask(self):
        mask = np.array([False, True, False])
        out = T.masked_fill(Tensor(np.zeros((2, 3))), mask, -np.inf)
        assert np.isneginf(out.data[:, 1]).all()
        assert np.all(out.data[:, [0, 2]] == 0)

    def test_dropout_with_fixed_rng(self):
        def build(a):
            return T.dropout(a, 0.3, np.random.default_rng(5), True)

        check_gradients(build, _randn(0, 4, 4))

    def test_dropout_is_identity_in_eval(self):
        a = Tensor(_randn(0, 3))
        assert T.dropout(a, 0.5, None, False) is a

    def test_dropout_train_needs_rng(self):
        with pytest.raises(ValueError):
            T.dropout(Tensor(_randn(0, 3)), 0.5, None, True)


# ── Reductions and shape ──────────────────────────────────


class TestShapeGradients:
    @pytest.mark.parametrize("axis", [None, 0, 1, (0, 2)])
    def test_sum(self, axis):
        check_gradients(lambda a: T.sum_(a, axis=axis), _randn(0, 2, 3, 4))

    def test_sum_keepdims(self):
        check_gradients(lambda a: T.sum_(a, axis=1, keepdims=True), _randn(1, 2, 3))

    @pytest.mark.parametrize("axis", [None, -1])
    def test_mean(self, axis):
        check_gradients(lambda a: T.mean(a, axis=axis), _randn(2, 3, 4))

    def test_reshape(self):
        check_gradients(lambda a: T.reshape(a, (6, 2)), _randn(0, 3, 4))

    def test_transpose(self):
        check_gradients(lambda a: T.transpose(a, (2, 0, 1)), _randn(0, 2, 3, 4))

    def test_concat(self):
        check_gradients(
            lambda a, b: T.concat([a, b], axis=1), _randn(0, 2, 1, 3), _randn(1, 2, 4, 3)
        )

    def test_narrow(self):
        check_gradients(lambda a: T.narrow(a, 1, 1, 2), _randn(0, 2, 4, 3))

    def test_narrow_out_of_range(self):
        with pytest.raises(ShapeError):
            T.narrow(Tensor(_randn(0, 2, 4)), 1, 3, 2)


# ── Linear algebra and normalization ──────────────────────


class TestModelOpGradients:
    @pytest.mark.parametrize("seed", SEEDS)
    def test_matmul_2d(self, seed):
        check_gradients(T.matmul, _randn(seed, 3, 4), _randn(seed + 10, 4, 2), seed=seed)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_matmul_batched(self, seed):
        check_gradients(T.matmul, _randn(seed, 2, 3, 4), _randn(seed + 10, 2, 4, 5), seed=seed)

    def test_linear(self):
        check_gradients(T.linear, _randn(0, 2, 3, 4), _randn(1, 4, 5), _randn(2, 5))

    def test_embedding_repeated_ids(self):
        ids = np.array([[0, 2, 2], [1, 0, 2]])
        check_gradients(lambda w: T.embedding(w, ids), _randn(0, 4, 3))

    @pytest.mark.parametrize("seed", SEEDS)
    def test_softmax(self, seed):
        check_gradients(lambda a: T.softmax(a, axis=-1), _randn(seed, 3, 5), seed=seed)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_log_softmax(self, seed):
        check_gradients(lambda a: T.log_softmax(a, axis=-1), _randn(seed, 3, 5), seed=seed)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_layer_norm(self, seed):
        check_gradients(
            lambda x, g, b: T.layer_norm(x, g, b, 1e-5),
            _randn(seed, 2, 3, 6),
            1.0 + 0.1 * _randn(seed + 10, 6),
            0.1 * _randn(seed + 20, 6),
            seed=seed,
            rtol=1e-4,
            atol=1e-6,
        )

    @pytest.mark.parametrize("seed", SEEDS)
    def test_cross_entropy_with_ignored_rows(self, seed):
        targets = np.array([1, IGNORE_INDEX, 4, 0])
        check_gradients(lambda z: T.cross_entropy(z, targets), _randn(seed, 4, 5), seed=seed)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_mse_loss(self, seed):
        target = _randn(seed + 10, 6)
        check_gradients(lambda p: T.mse_loss(p, target), _randn(seed, 6), seed=seed)


# ── Forward values ────────────────────────────────────────


class TestForwardValues:
    def test_matmul_known_product(self):
        a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        b = Tensor(np.array([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(T.matmul(a, b).data, [[19.0, 22.0], [43.0, 50.0]])
        np.testing.assert_array_equal(T.matmul(a, Tensor(np.eye(2))).data, a.data)
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_softmax_rows_sum_to_one(self):
        with T.precision(np.float64):
            x = np.random.default_rng(5).uniform(-50, 50, size=(20, 30))
            rows = T.softmax(Tensor(x), axis=-1).data.sum(axis=-1)
        np.testing.assert_allclose(rows, np.ones(20), atol=1e-6)

    def test_softmax_shift_invariance_and_closed_form(self):
        with T.precision(np.float64):
            x = _randn(2, 4, 7)
            np.testing.assert_allclose(
                T.softmax(Tensor(x + 3.5)).data, T.softmax(Tensor(x)).data, atol=1e-12
            )
            np.testing.assert_allclose(
                T.softmax(Tensor(np.array([0.0, np.log(2.0)]))).data, [1 / 3, 2 / 3], atol=1e-12
            )
        np.testing.assert_allclose(T.softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3, atol=1e-7)

    def test_layer_norm_closed_form(self):
        with T.precision(np.float64):
            out = T.layer_norm(
                Tensor(np.array([[1.0, 2.0, 3.0]])),
                Tensor(np.ones(3)),
                Tensor(np.zeros(3)),
                eps=0.0,
            )
        np.testing.assert_allclose(out.data, [[-np.sqrt(1.5), 0.0, np.sqrt(1.5)]], atol=1e-12)

    def test_layer_norm_degenerate_rows(self):
        ones, zeros = Tensor(np.ones(4)), Tensor(np.zeros(4))
        constant = T.layer_norm(Tensor(np.full((2, 4), 7.0)), ones, zeros)
        np.testing.assert_array_equal(constant.data, np.zeros((2, 4)))
        beta = np.array([0.5, -1.0, 2.0, 0.0])
        shifted = T.layer_norm(Tensor(_randn(1, 3, 4)), Tensor(np.zeros(4)), Tensor(beta))
        np.testing.assert_array_equal(shifted.data, np.tile(beta, (3, 1)).astype(np.float32))

    def test_gelu_asymptotes(self):
        out = T.gelu(Tensor(np.array([-10.0, 0.0, 10.0]))).data
        assert out[0] == pytest.approx(0.0, abs=1e-4)
        assert out[1] == 0.0
        assert out[2] == pytest.approx(10.0, abs=1e-4)

    def test_cross_entropy_uniform_is_log_vocab(self):
        loss = T.cross_entropy(Tensor(np.zeros((5, 30))), [0, 7, 12, 29, 5])
        assert loss.item() == pytest.approx(np.log(30.0), abs=1e-5)

    def test_cross_entropy_two_class_value(self):
        loss = T.cross_entropy(Tensor(np.array([[0.0, np.log(3.0)]])), [1])
        assert loss.item() == pytest.approx(-np.log(0.75), abs=1e-6)
        assert loss.item() == pytest.approx(0.2877, abs=1e-4)

    def test_cross_entropy_confident_target(self):
        logits = np.zeros((1, 30))
        logits[0, 9] = 1000.0
        assert T.cross_entropy(Tensor(logits), [9]).item() == pytest.approx(0.0, abs=1e-6)


# ── Loss edge cases ───────────────────────────────────────


class TestLosses:
    def test_cross_entropy_all_ignored_is_zero(self):
        logits = Tensor(_randn(0, 3, 4), requires_grad=True)
        loss = T.cross_entropy(logits, [IGNORE_INDEX] * 3)
        assert loss.item() == 0.0
        T.backward(loss)
        np.testing.assert_array_equal(logits.grad, np.zeros((3, 4)))

    def test_cross_entropy_target_out_of_range(self):
        with pytest.raises(ValueError):
            T.cross_entropy(Tensor(_randn(0, 2, 4)), [1, 4])

    def test_cross_entropy_matches_log_softmax(self):
        z = _randn(3, 4, 6)
        targets = np.array([0, 5, 2, 3])
        expected = -np.mean(T.log_softmax(Tensor(z)).data[np.arange(4), targets])
        assert T.cross_entropy(Tensor(z), targets).item() == pytest.approx(expected, rel=1e-5)

    def test_layer_norm_rejects_negative_eps(self):
        x = Tensor(_randn(0, 2, 3))
        with pytest.raises(ValueError):
            T.layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=-1.0)


# ── Backward contract ─────────────────────────────────────


class TestBackward:
    def test_non_scalar_loss(self):
        a = Tensor(_randn(0, 3), requires_grad=True)
        with pytest.raises(ShapeError):
            T.backward(a * 2.0)

    def test_loss_without_grad(self):
        with pytest.raises(GradientStateError):
            T.backward(T.sum_(Tensor(_randn(0, 3))))

    def test_second_backward_needs_zero_grad(self):
        a = Tensor(_randn(0, 3), requires_grad=True)
        T.backward(T.sum_(a * a))
        with pytest.raises(GradientStateError):
            T.backward(T.sum_(a * a))
        T.zero_grad([a])
        T.backward(T.sum_(a * a))
        np.testing.assert_allclose(a.grad, 2 * a.data, rtol=1e-6)

    def test_shared_subexpression_accumulates(self):
        with T.precision(np.float64):
            x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
            T.backward(T.sum_(x * x + x))
        np.testing.assert_allclose(x.grad, 2 * x.data + 1)

    def test_grads_only_on_leaves(self):
        a = Tensor(_randn(0, 3), requires_grad=True)
        hidden = a * 3.0
        T.backward(T.sum_(hidden))
        assert hidden.grad is None
        assert a.grad is not None

    def test_no_grad_records_nothing(self):
        a = Tensor(_randn(0, 3), requires_grad=True)
        with T.no_grad():
            out = T.exp(a)
        assert not out.requires_grad
        assert out.is_leaf

    def test_precision_restores_float32(self):
        with T.precision(np.float64):
            assert Tensor([1.0]).data.dtype == np.float64
        assert Tensor([1.0]).data.dtype == np.float32

    def test_incompatible_shapes(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


# ── End to end ────────────────────────────────────────────


class TestEndToEndGradient:
    def test_masked_lm_loss(self, tiny_encoder_config, corpus):
        """Sampled parameter entries of a whole encoder match finite differences."""
        with T.precision(np.float64):
            model = init_encoder(tiny_encoder_config)
            batch = encode_many(corpus[:4], tiny_encoder_config.max_len)
            policy = MaskingPolicy(select_rate=0.5)
            corrupted, labels = mask_ids(batch.ids, policy, np.random.default_rng(0))

            def loss_fn():
                hidden = encode_ids(model, corrupted, batch.attention_mask)
                logits = mlm_logits(model, hidden)
                return T.cross_entropy(T.reshape(logits, (-1, 30)), labels.reshape(-1))

            params = model.parameters()
            T.backward(loss_fn())

            rng = np.random.default_rng(7)
            names = sorted(params)
            checked = 0
            for name in rng.choice(names, size=12, replace=False):
                p = params[name]
                for _ in range(2):
                    idx = tuple(int(rng.integers(s)) for s in p.shape)
                    original = p.data[idx]
                    with T.no_grad():
                        p.data[idx] = original + 1e-5
                        up = loss_fn().item()
                        p.data[idx] = original - 1e-5
                        down = loss_fn().item()
                    p.data[idx] = original
                    numeric = (up - down) / 2e-5
                    assert p.grad[idx] == pytest.approx(numeric, rel=1e-3, abs=1e-7)
                    checked += 1
            assert checked >= 20


# ── Adam ──────────────────────────────────────────────────


class TestAdam:
    def test_first_step_moves_by_lr_times_sign(self):
        p = Tensor(np.array([1.0, -1.0, 0.5]), requires_grad=True)
        state = AdamState.create({"p": p}, AdamHyper(lr=0.01))
        p.grad = np.array([0.3, -2.0, 0.0], dtype=np.float32)
        adam_step({"p": p}, state)
        np.testing.assert_allclose(p.data, [0.99, -0.99, 0.5], rtol=1e-5)
        assert state.step == 1

    def test_zero_gradient_is_identity(self):
        p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        state = AdamState.create({"p": p}, AdamHyper())
        before = p.data.copy()
        p.grad = np.zeros(2, dtype=np.float32)
        adam_step({"p": p}, state)
        np.testing.assert_array_equal(p.data, before)
        np.testing.assert_array_equal(state.m["p"], np.zeros(2))
        assert state.step == 1

    def test_missing_gradient(self):
        p = Tensor(np.ones(2), requires_grad=True)
        state = AdamState.create({"p": p}, AdamHyper())
        with pytest.raises(GradientStateError):
            adam_step({"p": p}, state)

    def test_unknown_parameter(self):
        p = Tensor(np.ones(2), requires_grad=True)
        q = Tensor(np.ones(2), requires_grad=True)
        state = AdamState.create({"p": p}, AdamHyper())
        p.grad = np.ones(2, dtype=np.float32)
        q.grad = np.ones(2, dtype=np.float32)
        with pytest.raises(GradientStateError):
            adam_step({"p": p, "q": q}, state)

    def test_gradient_is_not_modified(self):
        p = Tensor(np.ones(2), requires_grad=True)
        state = AdamState.create({"p": p}, AdamHyper())
        g = np.array([0.5, -0.5], dtype=np.float32)
        p.grad = g.copy()
        adam_step({"p": p}, state)
        np.testing.assert_array_equal(p.grad, g)

    def test_two_steps_on_square_match_hand_computation(self):
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        w, m, v = 1.0, 0.0, 0.0
        expected = []
        for t in (1, 2):
            g = 2.0 * w
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * (g * g)
            m_hat = m / (1 - b1**t)
            v_hat = v / (1 - b2**t)
            w = w - lr * m_hat / (np.sqrt(v_hat) + eps)
            expected.append(w)

        with T.precision(np.float64):
            p = Tensor(np.array([1.0]), requires_grad=True)
            params = {"p": p}
            state = AdamState.create(params, AdamHyper(lr=lr, beta1=b1, beta2=b2, eps=eps))
            seen = []
            for _ in range(2):
                T.zero_grad([p])
                T.backward(T.sum_(p * p))
                adam_step(params, state)
                seen.append(float(p.data[0]))
        assert expected[0] == pytest.approx(0.9, abs=1e-7)
        np.testing.assert_allclose(seen, expected, rtol=0, atol=1e-12)

    def test_minimizes_quadratic(self):
        p = Tensor(np.array([3.0, -2.0]), requires_grad=True)
        params = {"p": p}
        state = AdamState.create(params, AdamHyper(lr=0.1))
        initial = float(np.sum(p.data**2))
        for _ in range(500):
            T.zero_grad([p])
            T.backward(T.sum_(p * p))
            adam_step(params, state)
        assert float(np.sum(p.data**2)) < 0.01 * initial
