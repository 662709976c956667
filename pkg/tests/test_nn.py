import math
import unittest

import numpy as np
import pytest

from models.config_models import AttentionConfig, Normalization
from nn import tensor as T
from nn.layers import (
    attention_probabilities,
    attention_shapes,
    batch_norm,
    gqa_attention,
    layer_norm,
    normalize,
    projection_shapes,
    projection_unit,
    relative_bias,
    relative_offsets,
    residual_conv_block,
    residual_conv_shapes,
    rope_angles,
    rope_apply,
    token_scale,
)
from nn.tensor import Tensor
from utils.exceptions import InvalidArgumentError

EPS = 1e-6


def numeric_gradient(fn, arrays, index):
    grad = np.zeros_like(arrays[index])
    for idx in np.ndindex(grad.shape):
        plus = [a.copy() for a in arrays]
        minus = [a.copy() for a in arrays]
        plus[index][idx] += EPS
        minus[index][idx] -= EPS
        up = fn(*[Tensor(a) for a in plus]).item()
        down = fn(*[Tensor(a) for a in minus]).item()
        grad[idx] = (up - down) / (2.0 * EPS)
    return grad


def weighted(out: Tensor, seed: int = 99) -> Tensor:
    """Scalarize with fixed random weights so every output element matters"""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return (out * w).sum()


class GradientCase(unittest.TestCase):

    def assertGradientsMatch(self, fn, arrays, rtol=1e-5, atol=1e-7):
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        fn(*leaves).backward()
        for i, leaf in enumerate(leaves):
            self.assertIsNotNone(leaf.grad, f"input {i} received no gradient")
            self.assertEqual(leaf.grad.shape, arrays[i].shape)
            np.testing.assert_allclose(leaf.grad, numeric_gradient(fn, arrays, i), rtol=rtol, atol=atol)


class TestElementwiseGradients(GradientCase):
    """Test cases for elementwise ops against central differences"""

    def setUp(self):
        rng = np.random.default_rng(0)
        self.a = rng.normal(size=(3, 4))
        self.b = rng.normal(size=(4,))
        self.positive = rng.uniform(0.5, 2.0, size=(3, 4))

    def test_broadcast_add_sub_mul(self):
        """Test broadcasting ops reduce gradients back to input shapes"""
        self.assertGradientsMatch(lambda a, b: weighted(a + b), [self.a, self.b])
        self.assertGradientsMatch(lambda a, b: weighted(a - b), [self.a, self.b])
        self.assertGradientsMatch(lambda a, b: weighted(a * b), [self.a, self.b])

    def test_division(self):
        self.assertGradientsMatch(lambda a, p: weighted(a / p), [self.a, self.positive])

    def test_unary_functions(self):
        """Test power, sqrt, exp, log10, abs and gelu"""
        self.assertGradientsMatch(lambda p: weighted(p ** 1.5), [self.positive])
        self.assertGradientsMatch(lambda p: weighted(T.sqrt(p)), [self.positive])
        self.assertGradientsMatch(lambda a: weighted(T.exp(a)), [self.a])
        self.assertGradientsMatch(lambda p: weighted(T.log10(p)), [self.positive])
        self.assertGradientsMatch(lambda p: weighted(T.absolute(p - 0.1)), [self.positive])
        self.assertGradientsMatch(lambda a: weighted(T.gelu(a)), [self.a])

    def test_reused_node_accumulates(self):
        """Test a tensor used twice gets both contributions"""
        x = Tensor(self.a.copy(), requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, 2.0 * self.a)

    def test_backward_accumulates_until_zeroed(self):
        x = Tensor(self.a.copy(), requires_grad=True)
        x.sum().backward()
        x.sum().backward()
        np.testing.assert_allclose(x.grad, 2.0)
        x.zero_grad()
        np.testing.assert_array_equal(x.grad, 0.0)

    def test_gelu_values(self):
        """Test GELU(0) = 0 and GELU(x) ~ x for large x"""
        out = T.gelu(Tensor([0.0, 8.0, -8.0])).data
        self.assertEqual(out[0], 0.0)
        self.assertAlmostEqual(out[1], 8.0, places=9)
        self.assertAlmostEqual(out[2], 0.0, places=9)


class TestReductionAndShapeGradients(GradientCase):
    """Test cases for reductions, indexing and shape ops"""

    def setUp(self):
        self.x = np.random.default_rng(1).normal(size=(2, 3, 4))

    def test_sum_and_mean_over_axes(self):
        self.assertGradientsMatch(lambda x: weighted(x.sum(axis=1)), [self.x])
        self.assertGradientsMatch(lambda x: weighted(x.mean(axis=-1, keepdims=True)), [self.x])
        self.assertGradientsMatch(lambda x: x.mean(), [self.x])

    def test_softmax(self):
        out = T.softmax(Tensor(self.x)).data
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-15)
        self.assertGradientsMatch(lambda x: weighted(T.softmax(x)), [self.x])

    def test_batched_matmul(self):
        """Test matmul broadcasts a 2-D right operand over the batch"""
        w = np.random.default_rng(2).normal(size=(4, 5))
        self.assertGradientsMatch(lambda x, w: weighted(x @ w), [self.x, w])

    def test_reshape_and_transpose(self):
        self.assertGradientsMatch(lambda x: weighted(x.reshape(6, 4).transpose()), [self.x])
        self.assertGradientsMatch(lambda x: weighted(x.transpose(1, 0, 2)), [self.x])

    def test_indexing_with_repeats(self):
        """Test fancy indexing and take accumulate repeated positions"""
        self.assertGradientsMatch(lambda x: weighted(x[:, [0, 2, 2]]), [self.x])
        self.assertGradientsMatch(lambda x: weighted(x[..., 1:3]), [self.x])
        self.assertGradientsMatch(lambda x: weighted(T.take(x, [1, 1, 0], axis=-2)), [self.x])

    def test_concat(self):
        other = np.ones((2, 1, 4))
        self.assertGradientsMatch(lambda x, o: weighted(T.concat([x, o], axis=1)), [self.x, other])

    def test_shape_errors(self):
        """Test incompatible shapes raise InvalidArgumentError"""
        with self.assertRaises(InvalidArgumentError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
        with self.assertRaises(InvalidArgumentError):
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
        with self.assertRaises(InvalidArgumentError):
            Tensor(np.ones(6)).reshape(4, 2)
        with self.assertRaises(InvalidArgumentError):
            Tensor(np.ones((2, 2)), requires_grad=True).backward()


class TestConvolutions(GradientCase):
    """Test cases for conv1d and conv_transpose1d"""

    def setUp(self):
        rng = np.random.default_rng(3)
        self.x = rng.normal(size=(2, 8, 3))
        self.w = rng.normal(size=(4, 3, 3))
        self.b = rng.normal(size=(4,))

    def test_conv1d_matches_direct_sum(self):
        """Test stride 2, padding 1 against an explicit loop"""
        out = T.conv1d(Tensor(self.x), Tensor(self.w), Tensor(self.b), stride=2, padding=1).data
        self.assertEqual(out.shape, (2, 4, 4))
        padded = np.pad(self.x, [(0, 0), (1, 1), (0, 0)])
        for t in range(4):
            window = padded[:, 2 * t:2 * t + 3, :]
            expected = np.einsum('bjc,ocj->bo', window, self.w) + self.b
            np.testing.assert_allclose(out[:, t], expected, atol=1e-12)

    def test_conv1d_gradients(self):
        self.assertGradientsMatch(lambda x, w, b: weighted(T.conv1d(x, w, b, stride=2, padding=1)),
                                  [self.x, self.w, self.b])

    def test_conv_transpose_doubles_length(self):
        """Test kernel 2, stride 2 doubles and its gradients are exact"""
        w = np.random.default_rng(4).normal(size=(3, 5, 2))
        out = T.conv_transpose1d(Tensor(self.x), Tensor(w), stride=2)
        self.assertEqual(out.shape, (2, 16, 5))
        np.testing.assert_allclose(out.data[:, 1::2], self.x @ w[:, :, 1], atol=1e-12)
        self.assertGradientsMatch(lambda x, w, b: weighted(T.conv_transpose1d(x, w, b, stride=2)),
                                  [self.x, w, np.zeros(5)])

    def test_conv_transpose_with_padding_crops(self):
        w = np.random.default_rng(5).normal(size=(3, 2, 3))
        self.assertEqual(T.conv_transpose1d(Tensor(self.x), Tensor(w), stride=2, padding=1).shape, (2, 15, 2))
        self.assertGradientsMatch(lambda x, w: weighted(T.conv_transpose1d(x, w, stride=2, padding=1)),
                                  [self.x, w])

    def test_too_short_input_rejected(self):
        with self.assertRaises(InvalidArgumentError):
            T.conv1d(Tensor(np.ones((2, 3))), Tensor(np.ones((1, 3, 5))))


def rotate_reference(x: np.ndarray, positions, base: float = 10000.0) -> np.ndarray:
    angles = rope_angles(positions, x.shape[-1], base)
    out = np.empty_like(x)
    for i in range(x.shape[-1] // 2):
        c, s = np.cos(angles[:, i]), np.sin(angles[:, i])
        out[..., 2 * i] = x[..., 2 * i] * c - x[..., 2 * i + 1] * s
        out[..., 2 * i + 1] = x[..., 2 * i] * s + x[..., 2 * i + 1] * c
    return out


class TestRotaryEncoding(GradientCase):
    """Test cases for rope_apply"""

    def setUp(self):
        rng = np.random.default_rng(6)
        self.q = rng.normal(size=(1, 8))
        self.k = rng.normal(size=(1, 8))

    def test_position_zero_is_identity(self):
        np.testing.assert_array_equal(rope_apply(Tensor(self.q), [0.0]).data, self.q)

    def test_rotation_preserves_pair_norms(self):
        rotated = rope_apply(Tensor(self.q), [5.0]).data
        np.testing.assert_allclose(np.hypot(rotated[0, 0::2], rotated[0, 1::2]),
                                   np.hypot(self.q[0, 0::2], self.q[0, 1::2]), atol=1e-12)

    def test_scores_depend_only_on_offset(self):
        """Test <R(p) q, R(p + 3) k> is the same for every p"""
        scores = []
        for p in (0.0, 2.0, 7.0, 30.0):
            q = rope_apply(Tensor(self.q), [p]).data
            k = rope_apply(Tensor(self.k), [p + 3.0]).data
            scores.append(float((q @ k.T)[0, 0]))
        np.testing.assert_allclose(scores, scores[0], atol=1e-12)

    def test_first_pair_angle(self):
        """Test pair 0 turns by the position in radians"""
        self.assertAlmostEqual(rope_angles([2.0], 8)[0, 0], 2.0)
        self.assertAlmostEqual(rope_angles([1.0], 8)[0, 1], 10000.0 ** -0.25)

    def test_gradients(self):
        x = np.random.default_rng(7).normal(size=(2, 3, 4))
        self.assertGradientsMatch(lambda x: weighted(rope_apply(x, [0.0, 1.0, 2.0])), [x])

    def test_odd_width_rejected(self):
        with self.assertRaises(InvalidArgumentError):
            rope_apply(Tensor(np.ones((2, 3))), [0.0, 1.0])


def random_attention_weights(cfg: AttentionConfig, seed: int, seq_len=None):
    rng = np.random.default_rng(seed)
    return {role: rng.normal(scale=0.5, size=shape) for role, shape in attention_shapes(cfg, seq_len).items()}


def reference_attention(x: np.ndarray, cfg: AttentionConfig, w, positions=None) -> np.ndarray:
    """Per-head loop where head h uses key/value slice h // (H / G)"""
    hd = cfg.head_dim
    heads = []
    for h in range(cfg.n_heads):
        g = h // cfg.heads_per_group
        q = x @ w['wq'][:, h * hd:(h + 1) * hd]
        k = x @ w['wk'][:, g * hd:(g + 1) * hd]
        v = x @ w['wv'][:, g * hd:(g + 1) * hd]
        if positions is not None:
            q, k = rotate_reference(q, positions), rotate_reference(k, positions)
        scores = q @ k.T / math.sqrt(hd)
        scores = np.exp(scores - scores.max(axis=-1, keepdims=True))
        heads.append((scores / scores.sum(axis=-1, keepdims=True)) @ v)
    return np.concatenate(heads, axis=-1) @ w['wo'] + w['bo']


class TestGroupedQueryAttention(GradientCase):
    """Test cases for gqa_attention"""

    def setUp(self):
        self.x = np.random.default_rng(8).normal(size=(5, 8))

    def _run(self, cfg, w, positions=None):
        tensors = {role: Tensor(value) for role, value in w.items()}
        return gqa_attention(Tensor(self.x), cfg, tensors, positions).data

    def test_matches_per_head_reference(self):
        """Test G = H (plain multi-head), G = 2 and G = 1 against the loop"""
        for groups in (4, 2, 1):
            cfg = AttentionConfig(model_dim=8, n_heads=4, n_kv_groups=groups)
            w = random_attention_weights(cfg, groups)
            np.testing.assert_allclose(self._run(cfg, w), reference_attention(self.x, cfg, w), atol=1e-12)

    def test_matches_reference_with_rope(self):
        cfg = AttentionConfig(model_dim=8, n_heads=2, n_kv_groups=1)
        w = random_attention_weights(cfg, 3)
        positions = np.arange(5, dtype=np.float64)
        np.testing.assert_allclose(self._run(cfg, w, positions),
                                   reference_attention(self.x, cfg, w, positions), atol=1e-12)

    def test_batch_axis_is_independent(self):
        """Test a leading batch axis equals running each sequence alone"""
        cfg = AttentionConfig(model_dim=8, n_heads=4, n_kv_groups=2)
        w = random_attention_weights(cfg, 4)
        tensors = {role: Tensor(value) for role, value in w.items()}
        batch = np.stack([self.x, -self.x])
        out = gqa_attention(Tensor(batch), cfg, tensors).data
        np.testing.assert_allclose(out[1], reference_attention(-self.x, cfg, w), atol=1e-12)

    def test_probabilities_are_row_stochastic(self):
        cfg = AttentionConfig(model_dim=8, n_heads=4, n_kv_groups=2)
        tensors = {role: Tensor(v) for role, v in random_attention_weights(cfg, 5).items()}
        probs = attention_probabilities(Tensor(self.x), cfg, tensors)
        self.assertEqual(probs.shape, (4, 5, 5))
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)

    def test_gradients(self):
        cfg = AttentionConfig(model_dim=4, n_heads=2, n_kv_groups=1)
        w = random_attention_weights(cfg, 6)
        x = np.random.default_rng(9).normal(size=(3, 4))
        roles = sorted(w)

        def fn(x, *values):
            return weighted(gqa_attention(x, cfg, dict(zip(roles, values)), [0.0, 1.0, 2.0]))
        self.assertGradientsMatch(fn, [x] + [w[r] for r in roles])

    def test_rope_attention_is_permutation_equivariant(self):
        """Test permuting tokens together with their positions permutes the output rows"""
        cfg = AttentionConfig(model_dim=8, n_heads=4, n_kv_groups=2)
        tensors = {role: Tensor(v) for role, v in random_attention_weights(cfg, 12).items()}
        positions = np.arange(5, dtype=np.float64)
        order = [3, 0, 4, 1, 2]
        base = gqa_attention(Tensor(self.x), cfg, tensors, positions).data
        shuffled = gqa_attention(Tensor(self.x[order]), cfg, tensors, positions[order]).data
        np.testing.assert_allclose(shuffled, base[order], atol=1e-12)
        # keeping positions fixed moves the rotation off the tokens
        unmatched = gqa_attention(Tensor(self.x[order]), cfg, tensors, positions).data
        self.assertFalse(np.allclose(unmatched, base[order], atol=1e-6))

    def test_relative_offsets(self):
        np.testing.assert_array_equal(relative_offsets(3), [[2, 1, 0], [3, 2, 1], [4, 3, 2]])

    def test_relative_bias_adds_per_offset_scores(self):
        """Test the gathered bias equals a loop over query-key offsets"""
        table = np.random.default_rng(13).normal(size=(2, 7))
        bias = relative_bias(Tensor(table), 4).data
        for h in range(2):
            for i in range(4):
                for j in range(4):
                    self.assertEqual(bias[h, i, j], table[h, i - j + 3])

    def test_zero_relative_bias_changes_nothing(self):
        cfg = AttentionConfig(model_dim=8, n_heads=2, n_kv_groups=1)
        w = random_attention_weights(cfg, 14)
        with_table = {**w, 'rel_bias': np.zeros((2, 9))}
        np.testing.assert_allclose(self._run(cfg, with_table), self._run(cfg, w), atol=1e-12)
        self.assertEqual(attention_shapes(cfg, 5)['rel_bias'], (2, 9))

    def test_relative_bias_gradients(self):
        cfg = AttentionConfig(model_dim=4, n_heads=2, n_kv_groups=1)
        w = random_attention_weights(cfg, 15, seq_len=3)
        x = np.random.default_rng(16).normal(size=(2, 3, 4))
        roles = sorted(w)

        def fn(x, *values):
            return weighted(gqa_attention(x, cfg, dict(zip(roles, values))))
        self.assertGradientsMatch(fn, [x] + [w[r] for r in roles])

    def test_relative_bias_length_must_match(self):
        cfg = AttentionConfig(model_dim=8, n_heads=2, n_kv_groups=1)
        tensors = {role: Tensor(v) for role, v in random_attention_weights(cfg, 17, seq_len=4).items()}
        with self.assertRaises(InvalidArgumentError):
            gqa_attention(Tensor(self.x), cfg, tensors)

    def test_group_count_must_divide_heads(self):
        cfg = AttentionConfig(model_dim=12, n_heads=3, n_kv_groups=2)
        tensors = {role: Tensor(np.ones(shape)) for role, shape in attention_shapes(
            AttentionConfig(model_dim=12, n_heads=3, n_kv_groups=1)).items()}
        with self.assertRaises(InvalidArgumentError):
            gqa_attention(Tensor(np.ones((2, 12))), cfg, tensors)


class TestNormalization(unittest.TestCase):
    """Test cases for token_scale and layer_norm"""

    def setUp(self):
        self.x = np.random.default_rng(10).normal(loc=2.0, size=(4, 16))

    def test_token_scale_gives_unit_rms(self):
        out = token_scale(Tensor(self.x), eps=1e-12).data
        np.testing.assert_allclose(np.sqrt((out ** 2).mean(axis=-1)), 1.0, atol=1e-9)
        # no centering
        self.assertTrue(np.all(out.mean(axis=-1) > 0.5))

    def test_layer_norm_centres_tokens(self):
        out = layer_norm(Tensor(self.x), eps=1e-12).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.std(axis=-1), 1.0, atol=1e-9)

    def test_normalize_dispatches_on_kind(self):
        x = Tensor(self.x)
        np.testing.assert_array_equal(normalize(x, Normalization.LAYER_NORM, 1e-5).data,
                                      layer_norm(x, 1e-5).data)
        np.testing.assert_array_equal(normalize(x, Normalization.TOKEN_SCALE, 1e-5).data,
                                      token_scale(x, 1e-5).data)
        np.testing.assert_array_equal(normalize(x, Normalization.BATCH_NORM, 1e-5).data,
                                      batch_norm(x, 1e-5).data)

    def test_batch_norm_standardizes_channels(self):
        """Test every channel has zero mean and unit variance over batch and sequence"""
        x = np.random.default_rng(18).normal(loc=3.0, scale=2.0, size=(2, 5, 4))
        out = batch_norm(Tensor(x), eps=1e-12).data
        np.testing.assert_allclose(out.mean(axis=(0, 1)), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.std(axis=(0, 1)), 1.0, atol=1e-9)


class TestBatchNormGradients(GradientCase):
    """Test cases for batch_norm against central differences"""

    def test_gradients(self):
        x = np.random.default_rng(19).normal(size=(2, 3, 4))
        self.assertGradientsMatch(lambda x: weighted(batch_norm(x)), [x])


class TestResidualConvBlock(GradientCase):
    """Test cases for the conv token-mixing branch"""

    def setUp(self):
        rng = np.random.default_rng(20)
        self.weights = {role: rng.normal(scale=0.4, size=shape)
                        for role, shape in residual_conv_shapes(3, 3).items()}
        self.x = rng.normal(size=(2, 4, 3))

    def test_keeps_sequence_length(self):
        tensors = {role: Tensor(v) for role, v in self.weights.items()}
        self.assertEqual(residual_conv_block(Tensor(self.x), tensors).shape, (2, 4, 3))

    def test_gradients(self):
        roles = sorted(self.weights)

        def fn(x, *values):
            return weighted(residual_conv_block(x, dict(zip(roles, values))))
        self.assertGradientsMatch(fn, [self.x] + [self.weights[r] for r in roles])


class TestProjectionUnit(GradientCase):
    """Test cases for the up/down back-projection unit"""

    def setUp(self):
        self.d = 3
        rng = np.random.default_rng(11)
        self.weights = {role: rng.normal(scale=0.4, size=shape) for role, shape in projection_shapes(self.d).items()}
        self.x = rng.normal(size=(2, 4, self.d))

    def _tensors(self, weights):
        return {role: Tensor(value) for role, value in weights.items()}

    def test_up_doubles_and_down_halves(self):
        self.assertEqual(projection_unit(Tensor(self.x), 'up', self._tensors(self.weights)).shape, (2, 8, 3))
        down = {**self.weights,
                'w_project': self.weights['w_back'], 'w_back': self.weights['w_project']}
        self.assertEqual(projection_unit(Tensor(self.x), 'down', self._tensors(down)).shape, (2, 2, 3))

    def test_correction_vanishes_for_consistent_pair(self):
        """Test an exact up/down pair returns the plain upsampled sequence"""
        eye = np.eye(self.d)
        weights = {
            'w_project': np.stack([eye, eye], axis=-1), 'b_project': np.zeros(self.d),
            'w_back': np.stack([0.5 * eye, 0.5 * eye], axis=-1), 'b_back': np.zeros(self.d),
            'w_correct': self.weights['w_correct'], 'b_correct': np.zeros(self.d),
        }
        out = projection_unit(Tensor(self.x), 'up', self._tensors(weights)).data
        np.testing.assert_allclose(out, np.repeat(self.x, 2, axis=1), atol=1e-12)

    def test_gradients(self):
        roles = sorted(self.weights)
        x = self.x[0]

        def fn(x, *values):
            return weighted(projection_unit(x, 'up', dict(zip(roles, values))))
        self.assertGradientsMatch(fn, [x] + [self.weights[r] for r in roles])

    def test_invalid_direction_and_odd_down(self):
        with self.assertRaises(InvalidArgumentError):
            projection_unit(Tensor(self.x), 'sideways', self._tensors(self.weights))
        with self.assertRaises(InvalidArgumentError):
            projection_unit(Tensor(np.ones((3, self.d))), 'down', self._tensors(self.weights))


if __name__ == '__main__':
    pytest.main([__file__])
