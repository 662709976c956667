"""
Transformer and convolutional building blocks on ``[..., seq, channels]`` tensors.

Weights are passed in as plain mappings from role names to Tensors so the same
functions serve training (leaf tensors with gradients) and inference.
"""

import logging
import math
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from models.config_models import AttentionConfig, Normalization
from nn.tensor import (
    Tensor,
    as_tensor,
    conv1d,
    conv_transpose1d,
    gelu,
    make_op,
    matmul,
    mean,
    reshape,
    softmax,
    take,
    transpose,
)
from utils.exceptions import InvalidArgumentError

logger = logging.getLogger(__name__)

DEFAULT_ROPE_BASE = 10000.0

Weights = Mapping[str, Tensor]


def rope_angles(positions: Sequence[float], dim: int, base: float = DEFAULT_ROPE_BASE) -> np.ndarray:
    """Rotation angles [seq, dim / 2]: position p times base^(-2i / dim)"""
    p = np.asarray(positions, dtype=np.float64)
    inv_freq = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    return np.outer(p, inv_freq)


def rope_apply(x: Tensor, positions: Sequence[float], base: float = DEFAULT_ROPE_BASE) -> Tensor:
    """
    Rotate each consecutive channel pair (2i, 2i + 1) of ``x`` [..., seq, d]
    by the angle of its token's position.
    """
    x = as_tensor(x)
    dim = x.shape[-1]
    if dim % 2 != 0:
        raise InvalidArgumentError(f"rope_apply needs an even channel count, got {dim}")
    if len(positions) != x.shape[-2]:
        raise InvalidArgumentError(f"rope_apply got {len(positions)} positions for {x.shape[-2]} tokens")

    angles = rope_angles(positions, dim, base)
    cos, sin = np.cos(angles), np.sin(angles)
    even, odd = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos

    def grad_fn(g):
        g_even, g_odd = g[..., 0::2], g[..., 1::2]
        grad = np.empty_like(g)
        grad[..., 0::2] = g_even * cos + g_odd * sin
        grad[..., 1::2] = -g_even * sin + g_odd * cos
        return (grad,)
    return make_op(out, (x,), grad_fn)


def token_scale(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-token RMS scaling without mean subtraction or learnable parameters"""
    x = as_tensor(x)
    return x * (mean(x * x, axis=-1, keepdims=True) + eps) ** -0.5


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    centred = x - mean(x, axis=-1, keepdims=True)
    return centred * (mean(centred * centred, axis=-1, keepdims=True) + eps) ** -0.5


def batch_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel standardization over every axis but the last, using the statistics of this pass"""
    x = as_tensor(x)
    axes = tuple(range(x.ndim - 1))
    centred = x - mean(x, axis=axes, keepdims=True)
    return centred * (mean(centred * centred, axis=axes, keepdims=True) + eps) ** -0.5


def normalize(x: Tensor, kind: Normalization, eps: float) -> Tensor:
    if kind == Normalization.LAYER_NORM:
        return layer_norm(x, eps)
    if kind == Normalization.BATCH_NORM:
        return batch_norm(x, eps)
    return token_scale(x, eps)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else out + bias


def _split_heads(x: Tensor, n_heads: int, head_dim: int) -> Tensor:
    """[..., seq, n * hd] -> [..., n, seq, hd]"""
    lead = x.shape[:-2]
    split = reshape(x, lead + (x.shape[-2], n_heads, head_dim))
    nd = split.ndim
    return transpose(split, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))


def _merge_heads(x: Tensor) -> Tensor:
    """[..., n, seq, hd] -> [..., seq, n * hd]"""
    nd = x.ndim
    moved = transpose(x, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    return reshape(moved, moved.shape[:-2] + (moved.shape[-2] * moved.shape[-1],))


def attention_shapes(cfg: AttentionConfig, seq_len: Optional[int] = None) -> Dict[str, Tuple[int, ...]]:
    """Projection shapes, plus a per-head relative bias table when ``seq_len`` is given"""
    d, hd = cfg.model_dim, cfg.head_dim
    shapes = {
        'wq': (d, cfg.n_heads * hd),
        'wk': (d, cfg.n_kv_groups * hd),
        'wv': (d, cfg.n_kv_groups * hd),
        'wo': (cfg.n_heads * hd, d),
        'bo': (d,),
    }
    if seq_len is not None:
        shapes['rel_bias'] = (cfg.n_heads, 2 * seq_len - 1)
    return shapes


def relative_offsets(seq_len: int) -> np.ndarray:
    """[seq, seq] table index i - j + seq - 1 of query i and key j"""
    steps = np.arange(seq_len)
    return steps[:, None] - steps[None, :] + seq_len - 1


def relative_bias(table: Tensor, seq_len: int) -> Tensor:
    """Gather a [H, 2 * seq - 1] table into additive scores [H, seq, seq]"""
    if table.shape[-1] != 2 * seq_len - 1:
        raise InvalidArgumentError(
            f"relative bias table covers {(table.shape[-1] + 1) // 2} tokens, sequence has {seq_len}"
        )
    gathered = take(table, relative_offsets(seq_len).ravel(), axis=-1)
    return reshape(gathered, (table.shape[0], seq_len, seq_len))


def _attention(x: Tensor, cfg: AttentionConfig, weights: Weights,
               positions: Optional[Sequence[float]], rope_base: float) -> Tuple[Tensor, Tensor]:
    cfg.check()
    x = as_tensor(x)
    if x.shape[-1] != cfg.model_dim:
        raise InvalidArgumentError(f"attention input {x.shape} does not end in model_dim={cfg.model_dim}")
    hd = cfg.head_dim

    q = _split_heads(linear(x, weights['wq']), cfg.n_heads, hd)
    k = _split_heads(linear(x, weights['wk']), cfg.n_kv_groups, hd)
    v = _split_heads(linear(x, weights['wv']), cfg.n_kv_groups, hd)
    if positions is not None:
        q = rope_apply(q, positions, rope_base)
        k = rope_apply(k, positions, rope_base)

    # Query head h reads key/value group h // (H / G)
    group_of_head = [h // cfg.heads_per_group for h in range(cfg.n_heads)]
    k = take(k, group_of_head, axis=-3)
    v = take(v, group_of_head, axis=-3)

    nd = k.ndim
    k_t = transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    scores = matmul(q, k_t) * (1.0 / math.sqrt(hd))
    if 'rel_bias' in weights:
        scores = scores + relative_bias(weights['rel_bias'], x.shape[-2])
    probs = softmax(scores)
    return matmul(probs, v), probs


def gqa_attention(x: Tensor, cfg: AttentionConfig, weights: Weights,
                  positions: Optional[Sequence[float]] = None,
                  rope_base: float = DEFAULT_ROPE_BASE) -> Tensor:
    """
    Grouped-query self-attention over ``x`` [..., seq, d].

    ``weights`` holds ``wq`` [d, H*hd], ``wk``/``wv`` [d, G*hd], ``wo`` [H*hd, d]
    and an optional ``bo`` [d]. RoPE is applied to queries and keys when
    ``positions`` is given.
    A ``rel_bias`` table [H, 2 * seq - 1] adds a learned score per head and
    query-key offset.
    """
    heads, _ = _attention(x, cfg, weights, positions, rope_base)
    return linear(_merge_heads(heads), weights['wo'], weights.get('bo'))


def attention_probabilities(x: Tensor, cfg: AttentionConfig, weights: Weights,
                            positions: Optional[Sequence[float]] = None,
                            rope_base: float = DEFAULT_ROPE_BASE) -> np.ndarray:
    """Attention matrices [..., H, seq, seq] of ``gqa_attention``"""
    _, probs = _attention(x, cfg, weights, positions, rope_base)
    return probs.data


def feedforward_shapes(d: int, kernel: int) -> Dict[str, Tuple[int, ...]]:
    return {'w1': (d, d, kernel), 'b1': (d,), 'w2': (d, d, 1), 'b2': (d,)}


def feedforward(x: Tensor, weights: Weights) -> Tensor:
    """Length-preserving conv (odd kernel) -> GELU -> pointwise conv"""
    kernel = weights['w1'].shape[2]
    hidden = gelu(conv1d(x, weights['w1'], weights['b1'], stride=1, padding=kernel // 2))
    return conv1d(hidden, weights['w2'], weights['b2'])


def residual_conv_shapes(d: int, kernel: int) -> Dict[str, Tuple[int, ...]]:
    return {'w1': (d, d, kernel), 'b1': (d,), 'w2': (d, d, kernel), 'b2': (d,)}


def residual_conv_block(x: Tensor, weights: Weights) -> Tensor:
    """Two length-preserving convs with a GELU between; the token-mixing branch of a conv encoder"""
    kernel = weights['w1'].shape[2]
    hidden = gelu(conv1d(x, weights['w1'], weights['b1'], stride=1, padding=kernel // 2))
    return conv1d(hidden, weights['w2'], weights['b2'], stride=1, padding=kernel // 2)


def downsample_shapes(d: int) -> Dict[str, Tuple[int, ...]]:
    return {'w': (d, d, 3), 'b': (d,)}


def downsample_block(x: Tensor, weights: Weights) -> Tensor:
    """Stride-2 conv (kernel 3, padding 1) followed by GELU; halves an even sequence"""
    return gelu(conv1d(x, weights['w'], weights['b'], stride=2, padding=1))


def projection_shapes(d: int) -> Dict[str, Tuple[int, ...]]:
    return {
        'w_project': (d, d, 2), 'b_project': (d,),
        'w_back': (d, d, 2), 'b_back': (d,),
        'w_correct': (d, d, 2), 'b_correct': (d,),
    }


def _resample(x: Tensor, weight: Tensor, bias: Tensor, upward: bool) -> Tensor:
    if upward:
        return conv_transpose1d(x, weight, bias, stride=2)
    return conv1d(x, weight, bias, stride=2)


def projection_unit(x: Tensor, direction: str, weights: Weights) -> Tensor:
    """
    Back-projection unit doubling ('up') or halving ('down') the sequence.

    For 'up': h0 = up(x), e = down(h0) - x, out = h0 + GELU(up'(e)), where up is
    a stride-2 transposed conv and down a stride-2 conv, both with kernel 2.
    'down' mirrors the roles. With down(up(x)) = x the correction vanishes.
    """
    if direction not in ('up', 'down'):
        raise InvalidArgumentError(f"projection direction must be 'up' or 'down', got {direction!r}")
    x = as_tensor(x)
    upward = direction == 'up'
    if not upward and x.shape[-2] % 2 != 0:
        raise InvalidArgumentError(f"down projection needs an even sequence, got {x.shape[-2]}")

    h0 = _resample(x, weights['w_project'], weights['b_project'], upward)
    error = _resample(h0, weights['w_back'], weights['b_back'], not upward) - x
    correction = gelu(_resample(error, weights['w_correct'], weights['b_correct'], upward))
    return h0 + correction
