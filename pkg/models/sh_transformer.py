"""
SH transformer: maps low-order SH coefficients of a sparse measurement to
high-order coefficients with a transformer encoder-decoder.

Tokens are SH coefficients in flat index order (position = l * l + l + m);
each token carries the W frequency bins of one coefficient plus a one-hot ear
channel. Both ears go through the same weights as a batch of two sequences.
"""

import logging
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from config.settings import settings
from models.config_models import EncoderBlock, ModelConfig, PositionEncoding, SHFitConfig
from models.hrtf_models import Ear, HRTFSet, SHCoefficients, SparseMeasurement, SphericalGrid
from nn.layers import (
    attention_shapes,
    downsample_block,
    downsample_shapes,
    feedforward,
    feedforward_shapes,
    gqa_attention,
    linear,
    normalize,
    projection_shapes,
    projection_unit,
    residual_conv_block,
    residual_conv_shapes,
)
from nn.tensor import Tensor, getitem, matmul, transpose
from services.sht_service import design_matrix, fit_sh
from utils.exceptions import InvalidArgumentError
from utils.helpers import counter_generator, name_key

logger = logging.getLogger(__name__)


class ModelWeights(BaseModel):
    """All parameter tensors of one SH transformer, keyed by stable path names"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    config: ModelConfig
    tensors: Dict[str, Tensor] = Field(default_factory=dict)
    seed: int = Field(default=0, ge=0)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> List[str]:
        return list(self.tensors)

    def parameters(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self.tensors.items())

    @property
    def n_parameters(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def group(self, prefix: str) -> Dict[str, Tensor]:
        """Tensors under ``prefix.`` with the prefix stripped"""
        start = prefix + '.'
        return {name[len(start):]: t for name, t in self.tensors.items() if name.startswith(start)}

    def zero_grad(self) -> None:
        for tensor in self.tensors.values():
            tensor.zero_grad()

    def detached(self) -> 'ModelWeights':
        """Copy without gradient tracking, for inference"""
        return ModelWeights(config=self.config, seed=self.seed,
                            tensors={name: t.detach() for name, t in self.tensors.items()})

    def trainable(self) -> 'ModelWeights':
        """Copy whose tensors are gradient-tracking leaves"""
        return ModelWeights(config=self.config, seed=self.seed,
                            tensors={name: Tensor(t.data.copy(), requires_grad=True, name=name)
                                     for name, t in self.tensors.items()})


# Parameter kinds decide the fan computation of the initializer
_LINEAR, _CONV, _CONV_T, _BIAS = 'linear', 'conv', 'conv_transpose', 'bias'


def parameter_specs(cfg: ModelConfig) -> Dict[str, Tuple[Tuple[int, ...], str]]:
    """Ordered map name -> (shape, kind); a pure function of the config"""
    d, w = cfg.d_model, cfg.n_bins
    specs: Dict[str, Tuple[Tuple[int, ...], str]] = {
        'embed.w': ((w + 2, d), _LINEAR),
        'embed.b': ((d,), _BIAS),
    }

    relative = cfg.position_encoding == PositionEncoding.RELATIVE_BIAS

    def add_attention(prefix: str, seq_len: int) -> None:
        for role, shape in attention_shapes(cfg.attention, seq_len if relative else None).items():
            # rel_bias starts at zero like the biases
            kind = _BIAS if len(shape) == 1 or role == 'rel_bias' else _LINEAR
            specs[f'{prefix}.attn.{role}'] = (shape, kind)

    for stage in range(cfg.encoder_stages):
        prefix = f'encoder.{stage}'
        if cfg.encoder_block == EncoderBlock.CONV:
            for role, shape in residual_conv_shapes(d, cfg.ff_kernel).items():
                specs[f'{prefix}.conv.{role}'] = (shape, _BIAS if len(shape) == 1 else _CONV)
        else:
            add_attention(prefix, cfg.padded_len // (2 ** stage))
        for role, shape in feedforward_shapes(d, cfg.ff_kernel).items():
            specs[f'{prefix}.ff.{role}'] = (shape, _BIAS if len(shape) == 1 else _CONV)
        for role, shape in downsample_shapes(d).items():
            specs[f'{prefix}.down.{role}'] = (shape, _BIAS if len(shape) == 1 else _CONV)

    for stage in range(cfg.decoder_stages):
        prefix = f'decoder.{stage}'
        if cfg.decoder_attention:
            add_attention(prefix, cfg.latent_len * (2 ** stage))
        for role, shape in projection_shapes(d).items():
            kind = _BIAS if len(shape) == 1 else (_CONV if role == 'w_back' else _CONV_T)
            specs[f'{prefix}.project.{role}'] = (shape, kind)

    specs['head.w'] = ((d, w), _LINEAR)
    specs['head.b'] = ((w,), _BIAS)
    return specs


def _fans(shape: Tuple[int, ...], kind: str) -> Tuple[int, int]:
    if kind == _LINEAR:
        return shape[0], shape[1]
    if kind == _CONV:
        c_out, c_in, k = shape
    else:
        c_in, c_out, k = shape
    return c_in * k, c_out * k


def build(cfg: ModelConfig, seed: int = 0) -> ModelWeights:
    """
    Deterministic initialization: weights ~ Normal(0, 2 / (fan_in + fan_out)),
    biases 0. Each tensor draws from its own counter stream keyed by its name.
    """
    cfg.validate_invariants()
    tensors: Dict[str, Tensor] = {}
    for name, (shape, kind) in parameter_specs(cfg).items():
        if kind == _BIAS:
            data = np.zeros(shape)
        else:
            fan_in, fan_out = _fans(shape, kind)
            std = np.sqrt(2.0 / (fan_in + fan_out))
            data = counter_generator(seed, name_key(name)).standard_normal(shape) * std
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    weights = ModelWeights(config=cfg, tensors=tensors, seed=seed)
    logger.debug(f"Built SH transformer with {weights.n_parameters} parameters (seed {seed})")
    return weights


def _positions(cfg: ModelConfig, length: int) -> Optional[np.ndarray]:
    """RoPE positions 0..length-1; None when the config does not rotate"""
    if cfg.position_encoding != PositionEncoding.ROPE:
        return None
    return np.arange(length, dtype=np.float64)


def input_tokens(cfg: ModelConfig, coeffs_in: SHCoefficients, ears=(Ear.LEFT, Ear.RIGHT)) -> np.ndarray:
    """Token array [len(ears), padded_len, W + 2]: scaled coefficients plus one-hot ear"""
    if coeffs_in.order_max != cfg.order_in:
        raise InvalidArgumentError(
            f"model expects input SH order {cfg.order_in}, got {coeffs_in.order_max}"
        )
    if coeffs_in.n_bins != cfg.n_bins:
        raise InvalidArgumentError(f"model expects {cfg.n_bins} bins, got {coeffs_in.n_bins}")
    tokens = np.zeros((len(ears), cfg.padded_len, cfg.n_bins + 2), dtype=np.float64)
    for row, ear in enumerate(ears):
        ear = Ear(ear)
        tokens[row, :cfg.n_tokens_in, :cfg.n_bins] = coeffs_in.values[ear.value].T / cfg.coeff_scale
        tokens[row, :cfg.n_tokens_in, cfg.n_bins + ear.value] = 1.0
    return tokens


def encoder_block(weights: ModelWeights, stage: int, x: Tensor,
                  positions: Optional[Sequence[float]] = None) -> Tensor:
    """
    Residual sublayers of one encoder stage, before its downsampling:
    x + mix(norm(x)), then x + ff(norm(x)). ``mix`` is attention or a
    residual conv pair depending on ``encoder_block``.

    ``positions`` overrides the RoPE positions 0..seq-1; token i is rotated by
    ``positions[i]``.
    """
    cfg = weights.config
    prefix = f'encoder.{stage}'
    if positions is not None and cfg.position_encoding != PositionEncoding.ROPE:
        raise InvalidArgumentError(f"explicit positions need RoPE, config uses {cfg.position_encoding.value}")
    if cfg.encoder_block == EncoderBlock.CONV:
        x = x + residual_conv_block(normalize(x, cfg.normalization, cfg.token_eps), weights.group(f'{prefix}.conv'))
    else:
        if positions is None:
            positions = _positions(cfg, x.shape[-2])
        elif len(positions) != x.shape[-2]:
            raise InvalidArgumentError(f"got {len(positions)} positions for {x.shape[-2]} tokens")
        x = x + gqa_attention(normalize(x, cfg.normalization, cfg.token_eps), cfg.attention,
                              weights.group(f'{prefix}.attn'), positions, cfg.rope_base)
    return x + feedforward(normalize(x, cfg.normalization, cfg.token_eps), weights.group(f'{prefix}.ff'))


def encode_tokens(weights: ModelWeights, tokens, positions: Optional[Sequence[float]] = None) -> Tensor:
    """
    Encoder on token tensors [..., padded_len, W + 2] -> [..., latent_len, d].
    ``positions`` applies to the first stage only; later stages see the downsampled order.
    """
    cfg = weights.config
    x = linear(tokens, weights['embed.w'], weights['embed.b'])
    for stage in range(cfg.encoder_stages):
        x = encoder_block(weights, stage, x, positions if stage == 0 else None)
        x = downsample_block(x, weights.group(f'encoder.{stage}.down'))
    return x


def encode(weights: ModelWeights, coeffs_in: SHCoefficients, ear: Ear) -> Tensor:
    """Latent [latent_len, d_model] of one ear"""
    tokens = input_tokens(weights.config, coeffs_in, ears=(ear,))
    return getitem(encode_tokens(weights, tokens), 0)


def decode_tensor(weights: ModelWeights, z: Tensor) -> Tensor:
    """Decoder on latents [..., latent_len, d] -> dB coefficients [..., (L_out+1)^2, W]"""
    cfg = weights.config
    if z.ndim < 2 or z.shape[-2:] != (cfg.latent_len, cfg.d_model):
        raise InvalidArgumentError(
            f"latent shape {z.shape} does not end in ({cfg.latent_len}, {cfg.d_model})"
        )
    x = z
    for stage in range(cfg.decoder_stages):
        prefix = f'decoder.{stage}'
        if cfg.decoder_attention:
            x = x + gqa_attention(normalize(x, cfg.normalization, cfg.token_eps), cfg.attention,
                                  weights.group(f'{prefix}.attn'), _positions(cfg, x.shape[-2]), cfg.rope_base)
        x = projection_unit(x, 'up', weights.group(f'{prefix}.project'))
    x = getitem(x, (Ellipsis, slice(0, cfg.n_tokens_out), slice(None)))
    return linear(x, weights['head.w'], weights['head.b']) * cfg.coeff_scale


def decode(weights: ModelWeights, z: Tensor, sample_rate_hz: float = 48000.0) -> SHCoefficients:
    """SH coefficients of order L_out from the stacked latents [2, latent_len, d] of both ears"""
    if z.ndim != 3 or z.shape[0] != 2:
        raise InvalidArgumentError(f"decode needs latents of both ears stacked as [2, ...], got {z.shape}")
    coeffs = decode_tensor(weights, z)
    values = np.swapaxes(coeffs.data, 1, 2)
    return SHCoefficients(order_max=weights.config.order_out, values=values, sample_rate_hz=sample_rate_hz)


def forward_coefficients(weights: ModelWeights, coeffs_in: SHCoefficients) -> Tensor:
    """dB coefficients [2, (L_out+1)^2, W] for both ears"""
    return decode_tensor(weights, encode_tokens(weights, input_tokens(weights.config, coeffs_in)))


def forward_field(weights: ModelWeights, coeffs_in: SHCoefficients, target_basis: np.ndarray) -> Tensor:
    """Differentiable dB field [N, 2, W] on the directions whose basis rows are ``target_basis``"""
    cfg = weights.config
    if target_basis.shape[1] != cfg.n_tokens_out:
        raise InvalidArgumentError(
            f"target basis has {target_basis.shape[1]} columns, model emits {cfg.n_tokens_out} coefficients"
        )
    coeffs = forward_coefficients(weights, coeffs_in)
    field = matmul(target_basis, coeffs)
    return transpose(field, (1, 0, 2))


def input_fit_config(cfg: ModelConfig, ridge_lambda: Optional[float] = None) -> SHFitConfig:
    ridge = settings.sh.ridge_lambda if ridge_lambda is None else ridge_lambda
    return SHFitConfig(order=cfg.order_in, ridge_lambda=ridge)


def upsample(weights: ModelWeights, sparse: SparseMeasurement, target: SphericalGrid,
             fit_cfg: Optional[SHFitConfig] = None) -> HRTFSet:
    """Fit the sparse set, run the model without gradient tracking, synthesize on ``target``"""
    cfg = weights.config
    fit_cfg = fit_cfg or input_fit_config(cfg)
    if fit_cfg.order != cfg.order_in:
        raise InvalidArgumentError(f"fit order {fit_cfg.order} differs from model input order {cfg.order_in}")
    frozen = weights.detached()
    coeffs_in = fit_sh(sparse, fit_cfg)
    field_db = forward_field(frozen, coeffs_in, design_matrix(target, cfg.order_out)).data
    return HRTFSet(grid=target, sample_rate_hz=sparse.sample_rate_hz, magnitudes=10.0 ** (field_db / 20.0))
