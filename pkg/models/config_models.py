"""
Configuration models: SH fitting, synthesis, attention, the SH transformer and training.
"""

from enum import Enum
from typing import Dict, Optional

from pydantic import BaseModel, ConfigDict, Field

from config.settings import settings
from utils.exceptions import InvalidArgumentError, InvalidConfigError


class SHFitConfig(BaseModel):
    """Order and Tikhonov weight of a spherical-harmonic fit"""
    model_config = ConfigDict(frozen=True, extra='forbid')

    order: int = Field(..., ge=0, description="Maximum SH degree L")
    ridge_lambda: float = Field(default=0.0, ge=0.0, description="Tikhonov weight (dB^2 units)")


def default_fit_config(level: int) -> SHFitConfig:
    """Input SH order and ridge weight used for a sparsity level"""
    if level not in settings.sh.order_by_level:
        raise InvalidArgumentError(f"no default SH order for sparsity level {level}")
    return SHFitConfig(order=settings.sh.order_by_level[level], ridge_lambda=settings.sh.ridge_lambda)


class SynthConfig(BaseModel):
    """Synthetic subject generator settings"""
    model_config = ConfigDict(frozen=True, extra='forbid')

    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    band_limit: int = Field(default=3, ge=1, description="SH band limit of the generated fields")
    n_bins: int = Field(default=16, ge=2, description="Frequency bins W")
    n_az: int = Field(default=16, ge=3)
    n_el: int = Field(default=8, ge=2)
    degree_decay: float = Field(default=2.0, gt=0.0, description="Variance scale 1/(1+l)^decay")
    interaural_asymmetry: float = Field(default=0.3, ge=0.0, le=1.0)
    level_db: float = Field(default=6.0, gt=0.0, description="Standard deviation of degree-0 coefficients in dB")
    sample_rate_hz: float = Field(default=48000.0, gt=0.0)


class AttentionConfig(BaseModel):
    """Grouped-query attention shape"""
    model_config = ConfigDict(frozen=True, extra='forbid', protected_namespaces=())

    model_dim: int = Field(..., ge=1)
    n_heads: int = Field(..., ge=1)
    n_kv_groups: int = Field(..., ge=1)

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads

    @property
    def heads_per_group(self) -> int:
        return self.n_heads // self.n_kv_groups

    def check(self) -> None:
        if self.model_dim % self.n_heads != 0:
            raise InvalidArgumentError(f"n_heads={self.n_heads} must divide model_dim={self.model_dim}")
        if self.n_heads % self.n_kv_groups != 0:
            raise InvalidArgumentError(f"n_kv_groups={self.n_kv_groups} must divide n_heads={self.n_heads}")


class Normalization(str, Enum):
    TOKEN_SCALE = "token_scale"
    LAYER_NORM = "layer_norm"
    BATCH_NORM = "batch_norm"


class PositionEncoding(str, Enum):
    ROPE = "rope"
    RELATIVE_BIAS = "relative_bias"
    NONE = "none"


class EncoderBlock(str, Enum):
    """Token-mixing sublayer of an encoder stage"""
    ATTENTION = "attention"
    CONV = "conv"


def _next_power_of_two(value: int) -> int:
    power = 1
    while power < value:
        power *= 2
    return power


class ModelConfig(BaseModel):
    """SH transformer architecture hyperparameters"""
    model_config = ConfigDict(frozen=True, extra='forbid')

    order_in: int = Field(default=1, ge=0, description="Input SH order L_in")
    order_out: int = Field(default=7, ge=1, description="Output SH order L_out")
    n_bins: int = Field(default=16, ge=2, description="Frequency bins W (token channels)")
    d_model: int = Field(default=32, ge=2)
    n_heads: int = Field(default=4, ge=1)
    n_kv_groups: int = Field(default=2, ge=1)
    encoder_stages: int = Field(default=2, ge=0)
    decoder_stages: int = Field(default=6, ge=0)
    normalization: Normalization = Field(default=Normalization.TOKEN_SCALE)
    position_encoding: PositionEncoding = Field(default=PositionEncoding.ROPE)
    rope_base: float = Field(default=10000.0, gt=1.0)
    token_eps: float = Field(default=1e-5, gt=0.0)
    coeff_scale: float = Field(default=10.0, gt=0.0, description="dB scale dividing inputs and multiplying outputs")
    ff_kernel: int = Field(default=3, ge=1, description="Kernel of the feedforward conv (odd)")
    encoder_block: EncoderBlock = Field(default=EncoderBlock.ATTENTION)
    decoder_attention: bool = Field(default=True, description="Self-attention before each projection unit")

    @property
    def n_tokens_in(self) -> int:
        return (self.order_in + 1) ** 2

    @property
    def padded_len(self) -> int:
        return max(4, _next_power_of_two(self.n_tokens_in))

    @property
    def latent_len(self) -> int:
        return self.padded_len // (2 ** self.encoder_stages)

    @property
    def n_tokens_out(self) -> int:
        return (self.order_out + 1) ** 2

    @property
    def decoded_len(self) -> int:
        return self.latent_len * (2 ** self.decoder_stages)

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(model_dim=self.d_model, n_heads=self.n_heads, n_kv_groups=self.n_kv_groups)

    def validate_invariants(self) -> None:
        """Raise InvalidConfigError naming the first field that breaks an invariant"""
        if self.d_model % self.n_heads != 0:
            raise InvalidConfigError('n_heads', f"{self.n_heads} does not divide d_model={self.d_model}")
        if self.n_heads % self.n_kv_groups != 0:
            raise InvalidConfigError('n_kv_groups', f"{self.n_kv_groups} does not divide n_heads={self.n_heads}")
        if self.position_encoding == PositionEncoding.ROPE and (self.d_model // self.n_heads) % 2 != 0:
            raise InvalidConfigError('d_model', "RoPE needs an even head dimension")
        if self.ff_kernel % 2 != 1:
            raise InvalidConfigError('ff_kernel', "must be odd to keep sequence length")
        if self.padded_len % (2 ** self.encoder_stages) != 0 or self.latent_len < 1:
            raise InvalidConfigError(
                'encoder_stages',
                f"padded input length {self.padded_len} cannot be halved {self.encoder_stages} times"
            )
        if self.decoded_len < self.n_tokens_out:
            raise InvalidConfigError(
                'decoder_stages',
                f"latent_len {self.latent_len} * 2^{self.decoder_stages} = {self.decoded_len} "
                f"< {self.n_tokens_out} output tokens"
            )

    @classmethod
    def desk(cls) -> 'ModelConfig':
        """Small configuration sized for a single CPU"""
        return cls(order_in=1, order_out=7, n_bins=16, d_model=32, n_heads=4, n_kv_groups=2,
                   encoder_stages=2, decoder_stages=6)

    @classmethod
    def for_level(cls, level: int, n_bins: int = 64, order_out: Optional[int] = None) -> 'ModelConfig':
        """Full configuration for a sparsity level"""
        order_in = default_fit_config(level).order
        order_out = settings.sh.order_out if order_out is None else order_out
        encoder_stages = 2
        return cls(order_in=order_in, order_out=order_out, n_bins=n_bins, d_model=128,
                   n_heads=8, n_kv_groups=2, encoder_stages=encoder_stages,
                   decoder_stages=minimal_decoder_stages(order_in, order_out, encoder_stages))


def minimal_decoder_stages(order_in: int, order_out: int, encoder_stages: int) -> int:
    """Fewest decoder stages whose output covers (order_out + 1)^2 tokens"""
    padded = max(4, _next_power_of_two((order_in + 1) ** 2))
    latent = padded // (2 ** encoder_stages)
    if latent < 1:
        raise InvalidConfigError('encoder_stages', f"{encoder_stages} stages leave no latent tokens")
    stages = 0
    while latent * (2 ** stages) < (order_out + 1) ** 2:
        stages += 1
    return stages


class LossWeights(BaseModel):
    """Weights of the training objective terms"""
    model_config = ConfigDict(frozen=True, extra='forbid')

    w_lsd: float = Field(default=1.0, ge=0.0)
    w_ild: float = Field(default=1.0, ge=0.0)
    w_ndl: float = Field(default=1.0, ge=0.0)
    w_mse: float = Field(default=0.0, ge=0.0)

    @classmethod
    def preset(cls, name: str) -> 'LossWeights':
        if name not in LOSS_PRESETS:
            raise InvalidArgumentError(f"unknown loss preset '{name}', choose from {sorted(LOSS_PRESETS)}")
        return cls(**LOSS_PRESETS[name])


LOSS_PRESETS: Dict[str, Dict[str, float]] = {
    'lsd_ild_ndl': {'w_lsd': 1.0, 'w_ild': 1.0, 'w_ndl': 1.0, 'w_mse': 0.0},
    'lsd_ild': {'w_lsd': 1.0, 'w_ild': 1.0, 'w_ndl': 0.0, 'w_mse': 0.0},
    'mse': {'w_lsd': 0.0, 'w_ild': 0.0, 'w_ndl': 0.0, 'w_mse': 1.0},
}


class TrainConfig(BaseModel):
    """Optimizer and loop settings"""
    model_config = ConfigDict(frozen=True, extra='forbid')

    batch_size: int = Field(default=settings.training.batch_size, ge=1)
    lr: float = Field(default=settings.training.learning_rate, ge=0.0)
    epochs: int = Field(default=settings.training.epochs, ge=1)
    adam_beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    seed: int = Field(default=settings.training.seed, ge=0, lt=2 ** 64)
    loss_preset: str = Field(default='lsd_ild_ndl')
    w_lsd: Optional[float] = Field(default=None, ge=0.0)
    w_ild: Optional[float] = Field(default=None, ge=0.0)
    w_ndl: Optional[float] = Field(default=None, ge=0.0)
    w_mse: Optional[float] = Field(default=None, ge=0.0)
    checkpoint_every: int = Field(default=10, ge=1, description="Epochs between periodic checkpoints")
    max_steps: Optional[int] = Field(default=None, ge=1, description="Stop after this many optimizer steps")
    val_fraction: float = Field(default=settings.training.val_fraction, ge=0.0, lt=1.0)
    ridge_lambda: float = Field(default=settings.sh.ridge_lambda, ge=0.0, description="Ridge weight of the input SH fit")

    def loss_weights(self) -> LossWeights:
        base = LossWeights.preset(self.loss_preset).model_dump()
        for key in ('w_lsd', 'w_ild', 'w_ndl', 'w_mse'):
            override = getattr(self, key)
            if override is not None:
                base[key] = override
        return LossWeights(**base)
