"""Model configuration and autoencoder parameter containers."""

import math
from datetime import date
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from numkernel.schemas import Parameter, Tensor


class ModelVariant(str, Enum):
    """Which parts of the joint model are active."""

    full = "full"
    no_triplet = "no_triplet"
    no_autoencoder = "no_autoencoder"
    no_attention = "no_attention"


class ModelConfig(BaseModel):
    """Architecture hyperparameters (the [model] section)."""

    model_config = ConfigDict(extra="forbid")

    series_length: int = Field(default=1440, ge=2)
    kernel_widths: Tuple[int, ...] = (9, 7, 7, 5, 5)
    channels: Tuple[int, ...] = (32, 64, 64, 128, 128)
    embedding_dim: int = Field(default=64, ge=2)
    gate_reduction: int = Field(default=4, ge=1)
    heads: int = Field(default=4, ge=1)
    ff_multiplier: int = Field(default=4, ge=1)
    value_scale: float = Field(default=100.0, gt=0)
    variant: ModelVariant = ModelVariant.full

    @model_validator(mode="after")
    def check_shapes(self) -> "ModelConfig":
        if not self.kernel_widths or len(self.kernel_widths) != len(self.channels):
            raise ValueError("kernel_widths and channels must be non-empty and equally long")
        if any(w < 1 or w % 2 == 0 for w in self.kernel_widths):
            raise ValueError(f"kernel widths must be odd, got {self.kernel_widths}")
        if any(c < 1 for c in self.channels):
            raise ValueError(f"channels must be positive, got {self.channels}")
        if self.series_length % (2 ** len(self.channels)):
            raise ValueError(
                f"series_length {self.series_length} must be divisible by "
                f"2^{len(self.channels)} for {len(self.channels)} pooling stages"
            )
        if self.series_length // 2 ** len(self.channels) < 2:
            raise ValueError("the bottleneck needs at least 2 steps to centre each channel over")
        if self.embedding_dim % 2:
            raise ValueError("embedding_dim must be even for the timing signal")
        if self.embedding_dim % self.heads:
            raise ValueError(
                f"embedding_dim {self.embedding_dim} must divide into {self.heads} heads"
            )
        return self

    @property
    def bottleneck_steps(self) -> int:
        return self.series_length // 2 ** len(self.channels)

    @property
    def bottleneck_size(self) -> int:
        """Flattened width of the last encoder block (45 * 128 by default)."""
        return self.bottleneck_steps * self.channels[-1]

    @property
    def decoder_widths(self) -> Tuple[int, ...]:
        return tuple(reversed(self.kernel_widths))

    @property
    def decoder_channels(self) -> Tuple[int, ...]:
        return tuple(reversed(self.channels))[1:] + (1,)

    def gate_hidden(self, dim: int) -> int:
        return max(1, math.ceil(dim / self.gate_reduction))


class GatingParams(BaseModel):
    """Two bias-free layers of a squeeze-style gate."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    w1: Parameter  # hidden x dim
    w2: Parameter  # dim x hidden

    @model_validator(mode="after")
    def check_shapes(self) -> "GatingParams":
        hidden, dim = self.w1.shape
        if self.w2.shape != (dim, hidden):
            raise ValueError(f"gate w2 must be {(dim, hidden)}, got {self.w2.shape}")
        return self

    @property
    def dim(self) -> int:
        return self.w1.shape[1]

    def named_parameters(self, prefix: str) -> Dict[str, Parameter]:
        return {f"{prefix}.w1": self.w1, f"{prefix}.w2": self.w2}


class ConvBlockParams(BaseModel):
    """Kernels, bias and optional gates of one encoder or decoder block."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    kernels: Parameter  # width x in_ch x out_ch
    bias: Parameter
    channel_gate: Optional[GatingParams] = None
    temporal_gate: Optional[GatingParams] = None

    def named_parameters(self, prefix: str) -> Dict[str, Parameter]:
        named = {f"{prefix}.kernels": self.kernels, f"{prefix}.bias": self.bias}
        if self.channel_gate is not None:
            named.update(self.channel_gate.named_parameters(f"{prefix}.channel_gate"))
        if self.temporal_gate is not None:
            named.update(self.temporal_gate.named_parameters(f"{prefix}.temporal_gate"))
        return named


class EncoderParams(BaseModel):
    """Conv blocks plus the flatten-dense head over the standardised bottleneck."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    blocks: List[ConvBlockParams]
    head_weight: Parameter  # embedding_dim x bottleneck_size
    head_bias: Parameter

    def named_parameters(self, prefix: str = "encoder") -> Dict[str, Parameter]:
        named: Dict[str, Parameter] = {}
        for i, block in enumerate(self.blocks):
            named.update(block.named_parameters(f"{prefix}.block{i}"))
        named[f"{prefix}.head.weight"] = self.head_weight
        named[f"{prefix}.head.bias"] = self.head_bias
        return named


class DecoderParams(BaseModel):
    """Uncompress dense layer plus transposed-conv blocks."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    dense_weight: Parameter  # bottleneck_size x embedding_dim
    dense_bias: Parameter
    blocks: List[ConvBlockParams]

    def named_parameters(self, prefix: str = "decoder") -> Dict[str, Parameter]:
        named = {
            f"{prefix}.dense.weight": self.dense_weight,
            f"{prefix}.dense.bias": self.dense_bias,
        }
        for i, block in enumerate(self.blocks):
            named.update(block.named_parameters(f"{prefix}.block{i}"))
        return named


class DayEmbedding(BaseModel):
    """Encoder output for one user-day."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    vector: np.ndarray
    user_id: str
    date: date


class GateCache(NamedTuple):
    z: Tensor
    hidden_pre: Tensor
    hidden: Tensor
    gate: Tensor


class BlockCache(NamedTuple):
    block_input: Tensor
    conv_pre: Tensor
    activated: Tensor
    channel_cache: Optional[GateCache]
    after_channel: Tensor
    temporal_cache: Optional[GateCache]
    after_temporal: Tensor
    pool_argmax: Optional[np.ndarray]


class EncoderCache(NamedTuple):
    blocks: List[BlockCache]
    normalized: Tensor  # bottleneck after per-channel centring and RMS scaling
    rms: float
    flat: Tensor
    head_pre: Tensor
    embedding: Tensor


class DecoderCache(NamedTuple):
    embedding: Tensor
    dense_pre: Tensor
    dense_out: Tensor
    blocks: List[BlockCache]
    reconstruction: Tensor


def _gate_params(dim: int, config: ModelConfig, rng: np.random.Generator) -> GatingParams:
    hidden = config.gate_hidden(dim)
    return GatingParams(
        w1=Parameter.glorot((hidden, dim), dim, hidden, rng),
        w2=Parameter.glorot((dim, hidden), hidden, dim, rng),
    )


def _conv_block(
    width: int,
    in_ch: int,
    out_ch: int,
    steps: int,
    gated: bool,
    config: ModelConfig,
    rng: np.random.Generator,
) -> ConvBlockParams:
    return ConvBlockParams(
        kernels=Parameter.glorot((width, in_ch, out_ch), width * in_ch, width * out_ch, rng),
        bias=Parameter.zeros(out_ch),
        channel_gate=_gate_params(out_ch, config, rng) if gated else None,
        temporal_gate=_gate_params(steps, config, rng) if gated else None,
    )


def init_encoder(config: ModelConfig, rng: np.random.Generator) -> EncoderParams:
    """Glorot-uniform weights, zero biases."""
    blocks = []
    in_ch, steps = 1, config.series_length
    for width, out_ch in zip(config.kernel_widths, config.channels):
        # gates act before pooling, at the block's input resolution
        blocks.append(_conv_block(width, in_ch, out_ch, steps, True, config, rng))
        in_ch, steps = out_ch, steps // 2
    size, dim = config.bottleneck_size, config.embedding_dim
    return EncoderParams(
        blocks=blocks,
        head_weight=Parameter.glorot((dim, size), size, dim, rng),
        head_bias=Parameter.zeros(dim),
    )


def init_decoder(config: ModelConfig, rng: np.random.Generator) -> DecoderParams:
    """Mirror of the encoder; gates on every block except the last."""
    size, dim = config.bottleneck_size, config.embedding_dim
    dense_weight = Parameter.glorot((size, dim), dim, size, rng)
    blocks = []
    in_ch, steps = config.channels[-1], config.bottleneck_steps
    n_blocks = len(config.decoder_widths)
    for i, (width, out_ch) in enumerate(zip(config.decoder_widths, config.decoder_channels)):
        steps *= 2
        blocks.append(_conv_block(width, in_ch, out_ch, steps, i < n_blocks - 1, config, rng))
        in_ch = out_ch
    return DecoderParams(dense_weight=dense_weight, dense_bias=Parameter.zeros(size), blocks=blocks)
