"""Gated convolutional autoencoder over day-long series.

Every ``*_forward`` returns its output together with a cache; the matching
``*_backward`` consumes the cache, accumulates parameter gradients and returns
the gradient with respect to the forward input.
"""

import logging
from typing import NamedTuple, Optional, Tuple

import numpy as np

from errors import ShapeError
from datapipe.schemas import DayLongSeries
from encoder.schemas import (
    BlockCache,
    ConvBlockParams,
    DayEmbedding,
    DecoderCache,
    DecoderParams,
    EncoderCache,
    EncoderParams,
    GateCache,
    GatingParams,
    ModelConfig,
)
from numkernel.schemas import ActivationKind, Tensor
from numkernel.service import (
    activation,
    activation_backward,
    conv1d,
    conv1d_backward,
    dense,
    dense_backward,
    maxpool1d,
    maxpool1d_backward,
    reduce_mean_axis,
    reduce_mean_axis_backward,
    transposed_conv1d,
    transposed_conv1d_backward,
)

logger = logging.getLogger(__name__)

RELU = ActivationKind.relu
SIGMOID = ActivationKind.sigmoid
TANH = ActivationKind.tanh

CHANNEL_AXIS = 0  # channel gate pools over steps
TEMPORAL_AXIS = 1  # temporal gate pools over channels

# far below the squared scale of any live bottleneck; keeps an all-zero map at zero
NORM_EPS = 1e-24


# --------------------
# Gates
# --------------------
def gate_forward(v: Tensor, params: GatingParams, axis: int) -> Tuple[Tensor, GateCache]:
    """Squeeze over ``axis``, excite through two bias-free layers, rescale ``v``."""
    z = reduce_mean_axis(v, axis)
    if z.shape[0] != params.dim:
        raise ShapeError(
            f"gate: pooled length {z.shape[0]} does not match gate dimension {params.dim} "
            f"(input shape {v.shape}, pooled axis {axis})"
        )
    hidden_pre = dense(z, params.w1)
    hidden = activation(hidden_pre, RELU)
    gate = activation(dense(hidden, params.w2), SIGMOID)
    return v * np.expand_dims(gate, axis), GateCache(z, hidden_pre, hidden, gate)


def gate_backward(
    grad: Tensor, v: Tensor, params: GatingParams, cache: GateCache, axis: int
) -> Tensor:
    grad_v = grad * np.expand_dims(cache.gate, axis)
    grad_gate = (grad * v).sum(axis=axis)
    grad_logits = activation_backward(grad_gate, None, cache.gate, SIGMOID)
    grad_hidden = dense_backward(grad_logits, cache.hidden, params.w2)
    grad_hidden_pre = activation_backward(grad_hidden, cache.hidden_pre, cache.hidden, RELU)
    grad_z = dense_backward(grad_hidden_pre, cache.z, params.w1)
    return grad_v + reduce_mean_axis_backward(grad_z, v.shape, axis)


def channel_gate(v: Tensor, params: GatingParams) -> Tensor:
    """out[s, c] = v[s, c] * a[c], a from the per-channel mean over steps."""
    return gate_forward(v, params, CHANNEL_AXIS)[0]


def temporal_gate(v: Tensor, params: GatingParams) -> Tensor:
    """out[s, c] = v[s, c] * a[s], a from the per-step mean over channels."""
    return gate_forward(v, params, TEMPORAL_AXIS)[0]


# --------------------
# Blocks
# --------------------
def _block_forward(
    h: Tensor, block: ConvBlockParams, transposed: bool, pool: bool
) -> Tuple[Tensor, BlockCache]:
    if transposed:
        conv_pre = transposed_conv1d(h, block.kernels, block.bias)
    else:
        conv_pre = conv1d(h, block.kernels, block.bias)
    activated = activation(conv_pre, RELU)

    after_channel, channel_cache = activated, None
    if block.channel_gate is not None:
        after_channel, channel_cache = gate_forward(activated, block.channel_gate, CHANNEL_AXIS)
    after_temporal, temporal_cache = after_channel, None
    if block.temporal_gate is not None:
        after_temporal, temporal_cache = gate_forward(
            after_channel, block.temporal_gate, TEMPORAL_AXIS
        )

    out, argmax = after_temporal, None
    if pool:
        out, argmax = maxpool1d(after_temporal)
    cache = BlockCache(
        h, conv_pre, activated, channel_cache, after_channel, temporal_cache, after_temporal, argmax
    )
    return out, cache


def _block_backward(
    grad: Tensor, block: ConvBlockParams, cache: BlockCache, transposed: bool
) -> Tensor:
    if cache.pool_argmax is not None:
        grad = maxpool1d_backward(grad, cache.pool_argmax)
    if cache.temporal_cache is not None:
        grad = gate_backward(
            grad, cache.after_channel, block.temporal_gate, cache.temporal_cache, TEMPORAL_AXIS
        )
    if cache.channel_cache is not None:
        grad = gate_backward(
            grad, cache.activated, block.channel_gate, cache.channel_cache, CHANNEL_AXIS
        )
    grad = activation_backward(grad, cache.conv_pre, cache.activated, RELU)
    if transposed:
        return transposed_conv1d_backward(grad, cache.block_input, block.kernels, block.bias)
    return conv1d_backward(grad, cache.block_input, block.kernels, block.bias)


# --------------------
# Bottleneck standardisation
# --------------------
def bottleneck_norm(h: Tensor) -> Tuple[Tensor, float]:
    """Centre every channel over steps, then scale the whole map to unit RMS.

    The pooled ReLU map is non-negative with a per-channel level shared by all
    days; the head only sees the within-day pattern, at a fixed scale.
    """
    centred = h - h.mean(axis=0, keepdims=True)
    rms = float(np.sqrt(np.mean(centred * centred) + NORM_EPS))
    return centred / rms, rms


def bottleneck_norm_backward(grad: Tensor, normalized: Tensor, rms: float) -> Tensor:
    grad_centred = (grad - normalized * np.mean(grad * normalized)) / rms
    return grad_centred - grad_centred.mean(axis=0, keepdims=True)


# --------------------
# Encoder / decoder
# --------------------
def encoder_forward(x: Tensor, params: EncoderParams) -> Tuple[Tensor, EncoderCache]:
    """Scaled, masked day vector -> embedding in [-1, 1]."""
    if x.ndim != 1:
        raise ShapeError(f"encoder: input must be a single series, got shape {x.shape}")
    h = x[:, None]
    caches = []
    for block in params.blocks:
        h, cache = _block_forward(h, block, transposed=False, pool=True)
        caches.append(cache)
    normalized, rms = bottleneck_norm(h)
    flat = normalized.reshape(-1)
    head_pre = dense(flat, params.head_weight, params.head_bias)
    embedding = activation(head_pre, TANH)
    return embedding, EncoderCache(caches, normalized, rms, flat, head_pre, embedding)


def encoder_backward(grad: Tensor, params: EncoderParams, cache: EncoderCache) -> Tensor:
    grad = activation_backward(grad, cache.head_pre, cache.embedding, TANH)
    grad = dense_backward(grad, cache.flat, params.head_weight, params.head_bias)
    grad = bottleneck_norm_backward(grad.reshape(cache.normalized.shape), cache.normalized, cache.rms)
    for block, block_cache in zip(reversed(params.blocks), reversed(cache.blocks)):
        grad = _block_backward(grad, block, block_cache, transposed=False)
    return grad[:, 0]


def decoder_forward(embedding: Tensor, params: DecoderParams) -> Tuple[Tensor, DecoderCache]:
    dense_pre = dense(embedding, params.dense_weight, params.dense_bias)
    dense_out = activation(dense_pre, TANH)
    in_ch = params.blocks[0].kernels.shape[1]
    h = dense_out.reshape(-1, in_ch)
    caches = []
    for block in params.blocks:
        h, cache = _block_forward(h, block, transposed=True, pool=False)
        caches.append(cache)
    reconstruction = h[:, 0]
    return reconstruction, DecoderCache(embedding, dense_pre, dense_out, caches, reconstruction)


def decoder_backward(grad: Tensor, params: DecoderParams, cache: DecoderCache) -> Tensor:
    grad = grad[:, None]
    for block, block_cache in zip(reversed(params.blocks), reversed(cache.blocks)):
        grad = _block_backward(grad, block, block_cache, transposed=True)
    grad = activation_backward(grad.reshape(-1), cache.dense_pre, cache.dense_out, TANH)
    return dense_backward(grad, cache.embedding, params.dense_weight, params.dense_bias)


# --------------------
# Loss
# --------------------
def masked_reconstruction_loss(
    values: Tensor, mask: Tensor, reconstruction: Tensor
) -> Tuple[float, Tensor]:
    """Summed squared error over measured slots and its gradient wrt the reconstruction."""
    if not values.shape == mask.shape == reconstruction.shape:
        raise ShapeError(
            f"reconstruction loss: shapes differ {values.shape}, {mask.shape}, "
            f"{reconstruction.shape}"
        )
    residual = mask * (reconstruction - mask * values)
    return float(np.sum(residual * residual)), 2.0 * residual


def scaled_input(values: Tensor, mask: Tensor, config: ModelConfig) -> Tensor:
    """Encoder input: measured values in units of ``value_scale``; masked slots 0."""
    if values.shape != (config.series_length,):
        raise ShapeError(
            f"expected a {config.series_length}-slot series, got shape {values.shape}"
        )
    return (mask * values) / config.value_scale


# --------------------
# Day-level passes
# --------------------
class DayPass(NamedTuple):
    embedding: Tensor
    loss: float
    encoder_cache: EncoderCache
    decoder_cache: Optional[DecoderCache]
    loss_gradient: Optional[Tensor]


def day_forward(
    values: Tensor,
    mask: Tensor,
    encoder: EncoderParams,
    decoder: Optional[DecoderParams],
    config: ModelConfig,
) -> DayPass:
    """Encode one day and, when a decoder is given, score its reconstruction."""
    x = scaled_input(values, mask, config)
    embedding, encoder_cache = encoder_forward(x, encoder)
    if decoder is None:
        return DayPass(embedding, 0.0, encoder_cache, None, None)
    reconstruction, decoder_cache = decoder_forward(embedding, decoder)
    loss, loss_gradient = masked_reconstruction_loss(x, mask, reconstruction)
    return DayPass(embedding, loss, encoder_cache, decoder_cache, loss_gradient)


def day_backward(
    day: DayPass,
    encoder: EncoderParams,
    decoder: Optional[DecoderParams],
    grad_embedding: Optional[Tensor],
    loss_weight: float,
) -> None:
    """Accumulate gradients of ``loss_weight * loss + <grad_embedding, embedding>``."""
    grad = np.zeros_like(day.embedding) if grad_embedding is None else grad_embedding.copy()
    if decoder is not None and day.decoder_cache is not None and loss_weight != 0.0:
        grad += decoder_backward(loss_weight * day.loss_gradient, decoder, day.decoder_cache)
    encoder_backward(grad, encoder, day.encoder_cache)


def encode_day(
    series: DayLongSeries, params: EncoderParams, config: ModelConfig
) -> DayEmbedding:
    """Embedding of one day-long series."""
    x = scaled_input(series.values, series.mask, config)
    vector, _ = encoder_forward(x, params)
    return DayEmbedding(vector=vector, user_id=series.user_id, date=series.date)


def decode_day(embedding: DayEmbedding, params: DecoderParams) -> Tensor:
    """Reconstruction in the encoder's input units."""
    return decoder_forward(embedding.vector, params)[0]
