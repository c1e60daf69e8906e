"""Timing signal, multi-head attention blocks and temporal attention pooling."""

import math
from datetime import date
from typing import List, Sequence, Tuple

import numpy as np

from errors import ShapeError
from aggregator.schemas import (
    AggregatedEmbedding,
    AggregatorCache,
    AggregatorParams,
    AttentionBlockCache,
    AttentionBlockParams,
    HeadCache,
    PoolCache,
    TemporalAttentionParams,
)
from encoder.schemas import DayEmbedding
from numkernel.schemas import ActivationKind, Tensor
from numkernel.service import (
    activation,
    activation_backward,
    dense,
    dense_backward,
    softmax_axis,
    softmax_axis_backward,
)

RELU = ActivationKind.relu
TANH = ActivationKind.tanh
TIMESCALE = 10000.0


def relative_day_offsets(dates: Sequence[date]) -> List[int]:
    """Whole days between each date and the latest one."""
    if not dates:
        raise ShapeError("relative_day_offsets: need at least one date")
    latest = max(dates)
    return [(latest - d).days for d in dates]


def timing_signal_embedding(t: int, d_e: int) -> Tensor:
    """Fixed sinusoid: even slots sin(t / 10000^(2i/d_e)), odd slots the cosine."""
    if d_e % 2:
        raise ShapeError(f"timing signal needs an even dimension, got {d_e}")
    i = np.arange(d_e // 2)
    angles = t / np.power(TIMESCALE, 2.0 * i / d_e)
    out = np.empty(d_e)
    out[0::2] = np.sin(angles)
    out[1::2] = np.cos(angles)
    return out


def timing_signals(offsets: Sequence[int], d_e: int) -> Tensor:
    return np.stack([timing_signal_embedding(t, d_e) for t in offsets])


# --------------------
# Multi-head attention block
# --------------------
def attention_block_forward(
    h: Tensor, params: AttentionBlockParams
) -> Tuple[Tensor, AttentionBlockCache]:
    if h.ndim != 2 or h.shape[0] < 1 or h.shape[1] != params.wc.shape[0]:
        raise ShapeError(
            f"attention block: expected T x {params.wc.shape[0]} input, got {h.shape}"
        )
    scale = 1.0 / math.sqrt(params.head_dim)
    heads = []
    outputs = []
    for w1, w2, w3 in zip(params.w1, params.w2, params.w3):
        query, key, value = dense(h, w1), dense(h, w2), dense(h, w3)
        attention = softmax_axis(query @ key.T * scale, axis=1)  # over keys
        heads.append(HeadCache(query, key, value, attention))
        outputs.append(attention @ value)
    concat = np.concatenate(outputs, axis=1)
    mixed = dense(concat, params.wc)
    ffn_pre = dense(mixed, params.w1f, params.b1f)
    ffn_hidden = activation(ffn_pre, RELU)
    out = dense(ffn_hidden, params.w2f, params.b2f)
    return out, AttentionBlockCache(h, heads, concat, mixed, ffn_pre, ffn_hidden)


def attention_block_backward(
    grad: Tensor, params: AttentionBlockParams, cache: AttentionBlockCache
) -> Tensor:
    scale = 1.0 / math.sqrt(params.head_dim)
    grad = dense_backward(grad, cache.ffn_hidden, params.w2f, params.b2f)
    grad = activation_backward(grad, cache.ffn_pre, cache.ffn_hidden, RELU)
    grad = dense_backward(grad, cache.mixed, params.w1f, params.b1f)
    grad_concat = dense_backward(grad, cache.concat, params.wc)

    h = cache.block_input
    grad_h = np.zeros_like(h)
    d_q = params.head_dim
    for q, head in enumerate(cache.heads):
        grad_out = grad_concat[:, q * d_q : (q + 1) * d_q]
        grad_attention = grad_out @ head.value.T
        grad_value = head.attention.T @ grad_out
        grad_scores = softmax_axis_backward(grad_attention, head.attention, axis=1) * scale
        grad_query = grad_scores @ head.key
        grad_key = grad_scores.T @ head.query
        grad_h += dense_backward(grad_query, h, params.w1[q])
        grad_h += dense_backward(grad_key, h, params.w2[q])
        grad_h += dense_backward(grad_value, h, params.w3[q])
    return grad_h


def multi_head_attention_block(h: Tensor, params: AttentionBlockParams) -> Tensor:
    """Cross-time attention per head, head mixing, then a relu feed-forward per position."""
    return attention_block_forward(h, params)[0]


# --------------------
# Temporal attention pooling
# --------------------
def pool_forward(
    hf: Tensor, g: Tensor, params: TemporalAttentionParams
) -> Tuple[Tensor, PoolCache]:
    if hf.shape != g.shape:
        raise ShapeError(f"temporal pool: transformed {hf.shape} and days {g.shape} differ")
    scores_pre = dense(hf, params.wa, params.ba)
    scores_tanh = activation(scores_pre, TANH)
    weights = softmax_axis(scores_tanh @ params.context.value, axis=0)
    return weights @ g, PoolCache(hf, g, scores_pre, scores_tanh, weights)


def pool_backward(
    grad: Tensor, params: TemporalAttentionParams, cache: PoolCache
) -> Tuple[Tensor, Tensor]:
    """Gradients wrt (transformed, days)."""
    grad_days = np.outer(cache.weights, grad)
    grad_weights = cache.days @ grad
    grad_scores = softmax_axis_backward(grad_weights, cache.weights, axis=0)
    params.context.gradient += cache.scores_tanh.T @ grad_scores
    grad_tanh = np.outer(grad_scores, params.context.value)
    grad_pre = activation_backward(grad_tanh, cache.scores_pre, cache.scores_tanh, TANH)
    grad_transformed = dense_backward(grad_pre, cache.transformed, params.wa, params.ba)
    return grad_transformed, grad_days


def temporal_attention_pool(
    hf: Tensor, g: Tensor, params: TemporalAttentionParams
) -> AggregatedEmbedding:
    """Weights from the transformed rows, applied to the raw day embeddings."""
    vector, cache = pool_forward(hf, g, params)
    return AggregatedEmbedding(vector=vector, attention_weights=cache.weights)


# --------------------
# Whole network
# --------------------
def aggregate_forward(
    g: Tensor, offsets: Sequence[int], params: AggregatorParams, use_attention: bool = True
) -> Tuple[AggregatedEmbedding, AggregatorCache]:
    """Aggregate a T x d_e stack of day embeddings with their day offsets."""
    if g.ndim != 2 or g.shape[0] < 1:
        raise ShapeError(f"aggregate: need a non-empty T x d_e stack, got {g.shape}")
    if len(offsets) != g.shape[0]:
        raise ShapeError(f"aggregate: {len(offsets)} offsets for {g.shape[0]} days")
    h = g + timing_signals(offsets, g.shape[1])
    block_caches = []
    if use_attention:
        for block in params.blocks:
            h, cache = attention_block_forward(h, block)
            block_caches.append(cache)
    vector, pool_cache = pool_forward(h, g, params.pool)
    aggregated = AggregatedEmbedding(vector=vector, attention_weights=pool_cache.weights)
    return aggregated, AggregatorCache(block_caches, pool_cache)


def aggregate_backward(grad: Tensor, params: AggregatorParams, cache: AggregatorCache) -> Tensor:
    """Gradient wrt the day-embedding stack, through both the pool and the blocks."""
    grad_h, grad_g = pool_backward(grad, params.pool, cache.pool)
    for block, block_cache in zip(
        reversed(params.blocks[: len(cache.blocks)]), reversed(cache.blocks)
    ):
        grad_h = attention_block_backward(grad_h, block, block_cache)
    return grad_g + grad_h


def aggregate_embeddings(
    days: Sequence[Tuple[DayEmbedding, date]],
    params: AggregatorParams,
    use_attention: bool = True,
) -> AggregatedEmbedding:
    """One vector summarising a set of dated day embeddings."""
    if not days:
        raise ShapeError("aggregate_embeddings: need at least one day")
    g = np.stack([embedding.vector for embedding, _ in days])
    offsets = relative_day_offsets([day for _, day in days])
    return aggregate_forward(g, offsets, params, use_attention)[0]
