"""Parameters and outputs of the temporal pattern aggregation network."""

from typing import Dict, List, NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from encoder.schemas import ModelConfig
from numkernel.schemas import Parameter, Tensor

ATTENTION_BLOCKS = 2


class AttentionBlockParams(BaseModel):
    """Per-head projections, cross-head mixing and the position-wise feed-forward."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    w1: List[Parameter]  # queries, one d_q x d_e per head
    w2: List[Parameter]  # keys
    w3: List[Parameter]  # values
    wc: Parameter  # d_e x d_e
    w1f: Parameter  # d_f x d_e
    b1f: Parameter
    w2f: Parameter  # d_e x d_f
    b2f: Parameter

    @model_validator(mode="after")
    def check_heads(self) -> "AttentionBlockParams":
        if not self.w1 or not len(self.w1) == len(self.w2) == len(self.w3):
            raise ValueError("attention block needs the same non-zero number of q/k/v heads")
        d_e = self.wc.shape[0]
        d_q = self.w1[0].shape[0]
        if d_q * len(self.w1) != d_e:
            raise ValueError(f"{len(self.w1)} heads of width {d_q} do not tile d_e={d_e}")
        return self

    @property
    def heads(self) -> int:
        return len(self.w1)

    @property
    def head_dim(self) -> int:
        return self.w1[0].shape[0]

    def named_parameters(self, prefix: str) -> Dict[str, Parameter]:
        named: Dict[str, Parameter] = {}
        for q in range(self.heads):
            named[f"{prefix}.head{q}.w1"] = self.w1[q]
            named[f"{prefix}.head{q}.w2"] = self.w2[q]
            named[f"{prefix}.head{q}.w3"] = self.w3[q]
        named[f"{prefix}.wc"] = self.wc
        named[f"{prefix}.ffn.w1"] = self.w1f
        named[f"{prefix}.ffn.b1"] = self.b1f
        named[f"{prefix}.ffn.w2"] = self.w2f
        named[f"{prefix}.ffn.b2"] = self.b2f
        return named


class TemporalAttentionParams(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    wa: Parameter  # d_a x d_e
    ba: Parameter
    context: Parameter  # d_a

    def named_parameters(self, prefix: str) -> Dict[str, Parameter]:
        return {
            f"{prefix}.wa": self.wa,
            f"{prefix}.ba": self.ba,
            f"{prefix}.context": self.context,
        }


class AggregatorParams(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    blocks: List[AttentionBlockParams]
    pool: TemporalAttentionParams

    def named_parameters(self, prefix: str = "aggregator") -> Dict[str, Parameter]:
        named: Dict[str, Parameter] = {}
        for i, block in enumerate(self.blocks):
            named.update(block.named_parameters(f"{prefix}.block{i}"))
        named.update(self.pool.named_parameters(f"{prefix}.pool"))
        return named


class AggregatedEmbedding(BaseModel):
    """Attention-weighted sum of day embeddings."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    vector: np.ndarray
    attention_weights: np.ndarray


class HeadCache(NamedTuple):
    query: Tensor
    key: Tensor
    value: Tensor
    attention: Tensor


class AttentionBlockCache(NamedTuple):
    block_input: Tensor
    heads: List[HeadCache]
    concat: Tensor
    mixed: Tensor
    ffn_pre: Tensor
    ffn_hidden: Tensor


class PoolCache(NamedTuple):
    transformed: Tensor
    days: Tensor
    scores_pre: Tensor
    scores_tanh: Tensor
    weights: Tensor


class AggregatorCache(NamedTuple):
    blocks: List[AttentionBlockCache]
    pool: PoolCache


def init_attention_block(config: ModelConfig, rng: np.random.Generator) -> AttentionBlockParams:
    d_e = config.embedding_dim
    d_q = d_e // config.heads
    d_f = config.ff_multiplier * d_e

    def head() -> Parameter:
        return Parameter.glorot((d_q, d_e), d_e, d_q, rng)

    return AttentionBlockParams(
        w1=[head() for _ in range(config.heads)],
        w2=[head() for _ in range(config.heads)],
        w3=[head() for _ in range(config.heads)],
        wc=Parameter.glorot((d_e, d_e), d_e, d_e, rng),
        w1f=Parameter.glorot((d_f, d_e), d_e, d_f, rng),
        b1f=Parameter.zeros(d_f),
        w2f=Parameter.glorot((d_e, d_f), d_f, d_e, rng),
        b2f=Parameter.zeros(d_e),
    )


def init_aggregator(config: ModelConfig, rng: np.random.Generator) -> AggregatorParams:
    """Two attention blocks with separate weights plus the pooling head."""
    d_e = config.embedding_dim
    blocks = [init_attention_block(config, rng) for _ in range(ATTENTION_BLOCKS)]
    pool = TemporalAttentionParams(
        wa=Parameter.glorot((d_e, d_e), d_e, d_e, rng),
        ba=Parameter.zeros(d_e),
        context=Parameter.glorot((d_e,), d_e, 1, rng),
    )
    return AggregatorParams(blocks=blocks, pool=pool)
