"""The joint model: encoder, decoder, aggregator and an optional task head."""

from datetime import date
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from errors import CheckpointIntegrityError, ConfigError
from aggregator.schemas import AggregatedEmbedding, AggregatorCache, AggregatorParams, init_aggregator
from aggregator.service import aggregate_forward, relative_day_offsets
from datapipe.schemas import DayLongSeries, LabelValue
from encoder.schemas import (
    DayEmbedding,
    DecoderParams,
    EncoderParams,
    ModelConfig,
    ModelVariant,
    init_decoder,
    init_encoder,
)
from encoder.service import encode_day
from numkernel.schemas import Parameter, RngState, Tensor
from numkernel.service import dense, dense_backward, softmax_axis

# RNG counters far above any epoch count
INIT_STREAM = 2**63 + 1


class HeadKind(str, Enum):
    categorical = "categorical"
    numeric = "numeric"


class TaskHead:
    """Single dense layer on the aggregated user embedding.

    Categorical heads use softmax cross-entropy over the observed classes;
    numeric heads regress the standardised target with squared error.
    """

    def __init__(
        self,
        kind: HeadKind,
        attribute: str,
        weight: Parameter,
        bias: Parameter,
        classes: List[str],
        targets: Dict[str, float],
        mean: float = 0.0,
        std: float = 1.0,
        loss_weight: float = 1.0,
    ):
        self.kind = HeadKind(kind)
        self.attribute = attribute
        self.weight = weight
        self.bias = bias
        self.classes = classes
        self.targets = targets
        self.mean = mean
        self.std = std
        self.loss_weight = loss_weight

    @classmethod
    def build(
        cls,
        kind: HeadKind,
        attribute: str,
        labels: Mapping[str, LabelValue],
        embedding_dim: int,
        rng: np.random.Generator,
        loss_weight: float = 1.0,
    ) -> "TaskHead":
        """Head over ``labels`` (user id -> label) for one attribute."""
        kind = HeadKind(kind)
        if kind is HeadKind.categorical:
            classes = sorted({str(v) for v in labels.values()})
            targets = {u: float(classes.index(str(v))) for u, v in labels.items()}
            mean, std, n_out = 0.0, 1.0, len(classes)
        else:
            try:
                values = {u: float(v) for u, v in labels.items()}
            except ValueError as e:
                raise ConfigError(f"attribute {attribute} has non-numeric labels: {e}")
            classes = []
            raw = np.array(list(values.values()))
            mean = float(raw.mean()) if raw.size else 0.0
            std = float(raw.std()) if raw.size and raw.std() > 0 else 1.0
            targets = values
            n_out = 1
        return cls(
            kind=kind,
            attribute=attribute,
            weight=Parameter.glorot((n_out, embedding_dim), embedding_dim, n_out, rng),
            bias=Parameter.zeros(n_out),
            classes=classes,
            targets=targets,
            mean=mean,
            std=std,
            loss_weight=loss_weight,
        )

    def named_parameters(self, prefix: str = "head") -> Dict[str, Parameter]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}

    def has_target(self, user_id: str) -> bool:
        return user_id in self.targets

    def loss(
        self, vector: Tensor, user_id: str, grad_scale: Optional[float] = None
    ) -> Tuple[float, Optional[Tensor]]:
        """Head loss for one user; with ``grad_scale`` also backpropagate it."""
        out = dense(vector, self.weight, self.bias)
        target = self.targets[user_id]
        if self.kind is HeadKind.categorical:
            probs = softmax_axis(out)
            label = int(target)
            loss = -float(np.log(max(probs[label], 1e-300)))
            grad_out = probs.copy()
            grad_out[label] -= 1.0
        else:
            residual = out[0] - (target - self.mean) / self.std
            loss = float(residual * residual)
            grad_out = np.array([2.0 * residual])
        if grad_scale is None:
            return loss, None
        return loss, dense_backward(grad_scale * grad_out, vector, self.weight, self.bias)

    def predict(self, vector: Tensor) -> LabelValue:
        out = dense(vector, self.weight, self.bias)
        if self.kind is HeadKind.categorical:
            return self.classes[int(np.argmax(out))]
        return float(out[0] * self.std + self.mean)

    def scores(self, vector: Tensor) -> Tensor:
        """Class probabilities (categorical heads)."""
        return softmax_axis(dense(vector, self.weight, self.bias))


class JointModel:
    """Parameter container and inference entry points."""

    def __init__(
        self,
        config: ModelConfig,
        encoder: EncoderParams,
        decoder: DecoderParams,
        aggregator: AggregatorParams,
        head: Optional[TaskHead] = None,
    ):
        self.config = config
        self.encoder = encoder
        self.decoder = decoder
        self.aggregator = aggregator
        self.head = head

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "JointModel":
        rng = RngState(seed=seed, counter=INIT_STREAM).generator()
        return cls(config, init_encoder(config, rng), init_decoder(config, rng), init_aggregator(config, rng))

    @property
    def uses_decoder(self) -> bool:
        return self.config.variant is not ModelVariant.no_autoencoder

    @property
    def uses_triplet(self) -> bool:
        return self.config.variant is not ModelVariant.no_triplet

    @property
    def uses_attention(self) -> bool:
        return self.config.variant is not ModelVariant.no_attention

    def named_parameters(self) -> Dict[str, Parameter]:
        named = {
            **self.encoder.named_parameters(),
            **self.decoder.named_parameters(),
            **self.aggregator.named_parameters(),
        }
        if self.head is not None:
            named.update(self.head.named_parameters())
        return named

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, values: Mapping[str, np.ndarray]) -> None:
        named = self.named_parameters()
        if set(values) != set(named):
            missing = sorted(set(named) - set(values))[:3]
            extra = sorted(set(values) - set(named))[:3]
            raise CheckpointIntegrityError(
                f"checkpoint parameters do not match the model (missing {missing}, unexpected {extra})"
            )
        for name, p in named.items():
            if values[name].shape != p.shape:
                raise CheckpointIntegrityError(
                    f"parameter {name}: checkpoint shape {values[name].shape} != model {p.shape}"
                )
            p.value[...] = values[name]

    # ---------- inference ----------

    def embed_day(self, series: DayLongSeries) -> DayEmbedding:
        return encode_day(series, self.encoder, self.config)

    def aggregate_stack(
        self, g: Tensor, offsets: Sequence[int]
    ) -> Tuple[AggregatedEmbedding, AggregatorCache]:
        """The one aggregation path shared by training and inference."""
        return aggregate_forward(g, offsets, self.aggregator, self.uses_attention)

    def aggregate(self, days: Sequence[DayEmbedding]) -> AggregatedEmbedding:
        g = np.stack([d.vector for d in days])
        dates: List[date] = [d.date for d in days]
        return self.aggregate_stack(g, relative_day_offsets(dates))[0]

    def embed_user(self, days: Sequence[DayLongSeries]) -> AggregatedEmbedding:
        return self.aggregate([self.embed_day(d) for d in days])
