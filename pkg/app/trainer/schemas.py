"""Training configuration, optimizer state, history and checkpoints."""

import math
from typing import Any, Dict, List, Mapping, NamedTuple, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from encoder.schemas import ModelConfig
from numkernel.schemas import Parameter, RngState

# fields that may differ between a checkpointed run and its resumption
STOPPING_FIELDS = ("max_epochs", "max_steps", "patience")


class TrainConfig(BaseModel):
    """Optimisation hyperparameters (the [train] section) plus the architecture."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    model: ModelConfig = Field(default_factory=ModelConfig)
    support_size: int = Field(default=6, ge=1)
    positive_size: int = Field(default=2, ge=1)
    negative_size: int = Field(default=4, ge=1)
    margin: float = Field(default=1.0, ge=0)
    lambda_weight: float = Field(default=0.1, ge=0, alias="lambda")
    learning_rate: float = Field(default=5e-4, gt=0)
    batch_size: int = Field(default=64, ge=1)
    max_epochs: int = Field(default=50, ge=1)
    patience: int = Field(default=5, ge=0)
    max_steps: Optional[int] = Field(default=None, ge=1)
    validation_fraction: float = Field(default=0.1, ge=0, lt=1)
    seed: int = Field(default=7, ge=0, le=2**64 - 1)

    @property
    def embedding_dim(self) -> int:
        return self.model.embedding_dim


class AdamState(BaseModel):
    """First and second moments per parameter name and the step counter."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = Field(default_factory=dict)
    v: Dict[str, np.ndarray] = Field(default_factory=dict)

    @classmethod
    def for_parameters(cls, params: Mapping[str, Parameter]) -> "AdamState":
        return cls(
            m={name: np.zeros_like(p.value) for name, p in params.items()},
            v={name: np.zeros_like(p.value) for name, p in params.items()},
        )


class EpochRecord(BaseModel):
    """One history line: epoch means of the training losses plus validation L_joint."""

    epoch: int
    l_ae: float
    l_s: float
    l_joint: float
    val_joint: float


class EpochProgress(BaseModel):
    """Position inside an unfinished epoch."""

    order_counter: int  # rng counter that keyed the epoch's anchor permutation
    next_batch: int = Field(default=0, ge=0)
    totals: List[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0])


class TrainingState(BaseModel):
    """Everything besides parameters and moments needed to continue a run."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    rng: RngState
    epoch: int = 0
    steps: int = 0
    history: List[EpochRecord] = Field(default_factory=list)
    best_val: float = math.inf
    best_epoch: int = 0
    epochs_without_improvement: int = 0
    best_parameters: Optional[Dict[str, np.ndarray]] = None
    progress: Optional[EpochProgress] = None


class Checkpoint(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    config: TrainConfig
    parameters: Dict[str, np.ndarray]
    adam: AdamState
    state: TrainingState


class FitResult(NamedTuple):
    model: Any  # trainer.model.JointModel
    history: List[EpochRecord]
    best_epoch: int
    steps: int
    stopped_early: bool
