"""Evaluation settings, labeled feature rows, fitted probes and metric reports."""

from datetime import date
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

UNIT_METRICS = ("accuracy", "f1", "auc", "micro_f1", "macro_f1")
NON_NEGATIVE_METRICS = ("mse", "mae")


class EvalConfig(BaseModel):
    """Downstream protocol settings (the [eval] section)."""

    model_config = ConfigDict(extra="forbid")

    l2: float = Field(default=1e-4, ge=0)
    max_iters: int = Field(default=500, ge=1)
    support_size: int = Field(default=6, ge=1, description="Days aggregated into a reference vector")
    trials_per_user: int = Field(default=200, ge=1, description="Positive trials per user and period")
    repeats: int = Field(default=1, ge=1)
    label_fractions: Tuple[float, float, float] = (0.6, 0.1, 0.3)
    train_start: Optional[date] = None
    train_end: Optional[date] = None
    test_end: Optional[date] = None
    finetune_steps: int = Field(default=20, ge=1)
    head_weight: float = Field(default=1.0, ge=0)
    seed: int = Field(default=7, ge=0, le=2**64 - 1)

    @model_validator(mode="after")
    def check_dates(self) -> "EvalConfig":
        given = [d for d in (self.train_start, self.train_end, self.test_end) if d is not None]
        if given and len(given) != 3:
            raise ValueError("train_start, train_end and test_end must be given together")
        if given and not self.train_start < self.train_end < self.test_end:
            raise ValueError("evaluation dates must satisfy train_start < train_end < test_end")
        return self


class LabeledEmbedding(BaseModel):
    """One feature row with its label and the user it came from."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    features: np.ndarray
    label: Union[int, float]
    group: str

    @field_validator("features")
    @classmethod
    def one_dimensional(cls, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError(f"features must be a vector, got shape {v.shape}")
        return v


class MetricReport(BaseModel):
    """Named metrics of one task, plus how many users the protocol skipped."""

    task: str
    metrics: Dict[str, float]
    skipped_users: int = 0

    @model_validator(mode="after")
    def check_ranges(self) -> "MetricReport":
        for name, value in self.metrics.items():
            if name in UNIT_METRICS and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")
            if name in NON_NEGATIVE_METRICS and value < 0.0:
                raise ValueError(f"{name}={value} is negative")
        return self

    def lines(self) -> List[str]:
        return [f"{self.task}.{name}={self.metrics[name]:.6f}" for name in sorted(self.metrics)]


class LogisticClassifier(BaseModel):
    """Multinomial logistic regression on standardised features."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    classes: List[int]
    weights: np.ndarray  # (n_classes, d)
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    losses: List[float] = Field(default_factory=list)

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        z = (np.atleast_2d(features) - self.mean) / self.scale
        logits = z @ self.weights.T + self.bias
        logits -= logits.max(axis=1, keepdims=True)
        exp = np.exp(logits)
        return exp / exp.sum(axis=1, keepdims=True)

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(self.classes)[np.argmax(self.predict_proba(features), axis=1)]


class LinearRegressor(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    coef: np.ndarray
    intercept: float

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.atleast_2d(features) @ self.coef + self.intercept
