"""Triplet batches and loss bookkeeping."""

from typing import List, NamedTuple

from pydantic import BaseModel, Field, model_validator

from datapipe.schemas import DayLongSeries


class TripletBatch(BaseModel):
    """Reference, positive and negative days sampled for one anchor user."""

    anchor_user: str
    reference: List[DayLongSeries]
    positive: List[DayLongSeries]
    negative: List[DayLongSeries]

    @model_validator(mode="after")
    def check_users(self) -> "TripletBatch":
        for day in self.reference + self.positive:
            if day.user_id != self.anchor_user:
                raise ValueError(f"day of {day.user_id} sampled as same-user for {self.anchor_user}")
        for day in self.negative:
            if day.user_id == self.anchor_user:
                raise ValueError(f"negative day of {self.anchor_user} is its own")
        return self

    @property
    def days(self) -> List[DayLongSeries]:
        """Every day the batch encodes, in reference, positive, negative order."""
        return self.reference + self.positive + self.negative


class TripletSample(BaseModel):
    """One sampled batch plus the number of anchors that needed replacement."""

    triplets: List[TripletBatch]
    fallbacks: int = 0


class Similarity(NamedTuple):
    value: float
    degenerate: bool


class LossBreakdown(BaseModel):
    """Components of the training objective.

    ``l_joint = l_ae + lambda_weight * l_s + head_weight * head_loss``.
    """

    l_ae: float = Field(..., ge=0)
    l_s: float = Field(..., ge=0)
    l_joint: float
    lambda_weight: float = Field(..., ge=0)
    head_loss: float = Field(default=0.0, ge=0)
    head_weight: float = Field(default=0.0, ge=0)
