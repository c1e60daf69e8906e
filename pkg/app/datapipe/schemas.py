"""Pydantic schemas for measurements, day-long series and synthetic populations."""

import math
from datetime import date
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

MINUTES_PER_DAY = 1440

LabelValue = Union[str, float]


class MeasurementRecord(BaseModel):
    """One timestamped reading: (user id, value, minute since epoch)."""

    model_config = ConfigDict(frozen=True)

    user_id: str = Field(..., min_length=1, description="Opaque user identifier")
    epoch_minute: int = Field(..., ge=0, description="Minutes since Unix epoch, UTC")
    value: float = Field(..., gt=0, description="Beats per minute; 0 means missing")

    @field_validator("user_id")
    @classmethod
    def strip_user_id(cls, v: str) -> str:
        v = v.strip()
        if not v:
            raise ValueError("user_id cannot be empty")
        return v

    @field_validator("value")
    @classmethod
    def finite_value(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("value must be finite")
        return v


class DayLongSeries(BaseModel):
    """One user-day: 1440 minute slots plus a binary availability mask."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    user_id: str
    date: date
    values: np.ndarray
    mask: np.ndarray

    @model_validator(mode="after")
    def check_slots(self) -> "DayLongSeries":
        values = np.asarray(self.values, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=np.float64)
        if values.shape != (MINUTES_PER_DAY,) or mask.shape != (MINUTES_PER_DAY,):
            raise ValueError(
                f"values and mask must both have {MINUTES_PER_DAY} slots, "
                f"got {values.shape} and {mask.shape}"
            )
        if not np.all((mask == 0.0) | (mask == 1.0)):
            raise ValueError("mask must be binary")
        if not np.array_equal(mask == 0.0, values == 0.0):
            raise ValueError("mask must be 0 exactly where values are 0")
        values.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        return self

    @property
    def completeness(self) -> float:
        """Fraction of measured slots."""
        return float(self.mask.mean())

    @classmethod
    def from_values(cls, user_id: str, day: date, values: np.ndarray) -> "DayLongSeries":
        values = np.asarray(values, dtype=np.float64)
        return cls(user_id=user_id, date=day, values=values, mask=(values != 0.0) * 1.0)


class UserArchive(BaseModel):
    """All day-long series of one user, strictly increasing by date."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    user_id: str
    days: List[DayLongSeries]
    labels: Dict[str, LabelValue] = Field(default_factory=dict)

    @model_validator(mode="after")
    def check_days(self) -> "UserArchive":
        for earlier, later in zip(self.days, self.days[1:]):
            if later.date <= earlier.date:
                raise ValueError(
                    f"days of {self.user_id} must be strictly increasing by date "
                    f"({earlier.date} then {later.date})"
                )
        for day in self.days:
            if day.user_id != self.user_id:
                raise ValueError(f"day of {day.user_id} filed under {self.user_id}")
        return self

    @property
    def dates(self) -> List[date]:
        return [d.date for d in self.days]


class SynthSpec(BaseModel):
    """Synthetic population settings (the [data] section)."""

    model_config = ConfigDict(extra="forbid")

    n_users: int = Field(default=16, ge=1)
    days_per_user: int = Field(default=30, ge=1)
    min_days_per_user: Optional[int] = Field(
        default=None, ge=1, description="When set, day counts vary uniformly up to days_per_user"
    )
    baseline_mean: float = Field(default=70.0, gt=0)
    baseline_std: float = Field(default=6.0, ge=0)
    circadian_amplitude_range: Tuple[float, float] = (5.0, 15.0)
    circadian_phase_range: Tuple[float, float] = (0.0, 2.0 * math.pi)
    noise_std: float = Field(default=3.0, ge=0)
    gap_rate: float = Field(default=0.3, ge=0, le=1)
    gap_mean_length: float = Field(default=120.0, ge=1, description="Mean geometric gap, minutes")
    start_date: date = date(2018, 1, 1)
    seed: int = Field(default=7, ge=0, le=2**64 - 1)

    @model_validator(mode="after")
    def check_ranges(self) -> "SynthSpec":
        for name in ("circadian_amplitude_range", "circadian_phase_range"):
            low, high = getattr(self, name)
            if low > high:
                raise ValueError(f"{name} must be (low, high), got ({low}, {high})")
        if self.min_days_per_user is not None and self.min_days_per_user > self.days_per_user:
            raise ValueError("min_days_per_user cannot exceed days_per_user")
        return self


class IngestResponse(BaseModel):
    """Summary of a measurement CSV import."""

    records: List[MeasurementRecord]
    success_count: int
    error_count: int
    errors: List[str] = Field(default_factory=list)
    message: str = ""


class ChronologicalSplit(BaseModel):
    """Day-level buckets by date; users without days in a bucket are omitted."""

    embed_train: List[UserArchive]
    valid: List[UserArchive]
    test: List[UserArchive]
    outside_horizon: int = 0
