"""Parameter, RNG state and kernel enums."""

from enum import Enum
from typing import Tuple

import numpy as np
from pydantic import BaseModel, Field

# Tensors are float64 numpy arrays; the alias keeps signatures readable.
Tensor = np.ndarray

UINT64_MAX = 2**64 - 1


class ActivationKind(str, Enum):
    """Elementwise activation."""

    relu = "relu"
    sigmoid = "sigmoid"
    tanh = "tanh"


class Parameter:
    """Trainable tensor with a same-shaped gradient accumulator."""

    __slots__ = ("value", "gradient")

    def __init__(self, value):
        self.value = np.array(value, dtype=np.float64)
        self.gradient = np.zeros_like(self.value)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.gradient.fill(0.0)

    @classmethod
    def zeros(cls, *shape: int) -> "Parameter":
        return cls(np.zeros(shape, dtype=np.float64))

    @classmethod
    def glorot(
        cls, shape: Tuple[int, ...], fan_in: int, fan_out: int, rng: np.random.Generator
    ) -> "Parameter":
        """Glorot-uniform initialisation, limit sqrt(6 / (fan_in + fan_out))."""
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return cls(rng.uniform(-limit, limit, size=shape))

    def __repr__(self) -> str:
        return f"Parameter(shape={self.shape})"


class RngState(BaseModel):
    """Counter-based random state.

    Every (seed, counter) pair keys an independent Philox stream, so a run can
    be resumed from the two integers alone.
    """

    seed: int = Field(default=0, ge=0, le=UINT64_MAX)
    counter: int = Field(default=0, ge=0, le=UINT64_MAX)

    def generator(self) -> np.random.Generator:
        """Generator for the current (seed, counter) without advancing."""
        key = (self.counter << 64) | self.seed
        return np.random.Generator(np.random.Philox(key=key))

    def next_generator(self) -> np.random.Generator:
        """Generator for the current counter, then advance the counter."""
        gen = self.generator()
        self.counter += 1
        return gen
