"""Central finite-difference check of analytic gradients."""

import logging
from typing import Callable, Dict, Mapping, Optional

import numpy as np
from pydantic import BaseModel, Field

from errors import ShapeError
from numkernel.schemas import Parameter

logger = logging.getLogger(__name__)

ABSOLUTE_FLOOR = 1e-8


class GradCheckReport(BaseModel):
    """Max relative error per parameter and the verdict."""

    max_relative_error: Dict[str, float]
    tolerance: float
    passed: bool
    checked: Dict[str, int] = Field(default_factory=dict)
    skipped: Dict[str, int] = Field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_relative_error.values(), default=0.0)

    @property
    def skipped_fraction(self) -> float:
        total = sum(self.checked.values()) + sum(self.skipped.values())
        return sum(self.skipped.values()) / total if total else 0.0


def _scalar(value) -> float:
    arr = np.asarray(value, dtype=np.float64)
    if arr.size != 1:
        raise ShapeError(
            f"gradient_check: graph output must be scalar, got shape {arr.shape}"
        )
    return float(arr.reshape(()))


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|a - n| / max(|a|, |n|), zero where the absolute gap is within 1e-8."""
    gap = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(gap <= ABSOLUTE_FLOOR, 0.0, gap / scale)
    return rel


def _central(forward: Callable[[], float], flat: np.ndarray, i: int, step: float) -> float:
    original = flat[i]
    flat[i] = original + step
    plus = _scalar(forward())
    flat[i] = original - step
    minus = _scalar(forward())
    flat[i] = original
    return (plus - minus) / (2.0 * step)


def gradient_check(
    forward: Callable[[], float],
    backward: Callable[[], None],
    parameters: Mapping[str, Parameter],
    tolerance: float = 1e-4,
    step: float = 1e-4,
    max_elements: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    skip_kinks: bool = False,
) -> GradCheckReport:
    """Compare ``backward``'s accumulated gradients with central differences.

    ``forward`` evaluates the scalar graph output from the current parameter
    values. ``backward`` re-runs the graph and accumulates d(output)/d(param)
    into every ``Parameter.gradient``. With ``max_elements`` only that many
    randomly chosen entries per parameter are probed.

    With ``skip_kinks`` every entry is also differenced at ``step / 2``. Entries
    whose two estimates disagree beyond ``tolerance`` have a relu or max switch
    inside the interval and are counted as skipped; the rest are compared
    against the Richardson estimate ``(4 * d(step/2) - d(step)) / 3``.
    """
    for p in parameters.values():
        p.zero_grad()
    _scalar(forward())
    backward()
    analytic = {name: p.gradient.copy() for name, p in parameters.items()}

    report: Dict[str, float] = {}
    checked: Dict[str, int] = {}
    skipped: Dict[str, int] = {}
    for name, p in parameters.items():
        flat = p.value.reshape(-1)
        indices = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            chooser = rng if rng is not None else np.random.default_rng(0)
            indices = np.sort(chooser.choice(flat.size, max_elements, replace=False))
        numeric = np.empty(indices.size)
        keep = np.ones(indices.size, dtype=bool)
        for slot, i in enumerate(indices):
            coarse = _central(forward, flat, i, step)
            if not skip_kinks:
                numeric[slot] = coarse
                continue
            fine = _central(forward, flat, i, step / 2.0)
            if relative_error(np.array(coarse), np.array(fine)) > tolerance:
                keep[slot] = False
            numeric[slot] = (4.0 * fine - coarse) / 3.0
        errors = relative_error(analytic[name].reshape(-1)[indices][keep], numeric[keep])
        report[name] = float(errors.max()) if errors.size else 0.0
        checked[name] = int(keep.sum())
        skipped[name] = int(indices.size - keep.sum())

    worst = max(report.values(), default=0.0)
    passed = worst <= tolerance
    if not passed:
        logger.warning("gradient_check failed worst=%.3e tolerance=%.1e", worst, tolerance)
    if any(skipped.values()):
        logger.debug("gradient_check skipped entries near kinks: %s", skipped)
    return GradCheckReport(
        max_relative_error=report, tolerance=tolerance, passed=passed, checked=checked, skipped=skipped
    )
