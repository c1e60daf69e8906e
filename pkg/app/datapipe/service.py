"""Ingestion, day segmentation, synthetic populations and data splits."""

import csv
import logging
import math
import os
from collections import defaultdict
from datetime import date, timedelta
from itertools import groupby
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from errors import ConfigError, DataFileError, InsufficientUsersError
from metrics import RECORDS_INGESTED, ROWS_SKIPPED
from datapipe.schemas import (
    MINUTES_PER_DAY,
    ChronologicalSplit,
    DayLongSeries,
    IngestResponse,
    LabelValue,
    MeasurementRecord,
    SynthSpec,
    UserArchive,
)
from numkernel.schemas import RngState

logger = logging.getLogger(__name__)

EPOCH = date(1970, 1, 1)
MIN_SYNTHETIC_BPM = 30.0
LABELS_SUFFIX = ".labels.csv"
CACHE_MAGIC = "#hre-archive v1"


def day_of_epoch_minute(epoch_minute: int) -> date:
    return EPOCH + timedelta(days=epoch_minute // MINUTES_PER_DAY)


def epoch_minute_of(day: date, minute_of_day: int = 0) -> int:
    return (day - EPOCH).days * MINUTES_PER_DAY + minute_of_day


# ---------- measurement CSV ----------


def ingest_csv(path: str) -> IngestResponse:
    """Parse header-free ``user_id,value,epoch_minute`` lines.

    Bad rows (wrong field count, unparseable, value <= 0) are skipped and
    counted; an unreadable file is fatal.
    """
    try:
        with open(path, "r", encoding="utf-8", newline="") as handle:
            rows = list(csv.reader(handle))
    except (OSError, UnicodeDecodeError) as e:
        raise DataFileError(f"Cannot read measurements from {path}: {e}")

    records: List[MeasurementRecord] = []
    errors: List[str] = []
    for idx, row in enumerate(rows, start=1):
        if not row or all(not field.strip() for field in row):
            continue
        if len(row) != 3:
            errors.append(f"Line {idx}: expected 3 fields, got {len(row)}")
            continue
        try:
            records.append(
                MeasurementRecord(
                    user_id=row[0], value=row[1].strip(), epoch_minute=row[2].strip()
                )
            )
        except ValidationError as e:
            first = e.errors()[0]
            field = ".".join(str(part) for part in first.get("loc", ()))
            errors.append(f"Line {idx}: {field}: {first.get('msg')}")

    records.sort(key=lambda r: (r.user_id, r.epoch_minute))
    RECORDS_INGESTED.inc(len(records))
    if errors:
        ROWS_SKIPPED.inc(len(errors))
        logger.warning("ingest path=%s skipped=%d first=%s", path, len(errors), errors[0])
    logger.info("ingest path=%s accepted=%d", path, len(records))
    return IngestResponse(
        records=records,
        success_count=len(records),
        error_count=len(errors),
        errors=errors,
        message=f"Ingest finished: {len(records)} records, {len(errors)} skipped",
    )


# ---------- segmentation ----------


def segment_days(
    records: Iterable[MeasurementRecord],
    labels: Optional[Mapping[str, Mapping[str, LabelValue]]] = None,
) -> List[UserArchive]:
    """Partition records into masked UTC day-long series, one archive per user.

    Several readings in one minute are averaged; days without any reading
    are not emitted.
    """
    labels = labels or {}
    ordered = sorted(records, key=lambda r: (r.user_id, r.epoch_minute))
    archives: List[UserArchive] = []
    for user_id, group in groupby(ordered, key=lambda r: r.user_id):
        user_records = list(group)
        minutes = np.fromiter((r.epoch_minute for r in user_records), dtype=np.int64)
        values = np.fromiter((r.value for r in user_records), dtype=np.float64)
        day_numbers, day_pos = np.unique(minutes // MINUTES_PER_DAY, return_inverse=True)
        slots = minutes % MINUTES_PER_DAY

        sums = np.zeros((day_numbers.size, MINUTES_PER_DAY))
        counts = np.zeros((day_numbers.size, MINUTES_PER_DAY))
        np.add.at(sums, (day_pos, slots), values)
        np.add.at(counts, (day_pos, slots), 1.0)
        averaged = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)

        days = [
            DayLongSeries(
                user_id=user_id,
                date=EPOCH + timedelta(days=int(day_number)),
                values=averaged[i],
                mask=(counts[i] > 0) * 1.0,
            )
            for i, day_number in enumerate(day_numbers)
        ]
        archives.append(
            UserArchive(user_id=user_id, days=days, labels=dict(labels.get(user_id, {})))
        )
    logger.info(
        "segment users=%d days=%d", len(archives), sum(len(a.days) for a in archives)
    )
    return archives


def archives_to_records(archives: Iterable[UserArchive]) -> List[MeasurementRecord]:
    """Flatten archives back into one record per measured minute."""
    records: List[MeasurementRecord] = []
    for archive in archives:
        for day in archive.days:
            base = epoch_minute_of(day.date)
            for slot in np.flatnonzero(day.mask):
                records.append(
                    MeasurementRecord(
                        user_id=archive.user_id,
                        epoch_minute=base + int(slot),
                        value=float(day.values[slot]),
                    )
                )
    return records


# ---------- synthetic populations ----------


def _baseline_band(baseline: float, spec: SynthSpec) -> str:
    # tertiles of the baseline normal
    cut = 0.4307 * spec.baseline_std
    if baseline < spec.baseline_mean - cut:
        return "low"
    if baseline > spec.baseline_mean + cut:
        return "high"
    return "mid"


def generate_synthetic(spec: SynthSpec) -> List[UserArchive]:
    """Circadian sine users with noise and geometric-length gaps."""
    rng = RngState(seed=spec.seed).generator()
    minutes = np.arange(MINUTES_PER_DAY)
    amp_low, amp_high = spec.circadian_amplitude_range
    phase_low, phase_high = spec.circadian_phase_range
    width = len(str(spec.n_users - 1))

    archives: List[UserArchive] = []
    for u in range(spec.n_users):
        user_id = f"u{u:0{width}d}"
        baseline = float(rng.normal(spec.baseline_mean, spec.baseline_std))
        amplitude = float(rng.uniform(amp_low, amp_high))
        phase = float(rng.uniform(phase_low, phase_high))
        if spec.min_days_per_user is None:
            n_days = spec.days_per_user
        else:
            n_days = int(rng.integers(spec.min_days_per_user, spec.days_per_user + 1))

        circadian = baseline + amplitude * np.sin(2.0 * np.pi * minutes / MINUTES_PER_DAY + phase)
        days: List[DayLongSeries] = []
        for d in range(n_days):
            values = circadian.copy()
            if spec.noise_std > 0:
                values += rng.normal(0.0, spec.noise_std, size=MINUTES_PER_DAY)
            values = np.maximum(values, MIN_SYNTHETIC_BPM)
            if rng.random() < spec.gap_rate:
                length = min(
                    int(rng.geometric(1.0 / spec.gap_mean_length)), MINUTES_PER_DAY - 1
                )
                start = int(rng.integers(0, MINUTES_PER_DAY - length + 1))
                values[start : start + length] = 0.0
            days.append(
                DayLongSeries.from_values(
                    user_id, spec.start_date + timedelta(days=d), values
                )
            )

        labels: Dict[str, LabelValue] = {
            "chronotype": "early" if phase < (phase_low + phase_high) / 2 else "late",
            "baseline_band": _baseline_band(baseline, spec),
            "amplitude": amplitude,
        }
        archives.append(UserArchive(user_id=user_id, days=days, labels=labels))

    logger.info(
        "synth users=%d days=%d seed=%d",
        len(archives),
        sum(len(a.days) for a in archives),
        spec.seed,
    )
    return archives


# ---------- splits ----------


def split_labels(
    archives: Sequence[UserArchive],
    fractions: Tuple[float, float, float] = (0.6, 0.1, 0.3),
    seed: int = 0,
) -> Tuple[List[UserArchive], List[UserArchive], List[UserArchive]]:
    """Disjoint user-level train/validation/test partition."""
    if len(archives) < 3:
        raise InsufficientUsersError(
            f"Label split needs at least 3 users, got {len(archives)}"
        )
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"Split fractions must be non-negative and sum to 1: {fractions}")

    ordered = sorted(archives, key=lambda a: a.user_id)
    n = len(ordered)
    n_valid = math.floor(n * fractions[1] + 0.5)
    n_test = math.floor(n * fractions[2] + 0.5)
    overflow = max(0, n_valid + n_test - n)
    n_test -= min(overflow, n_test)
    n_valid = min(n_valid, n - n_test)
    n_train = n - n_valid - n_test

    perm = RngState(seed=seed).generator().permutation(n)
    shuffled = [ordered[i] for i in perm]
    train = shuffled[:n_train]
    valid = shuffled[n_train : n_train + n_valid]
    test = shuffled[n_train + n_valid :]
    return train, valid, test


def _bucket(archives: Sequence[UserArchive], keep) -> List[UserArchive]:
    out: List[UserArchive] = []
    for archive in archives:
        days = [d for d in archive.days if keep(d.date)]
        if days:
            out.append(UserArchive(user_id=archive.user_id, days=days, labels=archive.labels))
    return out


def split_chronological(
    archives: Sequence[UserArchive],
    train_end_date: date,
    valid_end_date: date,
    test_end_date: date,
) -> ChronologicalSplit:
    """Assign days to half-open date buckets [.., train_end), [train_end, valid_end), [valid_end, test_end)."""
    if not train_end_date < valid_end_date < test_end_date:
        raise ConfigError(
            "Chronological split dates must be strictly increasing: "
            f"{train_end_date}, {valid_end_date}, {test_end_date}"
        )
    split = ChronologicalSplit(
        embed_train=_bucket(archives, lambda d: d < train_end_date),
        valid=_bucket(archives, lambda d: train_end_date <= d < valid_end_date),
        test=_bucket(archives, lambda d: valid_end_date <= d < test_end_date),
        outside_horizon=sum(
            1 for a in archives for d in a.days if d.date >= test_end_date
        ),
    )
    for name in ("embed_train", "valid", "test"):
        if not getattr(split, name):
            logger.warning("chronological split bucket=%s is empty", name)
    return split


# ---------- archive cache ----------


def labels_path_for(path: str) -> str:
    return path + LABELS_SUFFIX


def _format_value(v: float) -> str:
    return "0" if v == 0.0 else repr(float(v))


def write_archive_cache(archives: Sequence[UserArchive], path: str) -> None:
    """Magic line, then one line per day: ``user_id,YYYY-MM-DD,v0,...,v1439``.

    Labels go to a sidecar next to the cache.
    """
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(CACHE_MAGIC + "\n")
            for archive in archives:
                for day in archive.days:
                    fields = [archive.user_id, day.date.isoformat()]
                    fields.extend(_format_value(v) for v in day.values)
                    handle.write(",".join(fields) + "\n")
        if any(a.labels for a in archives):
            write_labels(archives, labels_path_for(path))
    except OSError as e:
        raise DataFileError(f"Cannot write archive cache to {path}: {e}")


def write_labels(archives: Sequence[UserArchive], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for archive in archives:
            for attribute in sorted(archive.labels):
                value = archive.labels[attribute]
                text = repr(float(value)) if isinstance(value, float) else str(value)
                handle.write(f"{archive.user_id},{attribute},{text}\n")


def read_labels(path: str) -> Dict[str, Dict[str, LabelValue]]:
    labels: Dict[str, Dict[str, LabelValue]] = defaultdict(dict)
    try:
        with open(path, "r", encoding="utf-8", newline="") as handle:
            for idx, row in enumerate(csv.reader(handle), start=1):
                if not row:
                    continue
                if len(row) != 3:
                    raise DataFileError(f"{path} line {idx}: expected user_id,attribute,value")
                user_id, attribute, raw = (field.strip() for field in row)
                try:
                    labels[user_id][attribute] = float(raw)
                except ValueError:
                    labels[user_id][attribute] = raw
    except OSError as e:
        raise DataFileError(f"Cannot read labels from {path}: {e}")
    return dict(labels)


def read_archive_cache(path: str) -> List[UserArchive]:
    by_user: Dict[str, List[DayLongSeries]] = defaultdict(list)
    try:
        with open(path, "r", encoding="utf-8", newline="") as handle:
            if handle.readline().rstrip("\r\n") != CACHE_MAGIC:
                raise DataFileError(
                    f"{path} line 1: missing archive cache header {CACHE_MAGIC!r}"
                )
            for idx, line in enumerate(handle, start=2):
                line = line.rstrip("\r\n")
                if not line:
                    continue
                fields = line.split(",")
                if len(fields) != MINUTES_PER_DAY + 2:
                    raise DataFileError(
                        f"{path} line {idx}: expected {MINUTES_PER_DAY + 2} fields, "
                        f"got {len(fields)}"
                    )
                try:
                    day = date.fromisoformat(fields[1])
                    values = np.array([float(v) for v in fields[2:]])
                    series = DayLongSeries.from_values(fields[0], day, values)
                except (ValueError, ValidationError) as e:
                    raise DataFileError(f"{path} line {idx}: {e}")
                by_user[fields[0]].append(series)
    except OSError as e:
        raise DataFileError(f"Cannot read archive cache {path}: {e}")

    labels = read_labels(labels_path_for(path)) if os.path.exists(labels_path_for(path)) else {}
    archives = []
    for user_id in sorted(by_user):
        days = sorted(by_user[user_id], key=lambda d: d.date)
        try:
            archives.append(
                UserArchive(user_id=user_id, days=days, labels=labels.get(user_id, {}))
            )
        except ValidationError as e:
            raise DataFileError(f"{path}: {e}")
    return archives


def load_dataset(path: str, labels_path: Optional[str] = None) -> List[UserArchive]:
    """Load an archive cache when the file starts with its magic line, else a raw CSV."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            first = handle.readline().rstrip("\r\n")
    except (OSError, UnicodeDecodeError) as e:
        raise DataFileError(f"Cannot read dataset {path}: {e}")

    if first != CACHE_MAGIC:
        extra = read_labels(labels_path) if labels_path else None
        return segment_days(ingest_csv(path).records, labels=extra)
    archives = read_archive_cache(path)
    if labels_path:
        extra = read_labels(labels_path)
        archives = [
            UserArchive(user_id=a.user_id, days=a.days, labels=extra.get(a.user_id, {}))
            for a in archives
        ]
    return archives
