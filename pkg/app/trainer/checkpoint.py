"""Binary checkpoint format.

Layout (little-endian)::

    b"PSPC" | u32 version | u32 n_entries
    n_entries x ( u16 name_len | name | u8 ndim | ndim x u64 | raw f8 data )
    u32 config_len | config JSON | u64 rng seed | u64 rng counter
    u32 meta_len | meta JSON | u32 CRC32 of everything before it

Entry names are prefixed ``param/``, ``adam.m/``, ``adam.v/`` or ``best/``.
"""

import json
import logging
import os
import struct
import zlib
from typing import Dict, List, Tuple

import numpy as np
from pydantic import ValidationError

from errors import CheckpointIntegrityError, CheckpointVersionError, DataFileError
from numkernel.schemas import RngState
from trainer.model import JointModel
from trainer.schemas import (
    AdamState,
    Checkpoint,
    EpochProgress,
    EpochRecord,
    TrainConfig,
    TrainingState,
)

logger = logging.getLogger(__name__)

MAGIC = b"PSPC"
FORMAT_VERSION = 1

PARAM, ADAM_M, ADAM_V, BEST = "param/", "adam.m/", "adam.v/", "best/"


def _json_bytes(payload) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _pack_entry(name: str, array: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    header = struct.pack("<H", len(encoded)) + encoded + struct.pack("<B", array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + np.ascontiguousarray(array, dtype="<f8").tobytes()


def serialize_checkpoint(checkpoint: Checkpoint) -> bytes:
    entries: List[Tuple[str, np.ndarray]] = []
    entries += [(PARAM + k, v) for k, v in checkpoint.parameters.items()]
    entries += [(ADAM_M + k, v) for k, v in checkpoint.adam.m.items()]
    entries += [(ADAM_V + k, v) for k, v in checkpoint.adam.v.items()]
    if checkpoint.state.best_parameters is not None:
        entries += [(BEST + k, v) for k, v in checkpoint.state.best_parameters.items()]

    state = checkpoint.state
    meta = {
        "adam": {
            "beta1": checkpoint.adam.beta1,
            "beta2": checkpoint.adam.beta2,
            "eps": checkpoint.adam.eps,
            "t": checkpoint.adam.t,
        },
        "best_epoch": state.best_epoch,
        "best_val": state.best_val,
        "epoch": state.epoch,
        "epochs_without_improvement": state.epochs_without_improvement,
        "history": [record.model_dump() for record in state.history],
        "progress": state.progress.model_dump() if state.progress is not None else None,
        "steps": state.steps,
    }
    config = _json_bytes(checkpoint.config.model_dump(mode="json", by_alias=True))
    meta_bytes = _json_bytes(meta)

    parts = [struct.pack("<4sII", MAGIC, FORMAT_VERSION, len(entries))]
    parts += [_pack_entry(name, array) for name, array in entries]
    parts.append(struct.pack("<I", len(config)) + config)
    parts.append(struct.pack("<QQ", state.rng.seed, state.rng.counter))
    parts.append(struct.pack("<I", len(meta_bytes)) + meta_bytes)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointIntegrityError(
                f"checkpoint truncated: need {n} bytes at offset {self.offset}"
            )
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointIntegrityError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
        )
    body, trailer = data[:-4], data[-4:]
    if zlib.crc32(body) != struct.unpack("<I", trailer)[0]:
        raise CheckpointIntegrityError("checkpoint CRC mismatch (truncated or corrupted)")

    reader = _Reader(body)
    reader.take(8)
    (count,) = reader.unpack("<I")
    tables: Dict[str, Dict[str, np.ndarray]] = {PARAM: {}, ADAM_M: {}, ADAM_V: {}, BEST: {}}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}Q")
        size = int(np.prod(shape, dtype=np.int64))
        array = np.frombuffer(reader.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        prefix = next((p for p in tables if name.startswith(p)), None)
        if prefix is None:
            raise CheckpointIntegrityError(f"unknown checkpoint entry {name}")
        tables[prefix][name[len(prefix) :]] = array

    try:
        (config_len,) = reader.unpack("<I")
        config = TrainConfig.model_validate(json.loads(reader.take(config_len)))
        seed, counter = reader.unpack("<QQ")
        (meta_len,) = reader.unpack("<I")
        meta = json.loads(reader.take(meta_len))
        if reader.offset != len(body):
            raise CheckpointIntegrityError("trailing bytes after checkpoint metadata")
        adam = AdamState(m=tables[ADAM_M], v=tables[ADAM_V], **meta["adam"])
        state = TrainingState(
            rng=RngState(seed=seed, counter=counter),
            epoch=meta["epoch"],
            steps=meta["steps"],
            history=[EpochRecord(**record) for record in meta["history"]],
            best_val=meta["best_val"],
            best_epoch=meta["best_epoch"],
            epochs_without_improvement=meta["epochs_without_improvement"],
            best_parameters=tables[BEST] or None,
            progress=EpochProgress(**meta["progress"]) if meta.get("progress") else None,
        )
    except (ValueError, KeyError, TypeError, ValidationError) as e:
        raise CheckpointIntegrityError(f"checkpoint metadata unreadable: {e}")
    return Checkpoint(config=config, parameters=tables[PARAM], adam=adam, state=state)


def save_checkpoint(path: str, checkpoint: Checkpoint) -> None:
    """Write atomically: a partial file never replaces the last good checkpoint."""
    data = serialize_checkpoint(checkpoint)
    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except OSError as e:
        raise DataFileError(f"Cannot write checkpoint {path}: {e}")
    logger.info("checkpoint saved path=%s bytes=%d epoch=%d", path, len(data), checkpoint.state.epoch)


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as handle:
            data = handle.read()
    except OSError as e:
        raise DataFileError(f"Cannot read checkpoint {path}: {e}")
    return parse_checkpoint(data)


def load_model(path: str) -> Tuple[JointModel, TrainConfig]:
    """Model with the checkpoint's best-validation parameters (latest when none)."""
    checkpoint = load_checkpoint(path)
    model = JointModel.initialize(checkpoint.config.model, checkpoint.config.seed)
    model.load_state_dict(checkpoint.state.best_parameters or checkpoint.parameters)
    return model, checkpoint.config
