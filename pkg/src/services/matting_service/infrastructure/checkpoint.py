"""
Checkpoint container: a flat, versioned binary file of named tensors with a
JSON header carrying the ModelConfig. The byte layout is documented in
docs/checkpoint_format.md.
"""
import json
import os
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import numpy as np
import structlog

from src.shared.domain.exceptions import (
    CheckpointConfigMismatchError,
    CheckpointError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
)

from ..domain.entities import ModelConfig
from .network import MattingNetwork, build_model

logger = structlog.get_logger(__name__)

MAGIC = b"MATTECKP"
FORMAT_VERSION = 1

DTYPE_CODES: Dict[int, np.dtype] = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<i8"),
}
CODE_FOR_DTYPE = {dtype: code for code, dtype in DTYPE_CODES.items()}

PathLike = Union[str, Path]


class _Reader:
    """Cursor over the file bytes that reports truncation."""

    def __init__(self, payload: bytes, path: Path):
        self.payload = payload
        self.offset = 0
        self.path = path

    def take(self, count: int) -> bytes:
        end = self.offset + count
        if end > len(self.payload):
            raise CheckpointTruncatedError(
                f"{self.path}: needed {count} bytes at offset {self.offset}, file has {len(self.payload)}"
            )
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def write_container(path: PathLike, tensors: Mapping[str, np.ndarray], header: Dict[str, Any]) -> Path:
    """Write named arrays plus a JSON header; the file is replaced atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header_bytes)), header_bytes,
              struct.pack("<I", len(tensors))]
    for name, array in tensors.items():
        array = np.asarray(array)
        dtype = array.dtype.newbyteorder("<")
        if dtype not in CODE_FOR_DTYPE:
            raise CheckpointError(f"tensor '{name}' has unsupported dtype {array.dtype}")
        name_bytes = name.encode("utf-8")
        payload = np.ascontiguousarray(array, dtype=dtype).tobytes()
        chunks.append(struct.pack("<H", len(name_bytes)))
        chunks.append(name_bytes)
        chunks.append(struct.pack("<BB", CODE_FOR_DTYPE[dtype], array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(struct.pack("<Q", len(payload)))
        chunks.append(payload)

    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as handle:
        for chunk in chunks:
            handle.write(chunk)
    os.replace(tmp, path)
    return path


def read_container(path: PathLike) -> Tuple[Dict[str, Any], "OrderedDict[str, np.ndarray]"]:
    """Read a container; raises version and truncation errors."""
    path = Path(path)
    try:
        payload = path.read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint not found: {path}") from exc

    reader = _Reader(payload, path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint container")
    version, header_len = reader.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: container version {version}, supported {FORMAT_VERSION}")
    try:
        header = json.loads(reader.take(header_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc

    (count,) = reader.unpack("<I")
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        code, ndim = reader.unpack("<BB")
        if code not in DTYPE_CODES:
            raise CheckpointError(f"{path}: tensor '{name}' has unknown dtype code {code}")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        (nbytes,) = reader.unpack("<Q")
        dtype = DTYPE_CODES[code]
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if nbytes != expected:
            raise CheckpointError(f"{path}: tensor '{name}' declares {nbytes} bytes, shape needs {expected}")
        data = np.frombuffer(reader.take(nbytes), dtype=dtype).reshape(shape)
        tensors[name] = data.astype(dtype.newbyteorder("="), copy=True)
    return header, tensors


def save_model(model: MattingNetwork, path: PathLike, metadata: Optional[Dict[str, Any]] = None) -> Path:
    """Write model parameters and BN buffers with the config header."""
    header = {"model_config": model.config.model_dump(mode="json"), "metadata": metadata or {}}
    written = write_container(path, model.state_dict(), header)
    logger.info("checkpoint_written", path=str(written), tensors=len(model.state_dict()))
    return written


def config_from_header(header: Dict[str, Any], path: PathLike = "") -> ModelConfig:
    if "model_config" not in header:
        raise CheckpointError(f"{path}: header has no model_config")
    try:
        return ModelConfig.parse(header["model_config"])
    except ConfigError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc


def load_into(model: MattingNetwork, path: PathLike) -> Dict[str, Any]:
    """Restore parameters into ``model``; the stored config must match its config."""
    header, tensors = read_container(path)
    stored = config_from_header(header, path)
    if stored != model.config:
        raise CheckpointConfigMismatchError(
            f"{path}: checkpoint was written for {stored.model_dump()} but the model uses {model.config.model_dump()}"
        )
    model_tensors = {k: v for k, v in tensors.items() if not k.startswith("optimizer.")}
    model.load_state_dict(model_tensors)
    return header


def load_model(path: PathLike, expected_config: Optional[ModelConfig] = None) -> MattingNetwork:
    """Build a model from the checkpoint's own config and restore its tensors."""
    header, _ = read_container(path)
    config = config_from_header(header, path)
    if expected_config is not None and expected_config != config:
        raise CheckpointConfigMismatchError(f"{path}: checkpoint config differs from the requested config")
    model = build_model(config, seed=0)
    load_into(model, path)
    return model
