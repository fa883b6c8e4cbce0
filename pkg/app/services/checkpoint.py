"""
Binary checkpoint format.

    magic  b"UNCN"
    u32    format version
    u32    config length, then the config block (UTF-8 JSON, sorted keys)
    u32    tensor count, then per tensor, in name order:
           u16 name length, name, u8 dtype length, dtype ("<f4" / "<f8"),
           u8 rank, rank x u32 shape, row-major little-endian payload

All integers are little-endian. The layout is deterministic, so two
identical models give byte-identical files.
"""
import hashlib
import json
import logging
import struct
from pathlib import Path

import numpy as np

from ..exceptions import CheckpointError
from ..schemas.config import EncoderConfig
from .encoder import EncoderModel
from .tokenizer import Tokenizer

logger = logging.getLogger(__name__)

MAGIC = b"UNCN"
FORMAT_VERSION = 1


def to_bytes(model: EncoderModel) -> bytes:
    block = {
        "encoder": model.config.model_dump(mode="json"),
        "tokenizer": model.tokenizer.to_state(),
        "trained": sorted(model.trained),
        "frozen": sorted(model.frozen),
    }
    config_bytes = json.dumps(block, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(config_bytes)), config_bytes]
    parts.append(struct.pack("<I", len(model.params)))
    for name in sorted(model.params):
        tensor = model.params[name]
        dtype = np.dtype(tensor.dtype).newbyteorder("<")
        name_bytes = name.encode("utf-8")
        dtype_bytes = dtype.str.encode("ascii")
        parts.append(struct.pack("<H", len(name_bytes)) + name_bytes)
        parts.append(struct.pack("<B", len(dtype_bytes)) + dtype_bytes)
        parts.append(struct.pack("<B", tensor.ndim) + struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        parts.append(np.ascontiguousarray(tensor, dtype=dtype).tobytes())
    return b"".join(parts)


def checkpoint_id(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()[:16]


def save_checkpoint(model: EncoderModel, path) -> str:
    """Write the checkpoint; returns its id."""
    data = to_bytes(model)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    ident = checkpoint_id(data)
    logger.info(f"Saved checkpoint {path} ({len(data)} bytes, id {ident})")
    return ident


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data = data
        self.offset = 0
        self.source = source

    def read(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointError(f"{self.source}: truncated checkpoint")
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def from_bytes(data: bytes, source: str = "<bytes>") -> EncoderModel:
    reader = _Reader(data, source)
    if reader.read(4) != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    version, config_len = reader.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: checkpoint version {version}, expected {FORMAT_VERSION}")
    try:
        block = json.loads(reader.read(config_len).decode("utf-8"))
        config = EncoderConfig.model_validate(block["encoder"])
        tokenizer = Tokenizer.from_state(block["tokenizer"])
    except (ValueError, KeyError) as e:
        raise CheckpointError(f"{source}: bad config block: {e}") from e

    params = {}
    (count,) = reader.unpack("<I")
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.read(name_len).decode("utf-8")
        (dtype_len,) = reader.unpack("<B")
        dtype = np.dtype(reader.read(dtype_len).decode("ascii"))
        (rank,) = reader.unpack("<B")
        shape = reader.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        tensor = np.frombuffer(reader.read(size), dtype=dtype).reshape(shape)
        params[name] = tensor.astype(dtype.newbyteorder("="), copy=True)
    if reader.offset != len(data):
        raise CheckpointError(f"{source}: trailing bytes after tensors")

    try:
        model = EncoderModel(config, tokenizer, params)
    except ValueError as e:
        raise CheckpointError(f"{source}: {e}") from e
    model.trained = set(block.get("trained", []))
    model.frozen = set(block.get("frozen", []))
    return model


def load_checkpoint(path) -> EncoderModel:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    model = from_bytes(data, str(path))
    logger.info(f"Loaded checkpoint {path} (id {checkpoint_id(data)})")
    return model
