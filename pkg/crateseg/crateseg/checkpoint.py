"""
Single-file model checkpoints.

Layout, all integers little-endian:

    b"CR8W" | u32 version | u32 config_len | config JSON (UTF-8)
    | u32 tensor_count | tensor records | u32 CRC32 of every preceding byte

A tensor record is

    u32 name_len | name (UTF-8) | u8 rank | u32 dims[rank] | u8 dtype tag | payload

with dtype tag 1 = float32 and 2 = float64, payload little-endian in C order.
"""
import json
import logging
import struct
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np
import torch

from .config import ModelConfig
from .exceptions import CheckpointError, CheckpointVersionError, ChecksumError
from .model import CrateModel

logger = logging.getLogger(__name__)

MAGIC = b"CR8W"
FORMAT_VERSION = 1
DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
TORCH_TAGS = {torch.float32: 1, torch.float64: 2}
TORCH_DTYPES = {1: torch.float32, 2: torch.float64}

U8 = struct.Struct("<B")
U32 = struct.Struct("<I")


def encode_checkpoint(config: ModelConfig, tensors: Dict[str, torch.Tensor]) -> bytes:
    config_bytes = json.dumps({"model": config.to_dict()}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, U32.pack(FORMAT_VERSION), U32.pack(len(config_bytes)), config_bytes, U32.pack(len(tensors))]
    for name, tensor in tensors.items():
        if tensor.dtype not in TORCH_TAGS:
            raise CheckpointError(f"Tensor {name} has unsupported dtype {tensor.dtype}")
        tag = TORCH_TAGS[tensor.dtype]
        name_bytes = name.encode("utf-8")
        parts += [U32.pack(len(name_bytes)), name_bytes, U8.pack(tensor.dim())]
        parts += [U32.pack(dim) for dim in tensor.shape]
        parts.append(U8.pack(tag))
        parts.append(tensor.detach().cpu().contiguous().numpy().astype(DTYPE_TAGS[tag]).tobytes())
    body = b"".join(parts)
    return body + U32.pack(zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, data: bytes, end: int):
        self.data = data
        self.end = end
        self.pos = 0

    def take(self, size: int, what: str) -> bytes:
        if self.pos + size > self.end:
            raise CheckpointError(f"Checkpoint is truncated while reading {what} at byte {self.pos}")
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def u8(self, what: str) -> int:
        return U8.unpack(self.take(1, what))[0]

    def u32(self, what: str) -> int:
        return U32.unpack(self.take(4, what))[0]


def decode_checkpoint(data: bytes) -> Tuple[Dict, "OrderedDict[str, np.ndarray]"]:
    """ Verify and parse checkpoint bytes into (config block, named arrays) """
    if len(data) < len(MAGIC) + 4 * 4:
        raise CheckpointError(f"Checkpoint is truncated: {len(data)} bytes")
    if data[:4] != MAGIC:
        raise CheckpointError(f"Not a checkpoint: magic {data[:4]!r}, expected {MAGIC!r}")
    version = U32.unpack(data[4:8])[0]
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(version, FORMAT_VERSION)
    stored = U32.unpack(data[-4:])[0]
    computed = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if stored != computed:
        raise ChecksumError(stored, computed)

    reader = _Reader(data, len(data) - 4)
    reader.pos = 8
    config_len = reader.u32("config length")
    try:
        config = json.loads(reader.take(config_len, "config block").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as error:
        raise CheckpointError(f"Checkpoint config block is not valid JSON: {error}") from error
    tensors = OrderedDict()
    for _ in range(reader.u32("tensor count")):
        name = reader.take(reader.u32("name length"), "tensor name").decode("utf-8")
        rank = reader.u8(f"rank of {name}")
        shape = tuple(reader.u32(f"shape of {name}") for _ in range(rank))
        tag = reader.u8(f"dtype of {name}")
        if tag not in DTYPE_TAGS:
            raise CheckpointError(f"Unknown dtype tag {tag} for tensor {name}")
        dtype = DTYPE_TAGS[tag]
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        tensors[name] = np.frombuffer(reader.take(size, f"payload of {name}"), dtype=dtype).reshape(shape).copy()
    if reader.pos != reader.end:
        raise CheckpointError(f"Checkpoint has {reader.end - reader.pos} unexpected trailing bytes")
    return config, tensors


def save_checkpoint(model: CrateModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model.config, OrderedDict(model.state_dict())))
    logger.info("Saved checkpoint %s", path)
    return path


def read_checkpoint(path: Union[str, Path]) -> Tuple[ModelConfig, "OrderedDict[str, np.ndarray]"]:
    config, tensors = decode_checkpoint(Path(path).read_bytes())
    if "model" not in config:
        raise CheckpointError(f"Checkpoint {path} has no model config")
    return ModelConfig.from_dict(config["model"]), tensors


def load_checkpoint(path: Union[str, Path]) -> CrateModel:
    """ Rebuild the model stored at ``path``; every tensor is restored bit-exactly """
    config, tensors = read_checkpoint(path)
    dtypes = {array.dtype for array in tensors.values()}
    dtype = torch.float64 if np.dtype("<f8") in dtypes else torch.float32
    model = CrateModel(config).to(dtype)
    expected = model.state_dict()
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))
        unexpected = sorted(set(tensors) - set(expected))
        raise CheckpointError(f"Checkpoint tensors do not match the model: missing {missing}, unexpected {unexpected}")
    for name, array in tensors.items():
        if tuple(expected[name].shape) != array.shape:
            raise CheckpointError(f"Tensor {name} has shape {array.shape}, model expects {tuple(expected[name].shape)}")
    model.load_state_dict({name: torch.from_numpy(array) for name, array in tensors.items()})
    model.eval()
    logger.info("Loaded checkpoint %s", path)
    return model
