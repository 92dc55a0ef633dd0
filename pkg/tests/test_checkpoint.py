import json
import struct
import zlib

import pytest
import torch

from crateseg.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from crateseg.config import ModelConfig
from crateseg.exceptions import CheckpointError, CheckpointVersionError, ChecksumError
from crateseg.model import build_model


def _resign(body: bytes) -> bytes:
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_round_trip_is_bit_exact(tmp_path, tiny_config, dtype):
    model = build_model(tiny_config, seed=3, dtype=dtype)
    path = save_checkpoint(model, tmp_path / "checkpoints" / "model.cr8w")
    restored = load_checkpoint(path)
    assert restored.config == tiny_config
    original_state = model.state_dict()
    for name, tensor in restored.state_dict().items():
        assert tensor.dtype == dtype
        assert torch.equal(tensor, original_state[name])
    image = torch.rand(2, 3, 8, 8, dtype=dtype)
    assert torch.equal(model(image).logits, restored(image).logits)


def test_layout(tiny_config):
    model = build_model(tiny_config)
    data = encode_checkpoint(tiny_config, model.state_dict())
    assert data[:4] == MAGIC
    assert struct.unpack("<I", data[4:8])[0] == FORMAT_VERSION
    config_len = struct.unpack("<I", data[8:12])[0]
    block = json.loads(data[12:12 + config_len].decode("utf-8"))
    assert block == {"model": tiny_config.to_dict()}
    count = struct.unpack("<I", data[12 + config_len:16 + config_len])[0]
    assert count == len(model.state_dict())
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4]) & 0xFFFFFFFF


def test_read_checkpoint(tmp_path, tiny_config):
    model = build_model(tiny_config, seed=1, dtype=torch.float64)
    path = save_checkpoint(model, tmp_path / "model.cr8w")
    config, tensors = read_checkpoint(path)
    assert config == tiny_config
    assert list(tensors) == list(model.state_dict())
    assert tensors["layers.0.attention.subspaces"].shape == (8, 8)


def test_corrupt_payload_fails_crc(tiny_config):
    data = bytearray(encode_checkpoint(tiny_config, build_model(tiny_config).state_dict()))
    data[-10] ^= 0xFF
    with pytest.raises(ChecksumError, match="CRC"):
        decode_checkpoint(bytes(data))


def test_version_mismatch_names_both_versions(tiny_config):
    data = bytearray(encode_checkpoint(tiny_config, build_model(tiny_config).state_dict()))
    data[4:8] = struct.pack("<I", FORMAT_VERSION + 1)
    with pytest.raises(CheckpointVersionError) as info:
        decode_checkpoint(_resign(bytes(data[:-4])))
    message = str(info.value)
    assert str(FORMAT_VERSION + 1) in message
    assert str(FORMAT_VERSION) in message


def test_bad_magic_and_truncation(tiny_config):
    data = encode_checkpoint(tiny_config, build_model(tiny_config).state_dict())
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError):
        decode_checkpoint(data[:10])
    with pytest.raises(CheckpointError, match="truncated"):
        decode_checkpoint(_resign(data[:-40]))


def test_unknown_dtype_tag(tiny_config):
    tensors = {"head.weight": torch.zeros(3, 8)}
    body = encode_checkpoint(tiny_config, tensors)[:-4]
    # the tag byte precedes the 3 * 8 * 4 payload bytes
    tag_position = len(body) - 3 * 8 * 4 - 1
    corrupted = body[:tag_position] + bytes([9]) + body[tag_position + 1:]
    with pytest.raises(CheckpointError, match="dtype tag 9"):
        decode_checkpoint(_resign(corrupted))


def test_unsupported_dtype(tiny_config):
    with pytest.raises(CheckpointError):
        encode_checkpoint(tiny_config, {"head.weight": torch.zeros(3, 8, dtype=torch.float16)})


def test_mismatched_tensors(tmp_path, tiny_config):
    path = tmp_path / "partial.cr8w"
    path.write_bytes(encode_checkpoint(tiny_config, {"head.weight": torch.zeros(3, 8)}))
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(path)


def test_variant_round_trip(tmp_path):
    config = ModelConfig.for_architecture("vit", num_layers=1, model_dim=8, num_heads=2, head_dim=4,
                                          image_shape=(1, 8, 8), patch_shape=(4, 4), mlp_hidden=16)
    model = build_model(config)
    restored = load_checkpoint(save_checkpoint(model, tmp_path / "vit.cr8w"))
    assert restored.config.architecture == "vit"
    assert torch.equal(restored.layers[0].block.fc1.weight, model.layers[0].block.fc1.weight)
