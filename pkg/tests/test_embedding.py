import numpy as np
import pytest
import torch

from crateseg.config import ModelConfig
from crateseg.embedding import PatchEmbedding, embed, patchify, unpatchify
from crateseg.exceptions import ConfigurationError


def test_patchify_shape():
    config = ModelConfig()
    assert tuple(patchify(torch.rand(3, 32, 32), config).shape) == (16, 192)
    assert tuple(patchify(torch.rand(5, 3, 32, 32), config).shape) == (5, 16, 192)


def test_patchify_order():
    config = ModelConfig(num_layers=0, model_dim=4, num_heads=1, head_dim=4, image_shape=(2, 4, 6), patch_shape=(2, 3))
    image = np.arange(2 * 4 * 6, dtype=np.float64).reshape(2, 4, 6)
    patches = patchify(image, config).numpy()
    assert patches.shape == (4, 12)
    for index in range(4):
        row, col = divmod(index, 2)
        block = image[:, 2 * row:2 * row + 2, 3 * col:3 * col + 3]
        np.testing.assert_array_equal(patches[index], block.reshape(-1))
    np.testing.assert_array_equal(unpatchify(torch.as_tensor(patches), config).numpy(), image)


def test_patchify_constant_image():
    patches = patchify(torch.full((3, 32, 32), 0.25), ModelConfig())
    assert torch.all(patches == 0.25)


def test_patchify_errors():
    config = ModelConfig()
    with pytest.raises(ConfigurationError):
        patchify(torch.rand(1, 32, 32), config)
    with pytest.raises(ConfigurationError):
        patchify(torch.rand(3, 30, 32), config)


def test_embed_zero_patches(tiny_config):
    embedding = PatchEmbedding(tiny_config)
    with torch.no_grad():
        embedding.positional_encoding.zero_()
    Z = embedding(torch.zeros(3, 8, 8))
    assert tuple(Z.shape) == (5, 8)
    assert torch.equal(Z[0], embedding.class_token)
    assert torch.all(Z[1:] == 0)


def test_embed_zero_projection(tiny_config):
    embedding = PatchEmbedding(tiny_config)
    with torch.no_grad():
        embedding.projection.zero_()
    Z = embedding(torch.rand(3, 8, 8))
    expected = embedding.positional_encoding.clone()
    expected[0] += embedding.class_token
    assert torch.allclose(Z, expected)


def test_embed_matches_loop_oracle():
    rng = np.random.default_rng(1)
    patches = rng.standard_normal((4, 6))
    projection = rng.standard_normal((5, 6))
    class_token = rng.standard_normal(5)
    positional = rng.standard_normal((5, 5))
    Z = embed(*(torch.as_tensor(a) for a in (patches, projection, class_token, positional))).numpy()

    expected = np.zeros((5, 5))
    for i in range(5):
        expected[0, i] = class_token[i] + positional[0, i]
    for n in range(4):
        for i in range(5):
            total = 0.0
            for j in range(6):
                total += projection[i, j] * patches[n, j]
            expected[n + 1, i] = total + positional[n + 1, i]
    np.testing.assert_allclose(Z, expected, atol=1e-12)


def test_embed_patches_shape_check(tiny_config):
    embedding = PatchEmbedding(tiny_config)
    with pytest.raises(ConfigurationError):
        embedding.embed_patches(torch.zeros(5, 48))
