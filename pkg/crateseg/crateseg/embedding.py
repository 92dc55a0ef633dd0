import logging
import math
from typing import Union

import numpy as np
import torch
import torch.nn as nn
from einops import rearrange

from .config import ModelConfig
from .exceptions import ConfigurationError

logger = logging.getLogger(__name__)


def patchify(image: Union[np.ndarray, torch.Tensor], config: ModelConfig) -> torch.Tensor:
    """
    Split an image into non-overlapping patches.

    Parameters
    ----------
    image : array of shape (C, H, W) or (B, C, H, W)
    config : ModelConfig

    Returns
    -------
    torch.Tensor
        Shape (..., N, D_patch). Patch i is the i-th patch in row-major order over
        the patch grid, flattened in (channel, row, col) order.
    """
    image = torch.as_tensor(image)
    if image.dim() < 3:
        raise ConfigurationError(f"Expected an image of shape (C, H, W), got {tuple(image.shape)}")
    channels, height, width = image.shape[-3:]
    patch_h, patch_w = config.patch_shape
    if channels != config.image_shape[0]:
        raise ConfigurationError(f"Image has {channels} channels, config expects {config.image_shape[0]}")
    if height % patch_h or width % patch_w:
        raise ConfigurationError(
            f"Patch shape {config.patch_shape} does not divide image size {(height, width)}"
        )
    return rearrange(image, "... c (gh ph) (gw pw) -> ... (gh gw) (c ph pw)", ph=patch_h, pw=patch_w)


def unpatchify(patches: torch.Tensor, config: ModelConfig) -> torch.Tensor:
    """ Inverse of patchify for a full patch set """
    rows, cols = config.grid_shape
    patch_h, patch_w = config.patch_shape
    return rearrange(
        patches, "... (gh gw) (c ph pw) -> ... c (gh ph) (gw pw)",
        gh=rows, gw=cols, ph=patch_h, pw=patch_w,
    )


def embed(
    patches: torch.Tensor,
    projection: torch.Tensor,
    class_token: torch.Tensor,
    positional_encoding: torch.Tensor,
) -> torch.Tensor:
    """ Z^1 = [z_cls, W_patch x_1, ..., W_patch x_N] + E_pos, token-major """
    projected = patches @ projection.T
    cls = class_token.expand(*projected.shape[:-2], 1, class_token.shape[-1])
    return torch.cat([cls, projected], dim=-2) + positional_encoding


class PatchEmbedding(nn.Module):
    """
    The f^0 operator: patch projection, class token and positional encoding.

    Attributes
    ----------
    projection : nn.Parameter
        W_patch, shape (d, D_patch).
    class_token : nn.Parameter
        Initial class token, shape (d,).
    positional_encoding : nn.Parameter
        E_pos, shape (N + 1, d); row 0 belongs to the class token.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.projection = nn.Parameter(torch.empty(config.model_dim, config.patch_dim))
        self.class_token = nn.Parameter(torch.empty(config.model_dim))
        self.positional_encoding = nn.Parameter(torch.empty(config.num_tokens, config.model_dim))
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.kaiming_uniform_(self.projection, a=math.sqrt(5))
        nn.init.normal_(self.class_token, std=0.02)
        nn.init.normal_(self.positional_encoding, std=0.02)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.embed_patches(patchify(image, self.config))

    def embed_patches(self, patches: torch.Tensor) -> torch.Tensor:
        if patches.shape[-2:] != (self.config.num_patches, self.config.patch_dim):
            raise ConfigurationError(
                f"Expected patches of shape (N, D_patch) = {(self.config.num_patches, self.config.patch_dim)}, "
                f"got {tuple(patches.shape[-2:])}"
            )
        return embed(patches, self.projection, self.class_token, self.positional_encoding)
