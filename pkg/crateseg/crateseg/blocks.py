"""
Token-mixing and token-wise blocks of a CRATE layer and its ablation variants.

Every block works on token-major tensors of shape (..., N + 1, d). The
functional forms take raw tensors so they can be checked against independent
oracles; the modules own the parameters.
"""
import logging
import math
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .config import ModelConfig

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-6


class AttentionOutput(NamedTuple):
    output: torch.Tensor
    attention: torch.Tensor
    queries: torch.Tensor
    keys: torch.Tensor


def layer_norm(
    Z: torch.Tensor,
    weight: Optional[torch.Tensor] = None,
    bias: Optional[torch.Tensor] = None,
    eps: float = LAYER_NORM_EPS,
) -> torch.Tensor:
    return F.layer_norm(Z, (Z.shape[-1],), weight, bias, eps)


def split_heads(projected: torch.Tensor, num_heads: int) -> torch.Tensor:
    return rearrange(projected, "... n (h p) -> ... h n p", h=num_heads)


def merge_heads(heads: torch.Tensor) -> torch.Tensor:
    return rearrange(heads, "... h n p -> ... n (h p)")


def scaled_attention(queries: torch.Tensor, keys: torch.Tensor, scale: float) -> torch.Tensor:
    """ Row-stochastic attention softmax(q k^T * scale) per head """
    dots = torch.matmul(queries, keys.transpose(-1, -2)) * scale
    return dots.softmax(dim=-1)


def mssa_forward(
    Z: torch.Tensor,
    subspaces: torch.Tensor,
    out_weight: torch.Tensor,
    out_bias: Optional[torch.Tensor],
    num_heads: int,
) -> AttentionOutput:
    """
    Multi-head subspace self-attention.

    Parameters
    ----------
    Z : torch.Tensor
        Tokens, shape (..., N + 1, d).
    subspaces : torch.Tensor
        Shape (K * p, d); rows k*p:(k+1)*p hold U_k^T.
    out_weight, out_bias : torch.Tensor
        Output projection, (d, K * p) and (d,).
    num_heads : int
        K.

    Returns
    -------
    AttentionOutput
        output (..., N + 1, d); attention (..., K, N + 1, N + 1); queries and
        keys are both the per-head projections U_k^T z.
    """
    head_dim = subspaces.shape[0] // num_heads
    w = split_heads(Z @ subspaces.T, num_heads)
    attention = scaled_attention(w, w, head_dim ** -0.5)
    out = merge_heads(torch.matmul(attention, w))
    return AttentionOutput(F.linear(out, out_weight, out_bias), attention, w, w)


def mhsa_forward(
    Z: torch.Tensor,
    query_weight: torch.Tensor,
    key_weight: torch.Tensor,
    value_weight: torch.Tensor,
    out_weight: torch.Tensor,
    out_bias: Optional[torch.Tensor],
    num_heads: int,
) -> AttentionOutput:
    head_dim = query_weight.shape[0] // num_heads
    q = split_heads(Z @ query_weight.T, num_heads)
    k = split_heads(Z @ key_weight.T, num_heads)
    v = split_heads(Z @ value_weight.T, num_heads)
    attention = scaled_attention(q, k, head_dim ** -0.5)
    out = merge_heads(torch.matmul(attention, v))
    return AttentionOutput(F.linear(out, out_weight, out_bias), attention, q, k)


def ista_forward(
    Z: torch.Tensor,
    dictionary: torch.Tensor,
    step: float,
    sparsity: float,
    activation: str = "relu",
) -> torch.Tensor:
    """
    One proximal-gradient step of the LASSO min_A 1/2 ||Z - D A||^2 + lambda ||A||_1
    started at A = Z.

    With ``activation="relu"`` the step is the nonnegative variant
    ReLU(Z + eta D^T (Z - D Z) - eta lambda); with ``"soft"`` the sign is kept and
    entries are soft-thresholded at eta lambda. In token-major layout D^T (Z - D Z)
    becomes (Z - Z D^T) D.
    """
    update = Z + step * ((Z - Z @ dictionary.T) @ dictionary)
    if activation == "soft":
        return F.softshrink(update, step * sparsity)
    return F.relu(update - step * sparsity)


def mlp_forward(
    Z: torch.Tensor,
    fc1_weight: torch.Tensor,
    fc1_bias: Optional[torch.Tensor],
    fc2_weight: torch.Tensor,
    fc2_bias: Optional[torch.Tensor],
) -> torch.Tensor:
    """ ViT perceptron with GELU and an outer residual """
    hidden = F.gelu(F.linear(Z, fc1_weight, fc1_bias))
    return Z + F.linear(hidden, fc2_weight, fc2_bias)


def orthonormal_subspaces(num_heads: int, head_dim: int, model_dim: int, generator=None) -> torch.Tensor:
    """ (K * p, d) with orthonormal rows, so each U_k has orthonormal columns and U_j^T U_k = 0 for j != k """
    gaussian = torch.randn(model_dim, model_dim, generator=generator)
    q, r = torch.linalg.qr(gaussian)
    q = q * torch.sign(torch.diagonal(r))
    return q[:, : num_heads * head_dim].T.contiguous()


class MSSA(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.num_heads = config.num_heads
        self.head_dim = config.head_dim
        self.scale = config.head_dim ** -0.5
        self.subspace_init = config.subspace_init
        inner_dim = config.num_heads * config.head_dim
        self.subspaces = nn.Parameter(torch.empty(inner_dim, config.model_dim))
        self.to_out = nn.Linear(inner_dim, config.model_dim)
        self.reset_parameters()

    def reset_parameters(self):
        if self.subspace_init == "orthonormal":
            with torch.no_grad():
                self.subspaces.copy_(
                    orthonormal_subspaces(self.num_heads, self.head_dim, self.subspaces.shape[1])
                )
        else:
            nn.init.kaiming_uniform_(self.subspaces, a=math.sqrt(5))

    @property
    def bases(self) -> torch.Tensor:
        """ The local signal model as a (K, d, p) stack of U_k """
        return rearrange(self.subspaces, "(h p) d -> h d p", h=self.num_heads)

    def forward(self, Z: torch.Tensor) -> AttentionOutput:
        return mssa_forward(Z, self.subspaces, self.to_out.weight, self.to_out.bias, self.num_heads)


class MHSA(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.num_heads = config.num_heads
        self.head_dim = config.head_dim
        self.scale = config.head_dim ** -0.5
        inner_dim = config.num_heads * config.head_dim
        self.to_q = nn.Linear(config.model_dim, inner_dim, bias=False)
        self.to_k = nn.Linear(config.model_dim, inner_dim, bias=False)
        self.to_v = nn.Linear(config.model_dim, inner_dim, bias=False)
        self.to_out = nn.Linear(inner_dim, config.model_dim)

    def forward(self, Z: torch.Tensor) -> AttentionOutput:
        return mhsa_forward(
            Z,
            self.to_q.weight,
            self.to_k.weight,
            self.to_v.weight,
            self.to_out.weight,
            self.to_out.bias,
            self.num_heads,
        )


class ISTA(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.step = config.ista_step
        self.sparsity = config.sparsity
        self.activation = config.ista_activation
        self.dictionary = nn.Parameter(torch.empty(config.model_dim, config.model_dim))
        nn.init.kaiming_uniform_(self.dictionary, a=math.sqrt(5))

    def forward(self, Z: torch.Tensor) -> torch.Tensor:
        return ista_forward(Z, self.dictionary, self.step, self.sparsity, self.activation)


class MLP(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.fc1 = nn.Linear(config.model_dim, config.mlp_hidden)
        self.fc2 = nn.Linear(config.mlp_hidden, config.model_dim)

    def forward(self, Z: torch.Tensor) -> torch.Tensor:
        return mlp_forward(Z, self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias)
