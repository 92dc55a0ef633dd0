import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Tuple

import torch
import torch.nn as nn

from .blocks import ISTA, LAYER_NORM_EPS, MHSA, MLP, MSSA
from .config import ModelConfig
from .embedding import PatchEmbedding
from .exceptions import ConfigurationError

logger = logging.getLogger(__name__)


@dataclass
class ForwardTrace:
    """
    Every intermediate representation of one forward pass.

    Lists are indexed by ``layer - 1``: ``inputs[0]`` is Z^1 (the embedding
    output) and ``inputs[L]`` is Z^{L+1}. ``normalized[l]`` is the LayerNorm'd
    input fed to the attention block, ``halves[l]`` is Z^{l+1/2}, and
    ``attentions[l]`` has shape (..., K, N + 1, N + 1).
    """
    inputs: List[torch.Tensor] = field(default_factory=list)
    normalized: List[torch.Tensor] = field(default_factory=list)
    halves: List[torch.Tensor] = field(default_factory=list)
    attentions: List[torch.Tensor] = field(default_factory=list)
    queries: List[torch.Tensor] = field(default_factory=list)
    keys: List[torch.Tensor] = field(default_factory=list)
    scale: float = 1.0

    @property
    def num_layers(self) -> int:
        return len(self.attentions)

    def check_layer(self, layer: int) -> int:
        """ Validate a 1-based layer index and return the list position """
        if not 1 <= layer <= self.num_layers:
            raise ConfigurationError(f"Layer {layer} is out of range 1..{self.num_layers}")
        return layer - 1

    def detach(self) -> "ForwardTrace":
        return ForwardTrace(
            *[[t.detach() for t in getattr(self, name)]
              for name in ("inputs", "normalized", "halves", "attentions", "queries", "keys")],
            scale=self.scale,
        )


class ModelOutput(NamedTuple):
    tokens: torch.Tensor
    logits: torch.Tensor
    trace: Optional[ForwardTrace]


class CrateLayer(nn.Module):
    """
    One layer f^l: Z_n = LN1(Z), Z^{l+1/2} = Z_n + attention(Z_n), Z^{l+1} = block(LN2(Z^{l+1/2})).

    The residual comes from the normalized input. The ISTA block carries its own
    skip connection inside the proximal step, so no outer residual is added.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(config.model_dim, eps=LAYER_NORM_EPS)
        self.ln2 = nn.LayerNorm(config.model_dim, eps=LAYER_NORM_EPS)
        self.attention = MSSA(config) if config.attention_variant == "MSSA" else MHSA(config)
        self.block = ISTA(config) if config.mlp_variant == "ISTA" else MLP(config)

    def forward(self, Z: torch.Tensor) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
        return crate_layer_forward(Z, self)


def crate_layer_forward(Z: torch.Tensor, layer: CrateLayer) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    normalized = layer.ln1(Z)
    attended = layer.attention(normalized)
    half = normalized + attended.output
    out = layer.block(layer.ln2(half))
    entries = {
        "normalized": normalized,
        "half": half,
        "attention": attended.attention,
        "queries": attended.queries,
        "keys": attended.keys,
    }
    return out, entries


class CrateModel(nn.Module):
    """
    CRATE white-box transformer (or one of its ablation variants) for image classification.

    Parameters
    ----------
    config : ModelConfig
        Architecture hyperparameters; ``attention_variant`` and ``mlp_variant``
        select the blocks used in every layer.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.embedding = PatchEmbedding(config)
        self.layers = nn.ModuleList([CrateLayer(config) for _ in range(config.num_layers)])
        self.head = nn.Linear(config.model_dim, config.num_classes, bias=False)

    def forward(self, x: torch.Tensor, want_trace: bool = False) -> ModelOutput:
        return model_forward(x, self, want_trace)

    def tokens_from_input(self, x: torch.Tensor) -> torch.Tensor:
        config = self.config
        x = torch.as_tensor(x, dtype=self.head.weight.dtype)
        if x.dim() >= 3 and tuple(x.shape[-3:]) == config.image_shape:
            return self.embedding((x - config.pixel_mean) / config.pixel_std)
        if x.dim() >= 2 and tuple(x.shape[-2:]) == (config.num_tokens, config.model_dim):
            return x
        raise ConfigurationError(
            f"Input of shape {tuple(x.shape)} is neither an image {config.image_shape} "
            f"nor a token matrix {(config.num_tokens, config.model_dim)}"
        )


def model_forward(x: torch.Tensor, model: CrateModel, want_trace: bool = False) -> ModelOutput:
    """
    Run f^0 followed by the L layers and the linear head on the class token.

    Parameters
    ----------
    x : torch.Tensor
        An image (..., C, H, W) or an already embedded token matrix (..., N + 1, d).
    model : CrateModel
    want_trace : bool
        Record every intermediate representation in a ForwardTrace.
    """
    Z = model.tokens_from_input(x)
    trace = ForwardTrace(scale=model.config.head_dim ** -0.5) if want_trace else None
    if trace is not None:
        trace.inputs.append(Z)
    for layer in model.layers:
        Z, entries = crate_layer_forward(Z, layer)
        if trace is not None:
            trace.inputs.append(Z)
            trace.normalized.append(entries["normalized"])
            trace.halves.append(entries["half"])
            trace.attentions.append(entries["attention"])
            trace.queries.append(entries["queries"])
            trace.keys.append(entries["keys"])
    logits = model.head(Z[..., 0, :])
    return ModelOutput(Z, logits, trace)


def build_model(config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> CrateModel:
    """ Construct a freshly initialised model; identical seeds give bit-identical parameters """
    torch.manual_seed(seed)
    model = CrateModel(config).to(dtype)
    logger.debug(
        "Built %s model with %d parameters",
        config.architecture or "custom",
        sum(p.numel() for p in model.parameters()),
    )
    return model
