"""
Class-token attention maps and coarse segmentation scored by best-head mIoU.
"""
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch
from einops import rearrange

from .exceptions import ConfigurationError
from .model import ForwardTrace

logger = logging.getLogger(__name__)

DEFAULT_TOP_FRACTION = 0.6


@dataclass
class AttentionMap:
    """ Attention of the class token over the N patch tokens for one head of one layer (1-based) """
    values: np.ndarray
    head: int
    layer: int

    @property
    def num_patches(self) -> int:
        return self.values.shape[0]


@dataclass
class SegMask:
    bits: np.ndarray
    source: str = ""

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)

    def to_dict(self) -> Dict:
        return {"source": self.source, "bits": self.bits.astype(int).tolist()}


@dataclass
class IoUReport:
    """
    Best-head IoU per class and their mean.

    ``heads`` gives the head chosen for each class; classes whose ground truth
    is empty are listed in ``skipped`` and left out of the mean.
    """
    per_class: Dict[str, float]
    heads: Dict[str, int]
    miou: float
    layer: Optional[int] = None
    skipped: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        data = {
            "miou": self.miou,
            "per_class": dict(self.per_class),
            "heads": dict(self.heads),
            "skipped": list(self.skipped),
        }
        if self.layer is not None:
            data["layer"] = self.layer
        return data


def _select_sample(tensor: torch.Tensor, sample: int, per_token_dims: int) -> torch.Tensor:
    if tensor.dim() == per_token_dims + 1:
        if not 0 <= sample < tensor.shape[0]:
            raise ConfigurationError(f"Sample {sample} is out of range 0..{tensor.shape[0] - 1}")
        return tensor[sample]
    if sample != 0:
        raise ConfigurationError(f"Trace holds a single input, got sample index {sample}")
    return tensor


def patch_features(trace: ForwardTrace, layer: int, sample: int = 0, include_class_token: bool = False) -> np.ndarray:
    """
    Aggregated per-token head features [U_1^T z; ...; U_K^T z] at a layer, shape (N, K p).

    For MSSA layers keys and queries coincide; for MHSA layers these are the key features.
    """
    keys = _select_sample(trace.keys[trace.check_layer(layer)], sample, 3)
    features = rearrange(keys.detach(), "h n p -> n (h p)").double().numpy()
    return features if include_class_token else features[1:]


def class_token_attention(trace: ForwardTrace, layer: int, head: int, sample: int = 0) -> AttentionMap:
    """
    Softmax over patch tokens of <k_i, q_cls> scaled by p^-1/2; the class token is
    excluded from the normalization. ``layer`` is 1-based, ``head`` 0-based.
    """
    index = trace.check_layer(layer)
    queries = _select_sample(trace.queries[index], sample, 3).detach().double()
    keys = _select_sample(trace.keys[index], sample, 3).detach().double()
    num_heads = queries.shape[0]
    if not 0 <= head < num_heads:
        raise ConfigurationError(f"Head {head} is out of range 0..{num_heads - 1}")
    logits = keys[head, 1:] @ queries[head, 0] * trace.scale
    return AttentionMap(logits.softmax(dim=-1).numpy(), head=head, layer=layer)


def top_count(fraction: float, num_patches: int) -> int:
    return int(math.ceil(fraction * num_patches - 1e-9))


def attention_to_mask(attention: AttentionMap, fraction: float = DEFAULT_TOP_FRACTION) -> SegMask:
    """ Keep the ceil(P N) largest entries; among equal values the lower patch index wins """
    if not 0 < fraction <= 1:
        raise ConfigurationError(f"Top fraction must lie in (0, 1], got {fraction}")
    values = np.asarray(attention.values)
    order = np.argsort(-values, kind="stable")
    bits = np.zeros(values.shape[0], dtype=bool)
    bits[order[:top_count(fraction, values.shape[0])]] = True
    return SegMask(bits, source=f"layer{attention.layer}/head{attention.head}/top{fraction:g}")


def iou(mask: np.ndarray, target: np.ndarray) -> float:
    """ |A & B| / |A | B|; two empty masks count as identical """
    mask = np.asarray(mask, dtype=bool)
    target = np.asarray(target, dtype=bool)
    union = np.logical_or(mask, target).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(mask, target).sum() / union)


def miou(
    head_masks: Sequence[SegMask],
    ground_truth: Mapping[str, np.ndarray],
    layer: Optional[int] = None,
) -> IoUReport:
    """
    For every class take the IoU of its best-matching head, then average over classes.

    Parameters
    ----------
    head_masks : sequence of SegMask
        One mask per head of the layer, on the patch grid.
    ground_truth : mapping
        Class name to boolean patch mask.
    layer : int, optional
        Recorded in the report.
    """
    if len(head_masks) == 0:
        raise ConfigurationError("At least one head mask is required")
    per_class, heads, skipped = {}, {}, []
    for name in sorted(ground_truth):
        target = np.asarray(ground_truth[name], dtype=bool)
        if target.shape != head_masks[0].bits.shape:
            raise ConfigurationError(
                f"Ground truth for '{name}' has shape {target.shape}, masks have {head_masks[0].bits.shape}"
            )
        if not target.any():
            skipped.append(name)
            continue
        scores = [iou(mask.bits, target) for mask in head_masks]
        best = int(np.argmax(scores))
        per_class[name] = scores[best]
        heads[name] = best
    if skipped:
        warnings.warn(f"Skipped classes with empty ground truth: {', '.join(skipped)}")
    if per_class:
        value = float(np.mean(list(per_class.values())))
    else:
        warnings.warn("No class has a nonempty ground truth; mIoU is undefined")
        value = float("nan")
    return IoUReport(per_class=per_class, heads=heads, miou=value, layer=layer, skipped=skipped)


def random_masks(num_patches: int, fraction: float, count: int, rng: np.random.Generator) -> List[SegMask]:
    """ Uniformly random masks with exactly ceil(P N) true entries """
    size = top_count(fraction, num_patches)
    masks = []
    for i in range(count):
        bits = np.zeros(num_patches, dtype=bool)
        bits[rng.choice(num_patches, size=size, replace=False)] = True
        masks.append(SegMask(bits, source=f"random{i}"))
    return masks
