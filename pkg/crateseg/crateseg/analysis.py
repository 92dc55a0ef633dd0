"""
Dataset-level emergence pipelines built on a trained model: attention maps,
segmentation mIoU, PCA visualization, MaskCut AP and per-layer coding rates.
"""
import logging
from collections import defaultdict
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch
from einops import rearrange
from tqdm import tqdm

from .attention import (
    DEFAULT_TOP_FRACTION,
    AttentionMap,
    attention_to_mask,
    class_token_attention,
    miou,
    patch_features,
    random_masks,
    top_count,
)
from .data import Sample
from .exceptions import ConfigurationError
from .maskcut import MaskCutConfig, affinity_from_features, maskcut
from .metrics import Prediction, average_precision
from .model import CrateModel, ForwardTrace
from .objective import CodingRateParams, RateReport, rate_report
from .pca import PCAResult, pca_patch_visualization
from .training import stack_samples

logger = logging.getLogger(__name__)


def default_layer(num_layers: int) -> int:
    """ The penultimate layer (1-based), or the only layer of a one-layer model """
    if num_layers < 1:
        raise ConfigurationError("The model has no layers to analyse")
    return max(num_layers - 1, 1)


def resolve_layers(layer: Union[None, int, str], num_layers: int) -> List[int]:
    """ ``None`` gives the penultimate layer, ``"all"`` every layer, an integer that layer (1-based) """
    if layer is None:
        return [default_layer(num_layers)]
    if str(layer).lower() == "all":
        return list(range(1, num_layers + 1))
    try:
        value = int(layer)
    except ValueError:
        raise ConfigurationError(f"Layer must be an integer or 'all', got '{layer}'") from None
    if not 1 <= value <= num_layers:
        raise ConfigurationError(f"Layer {value} is out of range 1..{num_layers}")
    return [value]


@torch.no_grad()
def run_traces(model: CrateModel, samples: Sequence[Sample], batch_size: int = 128) -> List[ForwardTrace]:
    """ Forward traces for the samples, one batched trace per chunk of ``batch_size`` """
    model.eval()
    images, _ = stack_samples(samples, model.head.weight.dtype)
    return [
        model(images[start:start + batch_size], want_trace=True).trace.detach()
        for start in range(0, len(images), batch_size)
    ]


def _iterate(traces: List[ForwardTrace], batch_size: int):
    """ (position, trace, index within trace) for every sample """
    for chunk, trace in enumerate(traces):
        for offset in range(trace.inputs[0].shape[0]):
            yield chunk * batch_size + offset, trace, offset


def class_ground_truth(sample: Sample) -> Dict[str, np.ndarray]:
    return {sample.family: sample.patch_gt}


def attention_maps(trace: ForwardTrace, layer: int, sample: int = 0) -> List[AttentionMap]:
    num_heads = trace.queries[trace.check_layer(layer)].shape[-3]
    return [class_token_attention(trace, layer, head, sample) for head in range(num_heads)]


def _most_frequent(heads: List[int], num_heads: int) -> Optional[int]:
    if not heads:
        return None
    return int(np.bincount(heads, minlength=num_heads).argmax())


def segmentation_miou(
    model: CrateModel,
    samples: Sequence[Sample],
    layer: int,
    fraction: float = DEFAULT_TOP_FRACTION,
    seed: int = 0,
    batch_size: int = 128,
    progress: bool = False,
) -> Dict:
    """
    Best-head attention mIoU against the patch ground truth at one layer.

    The result holds the mean over images, the mean per class, and the same
    score for uniformly random masks of the same size (``random_baseline``).
    ``head`` is the head most often chosen as best over all images and
    ``class_heads`` the same per class; ties go to the lowest head index.
    """
    traces = run_traces(model, samples, batch_size)
    rng = np.random.default_rng(seed)
    num_heads = model.config.num_heads
    num_patches = model.config.num_patches
    per_image, baseline = [], []
    per_class = defaultdict(list)
    best_heads = defaultdict(list)
    for position, trace, offset in tqdm(
        _iterate(traces, batch_size), total=len(samples), desc=f"mIoU layer {layer}", disable=not progress
    ):
        sample = samples[position]
        masks = [attention_to_mask(a, fraction) for a in attention_maps(trace, layer, offset)]
        report = miou(masks, class_ground_truth(sample), layer)
        if report.per_class:
            per_image.append(report.miou)
            per_class[sample.family].append(report.per_class[sample.family])
            best_heads[sample.family].append(report.heads[sample.family])
        random_report = miou(random_masks(num_patches, fraction, num_heads, rng), class_ground_truth(sample))
        if random_report.per_class:
            baseline.append(random_report.miou)
    return {
        "layer": layer,
        "P": fraction,
        "head": _most_frequent([head for heads in best_heads.values() for head in heads], num_heads),
        "class_heads": {name: _most_frequent(heads, num_heads) for name, heads in sorted(best_heads.items())},
        "positives": top_count(fraction, num_patches),
        "miou": float(np.mean(per_image)) if per_image else float("nan"),
        "per_class": {name: float(np.mean(values)) for name, values in sorted(per_class.items())},
        "random_baseline": float(np.mean(baseline)) if baseline else float("nan"),
        "images": len(per_image),
    }


def maskcut_analysis(
    model: CrateModel,
    samples: Sequence[Sample],
    layer: int,
    cfg: Optional[MaskCutConfig] = None,
    batch_size: int = 128,
    progress: bool = False,
) -> Dict:
    """ MaskCut on every image at one layer, scored with class-agnostic AP against the patch ground truth """
    cfg = cfg or MaskCutConfig()
    traces = run_traces(model, samples, batch_size)
    predictions, ground_truth, results = [], {}, []
    early = 0
    for position, trace, offset in tqdm(
        _iterate(traces, batch_size), total=len(samples), desc=f"MaskCut layer {layer}", disable=not progress
    ):
        sample = samples[position]
        affinity = affinity_from_features(patch_features(trace, layer, offset), cfg.tau, cfg.normalize)
        result = maskcut(affinity, cfg, model.config.grid_shape)
        early += result.early_stopped
        results.append(result)
        ground_truth[position] = [sample.patch_gt] if sample.patch_gt.any() else []
        predictions.extend(
            Prediction(image=position, mask=mask.bits, score=score)
            for mask, score in zip(result.masks, result.scores)
        )
    ap = average_precision(predictions, ground_truth)
    return {
        "layer": layer,
        "n": cfg.num_objects,
        "tau": cfg.tau,
        "ap50": ap.ap50,
        "ap75": ap.ap75,
        "ap": ap.ap,
        "masks": len(predictions),
        "early_stopped": early,
        "results": results,
    }


def _layer_bases(model: CrateModel, layer: int) -> np.ndarray:
    attention = model.layers[layer - 1].attention
    weight = attention.subspaces if hasattr(attention, "subspaces") else attention.to_q.weight
    return rearrange(weight.detach().double(), "(h p) d -> h d p", h=model.config.num_heads).numpy()


def rate_reports(
    model: CrateModel,
    samples: Sequence[Sample],
    layers: Sequence[int],
    params: Optional[CodingRateParams] = None,
    batch_size: int = 128,
) -> List[RateReport]:
    """
    Coding rates of the normalized layer inputs under each layer's subspaces,
    averaged over samples (l0 rounded to the nearest integer).
    """
    params = params or CodingRateParams(epsilon=model.config.epsilon, sparsity=model.config.sparsity)
    traces = run_traces(model, samples, batch_size)
    reports = []
    for layer in layers:
        bases = _layer_bases(model, layer)
        per_sample = [
            rate_report(trace.normalized[layer - 1][offset].double().numpy(), bases, params, layer)
            for _, trace, offset in _iterate(traces, batch_size)
        ]
        reports.append(RateReport(
            R=float(np.mean([r.R for r in per_sample])),
            Rc=float(np.mean([r.Rc for r in per_sample])),
            l0=int(round(np.mean([r.l0 for r in per_sample]))),
            l1=float(np.mean([r.l1 for r in per_sample])),
            objective=float(np.mean([r.objective for r in per_sample])),
            layer=layer,
        ))
        logger.info("Layer %d: R %.4f, Rc %.4f", layer, reports[-1].R, reports[-1].Rc)
    return reports


def pca_analysis(
    model: CrateModel,
    samples: Sequence[Sample],
    layer: int,
    threshold: float = 0.5,
    batch_size: int = 128,
) -> PCAResult:
    """ PCA visualization of the patch features of a set of images, expected to share a class """
    traces = run_traces(model, samples, batch_size)
    features = [patch_features(trace, layer, offset) for _, trace, offset in _iterate(traces, batch_size)]
    return pca_patch_visualization(features, threshold, model.config.grid_shape)
