#!/usr/bin/python
"""
Crateseg: white-box transformers built from compression and sparsification steps,
with tools to train them and to study the segmentation that emerges in their attention

Copyright (C) 2023 O'Mara Group
License: MIT
Author: Richard Morris
"""

__version__ = "1.0"
__author__ = "Richard Morris"
__license__ = "MIT"

from .config import ARCHITECTURES, ModelConfig, RunConfig
from .exceptions import (
    CheckpointError,
    CheckpointVersionError,
    ChecksumError,
    ConfigurationError,
    ImageFormatError,
    NumericalError,
)
from .embedding import PatchEmbedding, patchify
from .blocks import ISTA, MHSA, MLP, MSSA
from .model import CrateModel, ForwardTrace, build_model
from .objective import CodingRateParams, RateReport, coding_rate, coding_rate_subspaces, rate_report
from .data import Sample, SynthDataConfig, generate_dataset, load_dataset
from .training import Lion, OptimizerConfig, TrainState, train
from .attention import AttentionMap, SegMask, attention_to_mask, class_token_attention, miou
from .pca import PCAResult, pca_patch_visualization
from .maskcut import MaskCutConfig, affinity_matrix, maskcut, ncut_bipartition
from .metrics import APReport, average_precision
from .checkpoint import load_checkpoint, save_checkpoint
from .reports import MetricsReport
from .analysis import maskcut_analysis, pca_analysis, rate_reports, segmentation_miou
