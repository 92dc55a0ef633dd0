import logging
import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ConfigurationError, NumericalError

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5
MIN_FOREGROUND = 3


@dataclass
class PCAResult:
    """
    Output of the patch-feature PCA visualization.

    Attributes
    ----------
    rgb : list of np.ndarray
        One (3, rows, cols) image per input, values in [0, 1]; background tokens are black.
    foreground : list of np.ndarray
        Boolean (N,) selection per input.
    first_component : np.ndarray
        u_0, used to separate foreground from background.
    components : np.ndarray
        (3, D) rows u_1, u_2, u_3 of the foreground PCA.
    eigenvalues : np.ndarray
        The three leading eigenvalues of the foreground covariance.
    """
    rgb: List[np.ndarray]
    foreground: List[np.ndarray]
    first_component: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray


def gram_eigenpairs(X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """ Eigenvalues (descending) and eigenvectors (columns) of X^T X """
    values, vectors = np.linalg.eigh(X.T @ X)
    return values[::-1], vectors[:, ::-1]


def _orient(vectors: np.ndarray) -> np.ndarray:
    """ Flip each column so its largest-magnitude entry is positive """
    rows = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[rows, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1
    return vectors * signs


def pca_patch_visualization(
    features: Sequence[np.ndarray],
    threshold: float = DEFAULT_THRESHOLD,
    grid_shape: Optional[Tuple[int, int]] = None,
) -> PCAResult:
    """
    Color patch tokens of a set of images by their leading principal components.

    Features of all images are stacked and rescaled so the RMS token norm is 1.
    The top eigenvector u_0 of the uncentered Gram matrix, signed so projections
    sum to a nonnegative value, splits foreground (projection > ``threshold``)
    from background. The three leading principal directions of the centered
    foreground tokens give the RGB channels, min-max normalized over the whole set.

    Parameters
    ----------
    features : sequence of np.ndarray
        One (N, D) per-token feature matrix per image, D >= 3.
    threshold : float
        Hard threshold on the u_0 projection.
    grid_shape : tuple, optional
        Patch grid; defaults to a square grid.
    """
    if len(features) == 0:
        raise ConfigurationError("PCA visualization needs at least one image")
    if len(features) < 2:
        warnings.warn("PCA visualization is meant for a set of at least two images of one class")
    features = [np.asarray(f, dtype=np.float64) for f in features]
    num_tokens, dim = features[0].shape
    if any(f.shape != (num_tokens, dim) for f in features):
        raise ConfigurationError("All feature matrices must share the shape (N, D)")
    if dim < 3:
        raise ConfigurationError(f"Feature dimension must be at least 3, got {dim}")
    if grid_shape is None:
        side = int(round(np.sqrt(num_tokens)))
        grid_shape = (side, num_tokens // side)
    if grid_shape[0] * grid_shape[1] != num_tokens:
        raise ConfigurationError(f"Grid {grid_shape} does not hold {num_tokens} tokens")

    X = np.vstack(features)
    rms = np.sqrt(np.mean(np.sum(X ** 2, axis=1)))
    if rms == 0:
        raise NumericalError("foreground selection empty: all features are zero")
    X = X / rms

    _, vectors = gram_eigenpairs(X)
    first = vectors[:, 0]
    if (X @ first).sum() < 0:
        first = -first
    keep = X @ first > threshold
    if keep.sum() < MIN_FOREGROUND:
        raise NumericalError(
            f"foreground selection empty: {int(keep.sum())} tokens exceed threshold {threshold}"
        )

    kept = X[keep]
    centered = kept - kept.mean(axis=0)
    eigenvalues, sub_vectors = gram_eigenpairs(centered)
    components = _orient(sub_vectors[:, :3]).T
    projections = centered @ components.T
    low, high = projections.min(axis=0), projections.max(axis=0)
    span = np.where(high > low, high - low, 1.0)
    colors = np.zeros((X.shape[0], 3))
    colors[keep] = (projections - low) / span

    rgb, foreground = [], []
    for i in range(len(features)):
        block = slice(i * num_tokens, (i + 1) * num_tokens)
        rgb.append(colors[block].T.reshape(3, *grid_shape))
        foreground.append(keep[block])
    logger.debug("PCA foreground keeps %d of %d tokens", int(keep.sum()), keep.size)
    return PCAResult(
        rgb=rgb,
        foreground=foreground,
        first_component=first,
        components=components,
        eigenvalues=eigenvalues[:3] / max(len(kept) - 1, 1),
    )
