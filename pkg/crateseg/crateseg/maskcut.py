"""
Patch affinity graphs, spectral Normalized Cuts and iterative MaskCut object discovery.
"""
import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.linalg
from scipy.sparse.csgraph import connected_components

from .attention import SegMask, patch_features
from .exceptions import ConfigurationError
from .model import ForwardTrace

logger = logging.getLogger(__name__)

# weight given to absent edges while solving the relaxed problem, keeping the graph connected
EDGE_EPS = 1e-5
ZERO_NORM = 1e-12


@dataclass
class AffinityMatrix:
    matrix: np.ndarray
    tau: float
    zero_tokens: List[int] = field(default_factory=list)

    @property
    def num_tokens(self) -> int:
        return self.matrix.shape[0]


@dataclass
class MaskCutConfig:
    """
    Parameters
    ----------
    num_objects : int
        n, the maximum number of masks extracted per image.
    tau : float
        Affinity threshold; entries below it are removed.
    normalize : bool
        Use cosine affinities (unit-normalized features).
    seed_component : bool
        Restrict each foreground to the connected component containing its seed token.
    """
    num_objects: int = 3
    tau: float = 0.15
    normalize: bool = True
    seed_component: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.num_objects < 1:
            raise ConfigurationError(f"num_objects must be at least 1, got {self.num_objects}")
        if not 0 <= self.tau < 1:
            raise ConfigurationError(f"tau must lie in [0, 1), got {self.tau}")

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "MaskCutConfig":
        return cls(**data)


@dataclass
class NCutResult:
    mask: np.ndarray
    value: float
    eigenvector: np.ndarray
    seed: int


@dataclass
class MaskCutResult:
    masks: List[SegMask]
    boxes: List[Tuple[int, int, int, int]]
    scores: List[float]
    ncut_values: List[float]
    early_stopped: bool = False

    def to_dict(self) -> Dict:
        return {
            "masks": [mask.bits.astype(int).tolist() for mask in self.masks],
            "boxes": [list(box) for box in self.boxes],
            "scores": list(self.scores),
            "ncut": list(self.ncut_values),
            "early_stopped": self.early_stopped,
        }


def affinity_from_features(features: np.ndarray, tau: float = 0.15, normalize: bool = True) -> AffinityMatrix:
    """
    M_ij = <f_i, f_j> over per-token features (N, D), cosine when ``normalize``.
    Entries below ``tau`` are set to exactly 0; zero-norm tokens get a zero row and column.
    """
    features = np.array(features, dtype=np.float64)
    norms = np.linalg.norm(features, axis=1)
    zero = norms < ZERO_NORM
    if zero.any():
        warnings.warn(f"Tokens {np.flatnonzero(zero).tolist()} have zero-norm features; their affinities are set to 0")
        features[zero] = 0.0
    if normalize:
        features[~zero] /= norms[~zero, None]
    matrix = features @ features.T
    matrix = 0.5 * (matrix + matrix.T)
    matrix[matrix < tau] = 0.0
    return AffinityMatrix(matrix, tau, np.flatnonzero(zero).tolist())


def affinity_matrix(
    trace: ForwardTrace, layer: int, tau: float = 0.15, normalize: bool = True, sample: int = 0
) -> AffinityMatrix:
    """ Patch affinity from the aggregated head features of a 1-based layer """
    return affinity_from_features(patch_features(trace, layer, sample), tau, normalize)


def ncut_value(matrix: np.ndarray, mask: np.ndarray) -> float:
    """ cut(A, B) / vol(A) + cut(A, B) / vol(B); a side with zero volume contributes 0 when the cut is 0 """
    mask = np.asarray(mask, dtype=bool)
    cut = matrix[mask][:, ~mask].sum()
    degrees = matrix.sum(axis=1)
    value = 0.0
    for volume in (degrees[mask].sum(), degrees[~mask].sum()):
        if volume > 0:
            value += cut / volume
        elif cut > 0:
            return float("inf")
    return float(value)


def has_edges(matrix: np.ndarray) -> bool:
    off_diagonal = matrix - np.diag(np.diag(matrix))
    return bool((off_diagonal > 0).any())


def ncut_bipartition(affinity) -> NCutResult:
    """
    Bipartition a graph with the second generalized eigenvector of (D - W) y = mu D y.

    The eigenvector is swept over its distinct sorted values and the threshold
    with the smallest NCut wins (the first one on ties). Absent edges weigh
    EDGE_EPS during the sweep. A token is active when its off-diagonal degree
    is positive; inactive tokens lose their self affinity in the relaxed graph
    and are always background. Foreground is the side holding the largest |y|
    among active tokens; if both sides hold it, the smaller side wins.

    Parameters
    ----------
    affinity : AffinityMatrix or np.ndarray
        Symmetric nonnegative (N, N) weights with at least one positive off-diagonal entry.
    """
    W = np.asarray(getattr(affinity, "matrix", affinity), dtype=np.float64)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ConfigurationError(f"Affinity must be a square matrix, got shape {W.shape}")
    if (W < 0).any() or not np.allclose(W, W.T, atol=1e-9):
        raise ConfigurationError("Affinity must be symmetric and nonnegative")
    if not has_edges(W):
        raise ConfigurationError("Affinity graph has no positive off-diagonal entry to cut")

    num_tokens = W.shape[0]
    active = (W - np.diag(np.diag(W))).sum(axis=1) > 0
    relaxed = np.where(W > 0, W, EDGE_EPS)
    np.fill_diagonal(relaxed, np.where(active, np.diag(W), 0.0))
    degrees = relaxed.sum(axis=1)
    _, vectors = scipy.linalg.eigh(np.diag(degrees) - relaxed, np.diag(degrees), subset_by_index=[1, 1])
    y = vectors[:, 0]

    best_side, best_value = None, np.inf
    for threshold in np.unique(y)[:-1]:
        side = y <= threshold
        value = ncut_value(relaxed, side)
        if value < best_value:
            best_side, best_value = side, value
    if best_side is None:
        # constant eigenvector: split off the first active token
        best_side = np.zeros(num_tokens, dtype=bool)
        best_side[int(np.argmax(active))] = True

    magnitude = np.where(active, np.abs(y), -np.inf)
    seed = int(np.argmax(magnitude))
    peak = magnitude[seed]
    peaked = np.abs(magnitude - peak) <= 1e-12 * max(1.0, peak)
    foreground = best_side if best_side[seed] else ~best_side
    if peaked[best_side].any() and peaked[~best_side].any():
        low_side, high_side = (best_side & active).sum(), (~best_side & active).sum()
        if low_side != high_side:
            foreground = best_side if low_side < high_side else ~best_side
            seed = int(np.argmax(np.where(foreground, magnitude, -np.inf)))
    mask = foreground & active
    return NCutResult(mask=mask, value=ncut_value(W, mask), eigenvector=y, seed=seed)


def seed_component(matrix: np.ndarray, mask: np.ndarray, seed: int) -> np.ndarray:
    """ Tokens of ``mask`` connected to ``seed`` through positive affinities inside the mask """
    sub = matrix[np.ix_(mask, mask)] > 0
    _, labels = connected_components(sub, directed=False)
    indices = np.flatnonzero(mask)
    position = int(np.searchsorted(indices, seed))
    component = np.zeros_like(mask)
    component[indices[labels == labels[position]]] = True
    return component


def bounding_box(bits: np.ndarray, grid_shape: Tuple[int, int]) -> Optional[Tuple[int, int, int, int]]:
    """ Tight (x_min, y_min, x_max, y_max) box in patch coordinates, inclusive; None for an empty mask """
    grid = np.asarray(bits, dtype=bool).reshape(grid_shape)
    rows = np.flatnonzero(grid.any(axis=1))
    cols = np.flatnonzero(grid.any(axis=0))
    if rows.size == 0:
        return None
    return (int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1]))


def maskcut(
    affinity: AffinityMatrix,
    cfg: Optional[MaskCutConfig] = None,
    grid_shape: Optional[Tuple[int, int]] = None,
) -> MaskCutResult:
    """
    Extract up to ``cfg.num_objects`` disjoint masks by repeated Normalized Cuts.

    After each cut the rows and columns of the claimed tokens are zeroed. The
    loop stops early, with a warning and ``early_stopped`` set, once the
    remaining graph has no edge left. Each mask is scored 1 - ncut / 2.
    """
    cfg = cfg or MaskCutConfig()
    matrix = np.array(affinity.matrix, dtype=np.float64)
    num_tokens = matrix.shape[0]
    if grid_shape is None:
        side = int(round(np.sqrt(num_tokens)))
        grid_shape = (side, num_tokens // side)
    claimed = np.zeros(num_tokens, dtype=bool)
    result = MaskCutResult(masks=[], boxes=[], scores=[], ncut_values=[])
    for iteration in range(cfg.num_objects):
        if not has_edges(matrix):
            warnings.warn(
                f"MaskCut stopped after {iteration} of {cfg.num_objects} masks: no affinity left to cut"
            )
            result.early_stopped = True
            break
        cut = ncut_bipartition(matrix)
        foreground = cut.mask & ~claimed
        if cfg.seed_component and foreground[cut.seed]:
            foreground = seed_component(matrix, foreground, cut.seed)
        if not foreground.any():
            warnings.warn(f"MaskCut stopped after {iteration} of {cfg.num_objects} masks: empty foreground")
            result.early_stopped = True
            break
        value = ncut_value(matrix, foreground)
        result.masks.append(SegMask(foreground, source=f"maskcut{iteration}"))
        result.boxes.append(bounding_box(foreground, grid_shape))
        result.ncut_values.append(value)
        result.scores.append(1.0 - value / 2.0)
        claimed |= foreground
        matrix[claimed, :] = 0.0
        matrix[:, claimed] = 0.0
        logger.debug("MaskCut iteration %d: %d tokens, ncut %.4f", iteration, int(foreground.sum()), cut.value)
    return result
