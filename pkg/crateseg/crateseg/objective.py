"""
Sparse rate reduction objective.

Token matrices are numpy arrays of shape (n, d), one row per token; the
local signal model is a sequence of K bases U_k of shape (d, p).
"""
import logging
import warnings
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.special import softmax

from .exceptions import ConfigurationError

logger = logging.getLogger(__name__)

L0_THRESHOLD = 1e-8
ORTHONORMAL_TOLERANCE = 1e-6
DEGENERATE_NORM = 1e-12


@dataclass
class CodingRateParams:
    epsilon: float = 1.0
    sparsity: float = 0.1

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.epsilon <= 0:
            raise ConfigurationError(f"epsilon must be positive, got {self.epsilon}")
        if self.sparsity < 0:
            raise ConfigurationError(f"sparsity must be nonnegative, got {self.sparsity}")

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "CodingRateParams":
        return cls(**data)


@dataclass
class RateReport:
    R: float
    Rc: float
    l0: int
    l1: float
    objective: float
    layer: Optional[int] = None

    def to_dict(self) -> Dict:
        data = asdict(self)
        if self.layer is None:
            del data["layer"]
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "RateReport":
        return cls(**data)


@dataclass
class MssaDiagnostic:
    """
    Agreement between the exact gradient of R^c and its MSSA approximation.

    ``degenerate`` is set when either gradient vanishes (cosine reported as 0);
    ``non_orthonormal`` when some U_k does not have orthonormal columns, in which
    case the approximation is outside its idealized setting.
    """
    cosine: float
    rel_norm_gap: float
    gradient_norm: float
    approximation_norm: float
    degenerate: bool = False
    non_orthonormal: bool = False

    def to_dict(self) -> Dict:
        return asdict(self)


def _check_epsilon(epsilon: float):
    if epsilon <= 0:
        raise ConfigurationError(f"epsilon must be positive, got {epsilon}")


def _half_logdet(W: np.ndarray, alpha: float) -> float:
    """ 1/2 logdet(I + alpha W^T W), evaluated on the smaller Gram side """
    n, m = W.shape
    gram = W @ W.T if n < m else W.T @ W
    _, logdet = np.linalg.slogdet(np.eye(gram.shape[0]) + alpha * gram)
    return 0.5 * float(logdet)


def coding_rate(Z: np.ndarray, epsilon: float = 1.0) -> float:
    """ R(Z) = 1/2 logdet(I_d + d / (n eps^2) Z^T Z) for n tokens of dimension d """
    _check_epsilon(epsilon)
    Z = np.asarray(Z, dtype=np.float64)
    n, d = Z.shape
    return _half_logdet(Z, d / (n * epsilon ** 2))


def coding_rate_subspaces(Z: np.ndarray, bases: Sequence[np.ndarray], epsilon: float = 1.0) -> float:
    """ R^c(Z; U_[K]) = sum_k 1/2 logdet(I_p + p / (n eps^2) (Z U_k)^T (Z U_k)) """
    _check_epsilon(epsilon)
    Z = np.asarray(Z, dtype=np.float64)
    n = Z.shape[0]
    total = 0.0
    for U in bases:
        p = U.shape[1]
        total += _half_logdet(Z @ U, p / (n * epsilon ** 2))
    return total


def grad_coding_rate_subspaces(Z: np.ndarray, bases: Sequence[np.ndarray], epsilon: float = 1.0) -> np.ndarray:
    """
    Analytic gradient of R^c with respect to Z, shape (n, d):
    sum_k alpha W_k (I_p + alpha W_k^T W_k)^{-1} U_k^T with W_k = Z U_k, alpha = p / (n eps^2).
    """
    _check_epsilon(epsilon)
    Z = np.asarray(Z, dtype=np.float64)
    n = Z.shape[0]
    gradient = np.zeros_like(Z)
    for U in bases:
        p = U.shape[1]
        alpha = p / (n * epsilon ** 2)
        W = Z @ U
        inner = np.eye(p) + alpha * (W.T @ W)
        # inner is symmetric, so W inner^{-1} = solve(inner, W^T)^T
        gradient += alpha * np.linalg.solve(inner, W.T).T @ U.T
    return gradient


def exact_compression_step(
    Z: np.ndarray, bases: Sequence[np.ndarray], epsilon: float = 1.0, step: float = 1e-3
) -> np.ndarray:
    """ One gradient-descent step Z - kappa grad R^c(Z; U_[K]) """
    if step <= 0:
        raise ConfigurationError(f"Compression step size must be positive, got {step}")
    return np.asarray(Z, dtype=np.float64) - step * grad_coding_rate_subspaces(Z, bases, epsilon)


def idealized_mssa(Z: np.ndarray, bases: Sequence[np.ndarray], epsilon: float = 1.0) -> np.ndarray:
    """
    Subspace self-attention in its idealized form: no output projection, no
    softmax temperature, prefactor p / (n eps^2), and the head outputs lifted
    back through U_k.
    """
    _check_epsilon(epsilon)
    Z = np.asarray(Z, dtype=np.float64)
    n = Z.shape[0]
    out = np.zeros_like(Z)
    for U in bases:
        W = Z @ U
        attention = softmax(W @ W.T, axis=-1)
        out += (attention @ W) @ U.T
    p = bases[0].shape[1]
    return p / (n * epsilon ** 2) * out


def is_orthonormal(U: np.ndarray, tolerance: float = ORTHONORMAL_TOLERANCE) -> bool:
    return bool(np.allclose(U.T @ U, np.eye(U.shape[1]), atol=tolerance))


def mssa_gradient_diagnostic(
    Z: np.ndarray, bases: Sequence[np.ndarray], epsilon: float = 1.0
) -> MssaDiagnostic:
    """
    Compare G = grad R^c(Z) with G_hat = p / (n eps^2) (Z - MSSA(Z)).

    The result is descriptive; nothing is asserted about the size of the gap.
    """
    Z = np.asarray(Z, dtype=np.float64)
    n = Z.shape[0]
    p = bases[0].shape[1]
    non_orthonormal = not all(is_orthonormal(U) for U in bases)
    if non_orthonormal:
        warnings.warn("Subspace bases are not orthonormal; the MSSA approximation does not apply exactly")

    gradient = grad_coding_rate_subspaces(Z, bases, epsilon)
    approximation = p / (n * epsilon ** 2) * (Z - idealized_mssa(Z, bases, epsilon))
    g_norm = float(np.linalg.norm(gradient))
    a_norm = float(np.linalg.norm(approximation))

    degenerate = min(g_norm, a_norm) < DEGENERATE_NORM
    if degenerate:
        warnings.warn("Gradient diagnostic is degenerate: one of the gradients vanishes, cosine reported as 0")
        cosine = 0.0
    else:
        cosine = float(np.sum(gradient * approximation) / (g_norm * a_norm))
    largest = max(g_norm, a_norm)
    gap = float(np.linalg.norm(gradient - approximation) / largest) if largest > 0 else 0.0
    return MssaDiagnostic(cosine, gap, g_norm, a_norm, degenerate, non_orthonormal)


def random_orthonormal_bases(model_dim: int, head_dim: int, num_heads: int, rng: np.random.Generator) -> List[np.ndarray]:
    """ K bases (d, p) with orthonormal columns, mutually orthogonal when K p <= d """
    if num_heads * head_dim > model_dim:
        return [np.linalg.qr(rng.standard_normal((model_dim, head_dim)))[0] for _ in range(num_heads)]
    q, _ = np.linalg.qr(rng.standard_normal((model_dim, model_dim)))
    return [q[:, k * head_dim:(k + 1) * head_dim] for k in range(num_heads)]


def diagnostic_trials(
    num_trials: int = 100,
    model_dim: int = 32,
    head_dim: int = 8,
    num_heads: int = 4,
    num_tokens: int = 16,
    epsilon: float = 1.0,
    seed: int = 0,
) -> List[MssaDiagnostic]:
    """ Run the gradient diagnostic on seeded Gaussian tokens with random orthonormal bases """
    results = []
    for trial in range(num_trials):
        rng = np.random.default_rng([seed, trial])
        bases = random_orthonormal_bases(model_dim, head_dim, num_heads, rng)
        Z = rng.standard_normal((num_tokens, model_dim))
        results.append(mssa_gradient_diagnostic(Z, bases, epsilon))
    positive = sum(r.cosine > 0 for r in results)
    logger.info("MSSA gradient diagnostic: cosine > 0 in %d/%d trials", positive, num_trials)
    return results


def rate_report(
    Z: np.ndarray,
    bases: Sequence[np.ndarray],
    params: Optional[CodingRateParams] = None,
    layer: Optional[int] = None,
) -> RateReport:
    """ Assemble R, R^c, the l0 and l1 sparsity measures and R - lambda l0 - R^c """
    params = params or CodingRateParams()
    Z = np.asarray(Z, dtype=np.float64)
    R = coding_rate(Z, params.epsilon)
    Rc = coding_rate_subspaces(Z, bases, params.epsilon)
    l0 = int(np.count_nonzero(np.abs(Z) > L0_THRESHOLD))
    l1 = float(np.abs(Z).sum())
    return RateReport(R=R, Rc=Rc, l0=l0, l1=l1, objective=R - params.sparsity * l0 - Rc, layer=layer)
