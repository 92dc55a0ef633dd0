import numpy as np
import pytest

from crateseg.exceptions import ConfigurationError
from crateseg.objective import (
    CodingRateParams,
    coding_rate,
    coding_rate_subspaces,
    diagnostic_trials,
    exact_compression_step,
    grad_coding_rate_subspaces,
    mssa_gradient_diagnostic,
    random_orthonormal_bases,
    rate_report,
)


def _finite_difference(Z, bases, epsilon, step=1e-5):
    gradient = np.zeros_like(Z)
    for index in np.ndindex(*Z.shape):
        plus, minus = Z.copy(), Z.copy()
        plus[index] += step
        minus[index] -= step
        gradient[index] = (coding_rate_subspaces(plus, bases, epsilon) - coding_rate_subspaces(minus, bases, epsilon)) / (2 * step)
    return gradient


def test_coding_rate_examples():
    assert coding_rate(np.zeros((5, 3))) == 0.0
    assert coding_rate(np.array([[1.0, 0.0]])) == pytest.approx(0.5 * np.log(3), abs=1e-9)


def test_coding_rate_rotation_invariance():
    rng = np.random.default_rng(0)
    Z = rng.standard_normal((7, 4))
    Q = np.linalg.qr(rng.standard_normal((4, 4)))[0]
    assert coding_rate(Z @ Q.T) == pytest.approx(coding_rate(Z), abs=1e-10)


@pytest.mark.parametrize("shape", [(3, 8), (8, 3), (5, 5)])
def test_gram_covariance_duality(shape):
    rng = np.random.default_rng(1)
    Z = rng.standard_normal(shape)
    n, d = shape
    alpha = d / n
    covariance = 0.5 * np.linalg.slogdet(np.eye(d) + alpha * Z.T @ Z)[1]
    gram = 0.5 * np.linalg.slogdet(np.eye(n) + alpha * Z @ Z.T)[1]
    assert covariance == pytest.approx(gram, abs=1e-9)
    assert coding_rate(Z) == pytest.approx(covariance, abs=1e-9)


def test_coding_rate_rejects_bad_epsilon():
    with pytest.raises(ConfigurationError):
        coding_rate(np.ones((2, 2)), epsilon=0.0)


def test_subspace_rate_examples():
    e1 = np.array([[1.0], [0.0]])
    tokens_on_e2 = np.array([[0.0, 1.0], [0.0, -2.0]])
    assert coding_rate_subspaces(tokens_on_e2, [e1]) == pytest.approx(0.0)
    assert coding_rate_subspaces(np.array([[1.0, 0.0]]), [e1]) == pytest.approx(0.5 * np.log(2), abs=1e-9)


def test_subspace_rate_token_permutation():
    rng = np.random.default_rng(2)
    Z = rng.standard_normal((6, 5))
    bases = random_orthonormal_bases(5, 2, 2, rng)
    assert coding_rate_subspaces(Z[rng.permutation(6)], bases) == pytest.approx(coding_rate_subspaces(Z, bases))


def test_gradient_special_cases():
    rng = np.random.default_rng(3)
    bases = random_orthonormal_bases(6, 2, 2, rng)
    assert np.all(grad_coding_rate_subspaces(np.zeros((4, 6)), bases) == 0)
    e = np.eye(4)
    orthogonal_tokens = np.array([[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 3.0]])
    gradient = grad_coding_rate_subspaces(orthogonal_tokens, [e[:, :1], e[:, 1:2]])
    assert np.allclose(gradient, 0.0)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    Z = rng.standard_normal((4, 6))
    bases = [rng.standard_normal((6, 3)) for _ in range(2)]
    analytic = grad_coding_rate_subspaces(Z, bases)
    numeric = _finite_difference(Z, bases, 1.0)
    assert np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric) < 1e-5


def test_gradient_finite_differences_over_configs():
    for trial in range(20):
        rng = np.random.default_rng([5, trial])
        d = int(rng.integers(3, 9))
        p = int(rng.integers(1, d + 1))
        K = int(rng.integers(1, 4))
        n = int(rng.integers(1, 7))
        epsilon = float(rng.uniform(0.5, 2.0))
        Z = rng.standard_normal((n, d))
        bases = [rng.standard_normal((d, p)) for _ in range(K)]
        analytic = grad_coding_rate_subspaces(Z, bases, epsilon)
        numeric = _finite_difference(Z, bases, epsilon)
        assert np.linalg.norm(analytic - numeric) <= 1e-5 * np.linalg.norm(numeric) + 1e-9


def test_compression_step_decreases_subspace_rate():
    for trial in range(100):
        rng = np.random.default_rng([6, trial])
        Z = rng.standard_normal((8, 12))
        bases = random_orthonormal_bases(12, 3, 4, rng)
        step = exact_compression_step(Z, bases, step=1e-3)
        assert coding_rate_subspaces(step, bases) < coding_rate_subspaces(Z, bases)


def test_compression_step_edges():
    rng = np.random.default_rng(7)
    bases = random_orthonormal_bases(4, 2, 2, rng)
    assert np.all(exact_compression_step(np.zeros((3, 4)), bases) == 0)
    Z = rng.standard_normal((3, 4))
    assert np.allclose(exact_compression_step(Z, bases, step=1e-12), Z)
    with pytest.raises(ConfigurationError):
        exact_compression_step(Z, bases, step=0.0)


def test_diagnostic_trials_mostly_agree():
    results = diagnostic_trials(num_trials=100, model_dim=32, head_dim=8, num_heads=4, num_tokens=16, seed=0)
    assert len(results) == 100
    assert sum(r.cosine > 0 for r in results) >= 90
    assert all(-1.0 <= r.cosine <= 1.0 for r in results)
    assert not any(r.non_orthonormal for r in results)


def test_diagnostic_degenerate_when_orthogonal():
    e = np.eye(4)
    Z = np.array([[0.0, 0.0, 1.0, 2.0], [0.0, 0.0, -1.0, 0.5]])
    with pytest.warns(UserWarning, match="degenerate"):
        report = mssa_gradient_diagnostic(Z, [e[:, :1], e[:, 1:2]])
    assert report.degenerate
    assert report.cosine == 0.0
    assert report.gradient_norm == pytest.approx(0.0)
    assert report.approximation_norm == pytest.approx(0.5 * np.linalg.norm(Z))


def test_diagnostic_flags_non_orthonormal_bases():
    rng = np.random.default_rng(8)
    Z = rng.standard_normal((5, 6))
    with pytest.warns(UserWarning, match="not orthonormal"):
        report = mssa_gradient_diagnostic(Z, [2.0 * np.eye(6)[:, :3]])
    assert report.non_orthonormal


def test_rate_report_zero_tokens():
    rng = np.random.default_rng(9)
    report = rate_report(np.zeros((5, 4)), random_orthonormal_bases(4, 2, 2, rng), layer=2)
    assert (report.R, report.Rc, report.l0, report.l1, report.objective) == (0.0, 0.0, 0, 0.0, 0.0)
    assert report.to_dict()["layer"] == 2


def test_rate_report_objective():
    rng = np.random.default_rng(10)
    Z = np.maximum(rng.standard_normal((6, 8)), 0.0)
    bases = random_orthonormal_bases(8, 4, 2, rng)
    params = CodingRateParams(epsilon=0.5, sparsity=0.01)
    report = rate_report(Z, bases, params)
    assert report.l0 == np.count_nonzero(Z)
    assert report.l1 == pytest.approx(np.abs(Z).sum())
    expected = coding_rate(Z, 0.5) - 0.01 * report.l0 - coding_rate_subspaces(Z, bases, 0.5)
    assert report.objective == pytest.approx(expected)
    assert "layer" not in report.to_dict()
