import itertools

import numpy as np
import pytest
import torch

from crateseg.exceptions import ConfigurationError
from crateseg.maskcut import (
    AffinityMatrix,
    MaskCutConfig,
    affinity_from_features,
    affinity_matrix,
    bounding_box,
    maskcut,
    ncut_bipartition,
    ncut_value,
)
from crateseg.model import build_model


def _blocks(*sizes, diagonal=0.0):
    W = np.zeros((sum(sizes), sum(sizes)))
    start = 0
    for size in sizes:
        W[start:start + size, start:start + size] = 1.0
        start += size
    np.fill_diagonal(W, diagonal)
    return W


def _brute_force_ncut(W):
    size = W.shape[0]
    best, best_value = None, np.inf
    for bits in itertools.product([False, True], repeat=size - 1):
        mask = np.array((True,) + bits)
        if mask.all():
            continue
        value = ncut_value(W, mask)
        if value < best_value:
            best, best_value = mask, value
    return best, best_value


def _same_partition(a, b):
    return np.array_equal(a, b) or np.array_equal(a, ~b)


def test_path_graph():
    result = ncut_bipartition(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert result.mask.sum() == 1
    assert result.value == pytest.approx(2.0)


def test_two_blocks_recovered():
    W = _blocks(3, 4)
    result = ncut_bipartition(W)
    best, best_value = _brute_force_ncut(W)
    assert _same_partition(result.mask, best)
    assert result.value == pytest.approx(best_value, abs=1e-12)
    # the smaller-volume block carries the largest eigenvector entries
    assert np.flatnonzero(result.mask).tolist() == [0, 1, 2]


def test_complete_graph_is_deterministic():
    W = np.ones((4, 4)) - np.eye(4)
    first = ncut_bipartition(W)
    second = ncut_bipartition(W.copy())
    assert np.array_equal(first.mask, second.mask)
    assert 0 < first.mask.sum() < 4
    assert first.value == pytest.approx(4 / 3)


def test_seeded_two_block_graphs_match_brute_force():
    for trial in range(50):
        rng = np.random.default_rng([0, trial])
        a, b = (int(v) for v in rng.integers(2, 5, size=2))
        size = a + b
        W = rng.uniform(0.0, 0.02, size=(size, size))
        W[:a, :a] = rng.uniform(0.5, 1.0, size=(a, a))
        W[a:, a:] = rng.uniform(0.5, 1.0, size=(b, b))
        W = 0.5 * (W + W.T)
        np.fill_diagonal(W, 0.0)
        permutation = rng.permutation(size)
        W = W[np.ix_(permutation, permutation)]
        result = ncut_bipartition(W)
        best, best_value = _brute_force_ncut(W)
        assert _same_partition(result.mask, best), f"trial {trial}"
        assert result.value == pytest.approx(best_value, rel=1e-9)


def test_isolated_tokens_are_background():
    W = _blocks(3, 3)
    W[5, :] = 0.0
    W[:, 5] = 0.0
    result = ncut_bipartition(W)
    assert not result.mask[5]
    assert result.mask.any()


def test_self_affinity_alone_keeps_token_background():
    W = _blocks(3, 2, 1, diagonal=1.0)
    result = ncut_bipartition(W)
    assert not result.mask[5]
    assert _same_partition(result.mask[:5], np.array([True, True, True, False, False]))


def test_maskcut_skips_orthogonal_outlier():
    features = np.zeros((16, 3))
    features[:8, 0] = 1.0
    features[8:15, 1] = 2.0
    features[15, 2] = 1.0
    affinity = affinity_from_features(features)
    assert affinity.matrix[15, 15] == pytest.approx(1.0)
    with pytest.warns(UserWarning, match="stopped"):
        result = maskcut(affinity, MaskCutConfig(num_objects=3), grid_shape=(4, 4))
    found = sorted(np.flatnonzero(mask.bits).tolist() for mask in result.masks)
    assert found == [list(range(8)), list(range(8, 15))]
    assert all(not mask.bits[15] for mask in result.masks)


@pytest.mark.parametrize("matrix", [
    np.zeros((3, 3)),
    np.eye(3),
    np.array([[0.0, 1.0], [0.5, 0.0]]),
    np.array([[0.0, -1.0], [-1.0, 0.0]]),
    np.ones((2, 3)),
])
def test_ncut_rejects_bad_affinity(matrix):
    with pytest.raises(ConfigurationError):
        ncut_bipartition(matrix)


def test_ncut_value():
    W = _blocks(2, 2)
    assert ncut_value(W, np.array([True, True, False, False])) == 0.0
    W[1, 2] = W[2, 1] = 1.0
    # cut 1, vol(A) = 3, vol(B) = 3
    assert ncut_value(W, np.array([True, True, False, False])) == pytest.approx(2 / 3)


def test_affinity_identical_and_orthogonal_tokens():
    identical = affinity_from_features(np.tile([[1.0, 2.0, 3.0]], (4, 1)))
    np.testing.assert_allclose(identical.matrix, np.ones((4, 4)))
    orthogonal = affinity_from_features(3.0 * np.eye(4), tau=0.0)
    np.testing.assert_allclose(orthogonal.matrix, np.eye(4))


def test_affinity_matches_loop_oracle():
    rng = np.random.default_rng(1)
    features = rng.standard_normal((9, 6))
    affinity = affinity_from_features(features, tau=0.15)
    expected = np.zeros((9, 9))
    for i in range(9):
        for j in range(9):
            value = features[i] @ features[j] / (np.linalg.norm(features[i]) * np.linalg.norm(features[j]))
            expected[i, j] = value if value >= 0.15 else 0.0
    np.testing.assert_allclose(affinity.matrix, expected, atol=1e-12)
    surviving = affinity.matrix[affinity.matrix != 0]
    assert not np.any((surviving > 0) & (surviving < 0.15))
    assert np.array_equal(affinity.matrix, affinity.matrix.T)


def test_affinity_zero_norm_token():
    features = np.ones((4, 3))
    features[2] = 0.0
    with pytest.warns(UserWarning, match="zero-norm"):
        affinity = affinity_from_features(features)
    assert affinity.zero_tokens == [2]
    assert np.all(affinity.matrix[2] == 0) and np.all(affinity.matrix[:, 2] == 0)


def test_affinity_from_trace(tiny_config):
    trace = build_model(tiny_config)(torch.rand(2, 3, 8, 8), want_trace=True).trace
    affinity = affinity_matrix(trace, layer=2, sample=1)
    assert affinity.num_tokens == 4
    assert affinity.tau == 0.15


def test_maskcut_three_blocks():
    W = _blocks(3, 4, 5, diagonal=1.0)
    result = maskcut(AffinityMatrix(W, tau=0.15), MaskCutConfig(num_objects=3), grid_shape=(3, 4))
    assert not result.early_stopped
    assert len(result.masks) == 3
    found = sorted(np.flatnonzero(mask.bits).tolist() for mask in result.masks)
    assert found == [[0, 1, 2], [3, 4, 5, 6], [7, 8, 9, 10, 11]]
    assert result.scores == pytest.approx([1.0, 1.0, 1.0])
    assert result.ncut_values == pytest.approx([0.0, 0.0, 0.0])
    assert len(result.boxes) == 3


def test_maskcut_stops_early():
    W = _blocks(3, 4, 5, diagonal=1.0)
    with pytest.warns(UserWarning, match="stopped"):
        result = maskcut(AffinityMatrix(W, tau=0.15), MaskCutConfig(num_objects=4), grid_shape=(3, 4))
    assert result.early_stopped
    assert len(result.masks) == 3
    assert result.to_dict()["early_stopped"] is True


def test_maskcut_single_object_is_ncut_foreground():
    W = _blocks(3, 4)
    result = maskcut(AffinityMatrix(W, tau=0.0), MaskCutConfig(num_objects=1), grid_shape=(1, 7))
    assert np.array_equal(result.masks[0].bits, ncut_bipartition(W).mask)


def test_bounding_box():
    bits = np.zeros(16, dtype=bool)
    bits[[5, 6, 10]] = True
    assert bounding_box(bits, (4, 4)) == (1, 1, 2, 2)
    bits[15] = True
    assert bounding_box(bits, (4, 4)) == (1, 1, 3, 3)
    assert bounding_box(np.zeros(16, dtype=bool), (4, 4)) is None


def test_maskcut_config():
    cfg = MaskCutConfig()
    assert (cfg.num_objects, cfg.tau, cfg.normalize) == (3, 0.15, True)
    assert MaskCutConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigurationError):
        MaskCutConfig(num_objects=0)
    with pytest.raises(ConfigurationError):
        MaskCutConfig(tau=1.5)
