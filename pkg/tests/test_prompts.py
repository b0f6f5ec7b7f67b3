import itertools

import numpy as np
import pytest

from kitpose import numerics as nx
from kitpose import prompts
from kitpose.errors import ConfigError, NumericalError, ShapeError


def two_blobs(rng, n_each=4, dim=3, gap=20.0):
    a = rng.normal(0.0, 0.5, (n_each, dim))
    b = rng.normal(0.0, 0.5, (n_each, dim)) + gap
    return np.concatenate([a, b])


def test_kkz_seeding_example():
    assert prompts.kkz_init(np.array([[0, 0], [0, 1], [10, 0], [10, 1]]), 2) == [3, 0]


def test_kkz_rejects_too_many_prompts():
    with pytest.raises(ConfigError):
        prompts.kkz_init(np.zeros((3, 2)), 4)


def test_objective_never_increases():
    for seed in range(5):
        tokens = np.random.default_rng(seed).standard_normal((17, 8))
        result = prompts.kmedoids_cluster(tokens, prompts.PromptConfig(n_prompts=4))
        history = result.objective_history
        assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))
        assert result.converged


def test_matches_exhaustive_optimum_on_separated_blobs():
    tokens = two_blobs(np.random.default_rng(1))
    dist = prompts.pairwise_distances(tokens)
    best = min(
        dist[:, list(pair)].min(axis=1).sum()
        for pair in itertools.combinations(range(len(tokens)), 2)
    )
    result = prompts.kmedoids_cluster(tokens, prompts.PromptConfig(n_prompts=2))
    assert result.objective == pytest.approx(best)
    assert len(set(result.assignment[:4])) == 1
    assert len(set(result.assignment[4:])) == 1
    assert result.assignment[0] != result.assignment[4]


def test_biases_are_cluster_means():
    tokens = np.random.default_rng(2).standard_normal((10, 5))
    result = prompts.kmedoids_cluster(tokens, prompts.PromptConfig(n_prompts=3))
    assert result.biases.shape == (3, 5)
    for j in range(3):
        np.testing.assert_allclose(result.biases[j], tokens[result.assignment == j].mean(axis=0))
    for j, m in enumerate(result.medoid_indices):
        assert result.assignment[m] == j


def test_clustering_is_deterministic():
    tokens = np.random.default_rng(3).standard_normal((12, 4))
    cfg = prompts.PromptConfig(n_prompts=3)
    a = prompts.kmedoids_cluster(tokens, cfg)
    b = prompts.kmedoids_cluster(tokens, cfg)
    assert a.medoid_indices == b.medoid_indices
    np.testing.assert_array_equal(a.assignment, b.assignment)


def test_identical_tokens_leave_no_cluster_empty():
    tokens = np.ones((6, 4))
    result = prompts.kmedoids_cluster(tokens, prompts.PromptConfig(n_prompts=3))
    assert sorted(set(result.assignment.tolist())) == [0, 1, 2]
    np.testing.assert_allclose(result.biases, np.ones((3, 4)))
    assert result.objective == 0.0


def test_reseeded_cluster_takes_every_token_nearest_to_it():
    tokens = np.array([[0.0], [0.0], [10.0], [11.0], [12.0]])
    dist = prompts.pairwise_distances(tokens)
    medoids = [0, 1]
    assignment = prompts._repair_empty(dist, medoids, prompts._assign(dist, medoids))
    assert medoids == [0, 4]
    assert assignment.tolist() == [0, 0, 1, 1, 1]
    np.testing.assert_array_equal(assignment, prompts._assign(dist, medoids))


def test_every_token_sits_with_its_nearest_medoid():
    for seed in range(20):
        tokens = np.random.default_rng(seed).standard_normal((17, 6))
        tokens[5] = tokens[2]
        result = prompts.kmedoids_cluster(tokens, prompts.PromptConfig(n_prompts=4))
        dist = prompts.pairwise_distances(tokens)
        np.testing.assert_array_equal(result.assignment, prompts._assign(dist, result.medoid_indices))
        assert sorted(set(result.assignment.tolist())) == [0, 1, 2, 3]


def test_single_prompt_bias_is_global_mean():
    tokens = np.random.default_rng(4).standard_normal((7, 3))
    result = prompts.kmedoids_cluster(tokens, prompts.PromptConfig(n_prompts=1))
    np.testing.assert_allclose(result.biases[0], tokens.mean(axis=0))


def test_non_finite_tokens_raise():
    tokens = np.ones((4, 2))
    tokens[1, 0] = np.inf
    with pytest.raises(NumericalError):
        prompts.kmedoids_cluster(tokens, prompts.PromptConfig(n_prompts=2))


def test_cosine_distances():
    tokens = np.array([[1.0, 0.0], [3.0, 0.0], [0.0, 2.0]])
    d = prompts.pairwise_distances(tokens, "cosine")
    assert d[0, 1] == pytest.approx(0.0)
    assert d[0, 2] == pytest.approx(1.0)
    result = prompts.kmedoids_cluster(tokens, prompts.PromptConfig(n_prompts=2, metric="cosine"))
    assert result.assignment[0] == result.assignment[1] != result.assignment[2]


def test_prompt_config_validation():
    with pytest.raises(ConfigError):
        prompts.PromptConfig(n_prompts=0)
    with pytest.raises(ConfigError):
        prompts.PromptConfig(metric="manhattan")
    with pytest.raises(ConfigError):
        prompts.PromptConfig(threshold=0.0)


def test_cluster_batch_threads_match_sequential():
    tokens = np.random.default_rng(5).standard_normal((4, 9, 6))
    cfg = prompts.PromptConfig(n_prompts=3)
    seq = prompts.cluster_batch(tokens, cfg)
    par = prompts.cluster_batch(tokens, cfg, workers=2)
    for a, b in zip(seq, par):
        np.testing.assert_array_equal(a.assignment, b.assignment)
        np.testing.assert_array_equal(a.biases, b.biases)
    with pytest.raises(ShapeError):
        prompts.cluster_batch(tokens[0], cfg)


def nanoblock_params(n_c=4, n_p=2, spatial=16, c=8):
    params, buffers = {}, {}
    prompts.init_nanoblock(params, buffers, np.random.default_rng(0), n_c, n_p, spatial, c)
    return params, buffers


def test_nanoblock_context_shapes():
    params, buffers = nanoblock_params()
    rng = np.random.default_rng(6)
    single = prompts.nanoblock_context(nx.Tensor(rng.random((4, 4, 4))), params, buffers, training=True)
    assert single.shape == (2, 8)
    batched = prompts.nanoblock_context(nx.Tensor(rng.random((3, 4, 4, 4))), params, buffers, training=False)
    assert batched.shape == (3, 2, 8)
    with pytest.raises(ShapeError):
        prompts.nanoblock_context(nx.Tensor(rng.random((5, 4, 4))), params, buffers)


def test_prompts_carry_no_gradient_into_tokens():
    params, buffers = nanoblock_params()
    rng = np.random.default_rng(7)
    tokens = nx.parameter(rng.standard_normal((5, 8)))
    f_i = nx.parameter(rng.random((4, 4, 4)))
    out, clusters = prompts.make_body_part_prompts(
        tokens, f_i, prompts.PromptConfig(n_prompts=2), params, buffers, training=True
    )
    assert out.shape == (2, 8)
    assert len(clusters) == 1
    nx.backward(out.sum())
    assert not np.any(tokens.grad)
    assert np.any(f_i.grad)
    np.testing.assert_allclose(
        out.data - prompts.nanoblock_context(f_i, params, None, training=True).data,
        clusters[0].biases,
    )


def test_frozen_biases_skip_clustering():
    params, buffers = nanoblock_params()
    rng = np.random.default_rng(8)
    tokens = nx.Tensor(rng.standard_normal((5, 8)))
    f_i = nx.Tensor(rng.random((4, 4, 4)))
    out, clusters = prompts.make_body_part_prompts(
        tokens, f_i, prompts.PromptConfig(n_prompts=2), params, buffers, frozen_biases=np.zeros((2, 8))
    )
    assert clusters is None
    with pytest.raises(ShapeError):
        prompts.make_body_part_prompts(
            tokens, f_i, prompts.PromptConfig(n_prompts=2), params, buffers, frozen_biases=np.zeros((3, 8))
        )


def test_random_instances_mostly_reach_the_exhaustive_optimum():
    exact, worst_ratio = 0, 1.0
    for seed in range(100):
        tokens = np.random.default_rng(1000 + seed).standard_normal((8, 3))
        dist = prompts.pairwise_distances(tokens)
        best = min(
            dist[:, list(pair)].min(axis=1).sum()
            for pair in itertools.combinations(range(8), 2)
        )
        result = prompts.kmedoids_cluster(tokens, prompts.PromptConfig(n_prompts=2))
        history = result.objective_history
        assert all(b <= a + 1e-12 for a, b in zip(history, history[1:]))
        exact += result.objective <= best + 1e-9
        worst_ratio = max(worst_ratio, result.objective / best)
    assert exact >= 95
    assert worst_ratio <= 1.05
