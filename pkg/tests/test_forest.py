"""Random-tree index: construction, probabilities, priority search, I/O."""

import math

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from parloc.descriptors import binarize
from parloc.forest import (
    PerturbationModel,
    RandomTreeForest,
    SIGMA_FLOOR,
    build_forest,
    build_tree,
    estimate_perturbation_model,
    forest_tree_seed,
    leaf_log_probability,
    load_forest,
    load_model,
    node_probability,
    save_forest,
    save_model,
    traverse,
)
from parloc.synthetic import perturb_unit_vectors, random_unit_vectors


def gaussian_cdf_by_quadrature(x, mu, sigma, grid=200_001, span=12.0):
    """Trapezoid integration of the normal density, independent of erf."""
    lo = mu - span * sigma
    hi = min(x, mu + span * sigma)
    if hi <= lo:
        return 0.0
    ts = np.linspace(lo, hi, grid)
    density = np.exp(-0.5 * ((ts - mu) / sigma) ** 2) / (sigma * math.sqrt(2 * math.pi))
    return float(np.trapezoid(density, ts))


class TestBuildTree:
    def test_single_entry(self):
        bits = np.array([[1, 0, 1]], dtype=np.uint8)
        tree = build_tree(bits, np.array([7]), depth=2, seed=0, candidate_dims=3)
        assert len(tree.leaves) == 1
        (rows,) = tree.leaves.values()
        assert rows.tolist() == [0]

    def test_single_discriminating_dimension_chosen(self):
        # Entries differ only at dimension 2; exhaustive scoring over all
        # dimensions must pick it (balance 0 beats balance 2 elsewhere).
        bits = np.array([
            [1, 0, 0, 1, 1, 0],
            [1, 0, 1, 1, 1, 0],
        ], dtype=np.uint8)
        ids = np.array([1, 2])
        for seed in range(5):
            tree = build_tree(bits, ids, depth=1, seed=seed, candidate_dims=6)
            assert tree.tests[1] == 2
            assert sorted(len(v) for v in tree.leaves.values()) == [1, 1]

    def test_scoring_matches_exhaustive_oracle(self):
        # With candidate_dims = D there is no sampling: the chosen dimension
        # must minimize balance + group-splits computed by a naive loop.
        rng = np.random.default_rng(0)
        bits = rng.integers(0, 2, size=(40, 12)).astype(np.uint8)
        ids = rng.integers(0, 10, size=40).astype(np.int64)
        tree = build_tree(bits, ids, depth=1, seed=3, candidate_dims=12)

        def score(dim):
            right = bits[:, dim] == 1
            balance = abs(int((~right).sum()) - int(right.sum()))
            splits = sum(
                1
                for lid in np.unique(ids)
                if len(set(bits[ids == lid, dim].tolist())) == 2
            )
            return balance + splits

        scores = [score(d) for d in range(12)]
        best = min(range(12), key=lambda d: (scores[d], d))
        assert tree.tests[1] == best

    def test_round_trip_all_entries(self):
        rng = np.random.default_rng(1)
        bits = rng.integers(0, 2, size=(1000, 32)).astype(np.uint8)
        ids = np.arange(1000, dtype=np.int64)
        tree = build_tree(bits, ids, depth=8, seed=5)
        for row in range(1000):
            path = traverse(tree, bits[row])
            assert row in tree.leaves[path]

    def test_rejects_empty_entries(self):
        with pytest.raises(ValueError, match="nonempty"):
            build_tree(np.empty((0, 4), dtype=np.uint8), np.empty(0), depth=2, seed=0)

    def test_depth_may_exceed_dimensions(self):
        bits = np.array([[1, 0], [0, 1], [1, 1]], dtype=np.uint8)
        tree = build_tree(bits, np.arange(3), depth=5, seed=0, candidate_dims=2)
        total = sum(len(v) for v in tree.leaves.values())
        assert total == 3


class TestBuildForest:
    def test_single_tree_matches_build_tree(self):
        rng = np.random.default_rng(2)
        bits = rng.integers(0, 2, size=(50, 16)).astype(np.uint8)
        ids = np.arange(50, dtype=np.int64)
        forest = build_forest(bits, ids, n_trees=1, depth=6, seed=9)
        direct = build_tree(bits, ids, depth=6, seed=forest_tree_seed(9, 0))
        assert forest[0].tests == direct.tests
        assert forest[0].leaves.keys() == direct.leaves.keys()

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        bits = rng.integers(0, 2, size=(80, 16)).astype(np.uint8)
        ids = rng.integers(0, 20, size=80).astype(np.int64)
        a = build_forest(bits, ids, n_trees=3, depth=7, seed=4)
        b = build_forest(bits, ids, n_trees=3, depth=7, seed=4)
        for ta, tb in zip(a, b):
            assert ta.tests == tb.tests
            assert ta.leaves.keys() == tb.leaves.keys()
            assert all(np.array_equal(ta.leaves[k], tb.leaves[k]) for k in ta.leaves)

    def test_round_trip_all_trees(self):
        rng = np.random.default_rng(4)
        X = random_unit_vectors(rng, 200, 24)
        bits = binarize(X)
        ids = np.arange(200, dtype=np.int64)
        for tree in build_forest(bits, ids, n_trees=6, depth=9, seed=11):
            for row in range(0, 200, 3):
                assert row in tree.leaves[traverse(tree, bits[row])]


class TestTraverse:
    def test_all_ones_descriptor_goes_all_right(self):
        rng = np.random.default_rng(5)
        bits = rng.integers(0, 2, size=(30, 8)).astype(np.uint8)
        tree = build_tree(bits, np.arange(30), depth=6, seed=1)
        assert traverse(tree, np.ones(8, dtype=np.uint8)) == (1 << 6) - 1

    def test_only_tested_dimensions_matter(self):
        rng = np.random.default_rng(6)
        bits = rng.integers(0, 2, size=(20, 16)).astype(np.uint8)
        tree = build_tree(bits, np.arange(20), depth=4, seed=2)
        query = rng.integers(0, 2, size=16).astype(np.uint8)
        path = traverse(tree, query)
        # Flip every dimension not on the traversal path; the leaf must hold.
        node, used = 1, set()
        for level in range(tree.depth):
            dim = tree.test_dimension(node)
            used.add(dim)
            node = 2 * node + int(query[dim])
        other = query.copy()
        for d in range(16):
            if d not in used:
                other[d] ^= 1
        assert traverse(tree, other) == path

    def test_dimension_mismatch(self):
        bits = np.array([[1, 0]], dtype=np.uint8)
        tree = build_tree(bits, np.array([0]), depth=1, seed=0)
        with pytest.raises(ValueError, match="dimension"):
            traverse(tree, np.array([1, 0, 1], dtype=np.uint8))


class TestNodeProbability:
    def test_centered_query_gives_half(self):
        model = PerturbationModel(mu=0.25, sigma=0.1)
        assert node_probability(-0.25, 0, model) == pytest.approx(0.5, abs=1e-15)
        assert node_probability(-0.25, 1, model) == pytest.approx(0.5, abs=1e-15)

    def test_limits(self):
        model = PerturbationModel(mu=0.0, sigma=0.1)
        assert node_probability(50.0, 1, model) == pytest.approx(1.0, abs=1e-12)
        assert node_probability(50.0, 0, model) <= 1e-12

    def test_reference_value(self):
        # q=0.3, mu=0, sigma=0.15: P(bit=1) is the standard normal CDF at 2.
        model = PerturbationModel(mu=0.0, sigma=0.15)
        assert node_probability(0.3, 1, model) == pytest.approx(0.97725, abs=5e-6)

    def test_matches_quadrature_oracle(self):
        model = PerturbationModel(mu=0.02, sigma=0.07)
        for q in (-0.3, -0.05, 0.0, 0.11, 0.4):
            expected = gaussian_cdf_by_quadrature(0.0, model.mu + q, model.sigma)
            assert node_probability(q, 0, model) == pytest.approx(expected, abs=1e-9)
            assert node_probability(q, 1, model) == pytest.approx(1 - expected, abs=1e-9)

    def test_branches_sum_to_one(self):
        rng = np.random.default_rng(8)
        model = PerturbationModel(mu=0.01, sigma=0.2)
        for q in rng.normal(size=50):
            total = node_probability(q, 0, model) + node_probability(q, 1, model)
            assert total == pytest.approx(1.0, abs=1e-12)

    def test_monte_carlo_agreement(self):
        rng = np.random.default_rng(9)
        for q, mu, sigma in ((-0.2, 0.0, 0.05), (0.05, 0.01, 0.1), (0.0, -0.02, 0.3)):
            model = PerturbationModel(mu=mu, sigma=sigma)
            draws = q + rng.normal(mu, sigma, size=1_000_000)
            freq = float((draws >= 0).mean())
            assert node_probability(q, 1, model) == pytest.approx(freq, abs=0.005)


class TestLeafLogProbability:
    def _small_tree(self, seed=0, depth=6, dim=12, n=60):
        rng = np.random.default_rng(seed)
        X = random_unit_vectors(rng, n, dim)
        tree = build_tree(binarize(X), np.arange(n), depth=depth, seed=seed)
        return tree, X, rng

    def test_depth_one_equals_single_node(self):
        bits = np.array([[1, 0], [0, 1]], dtype=np.uint8)
        tree = build_tree(bits, np.arange(2), depth=1, seed=0, candidate_dims=2)
        model = PerturbationModel(0.0, 0.1)
        q = np.array([0.2, -0.3])
        dim = tree.tests[1]
        for bit in (0, 1):
            assert leaf_log_probability(tree, q, bit, model) == pytest.approx(
                math.log(node_probability(q[dim], bit, model)), abs=1e-15
            )

    def test_probabilities_sum_to_one(self):
        tree, X, rng = self._small_tree(depth=9)
        model = PerturbationModel(0.005, 0.08)
        q = random_unit_vectors(rng, 1, 12)[0]
        total = sum(
            math.exp(leaf_log_probability(tree, q, path, model))
            for path in range(1 << tree.depth)
        )
        assert total == pytest.approx(1.0, abs=1e-9)

    def test_traversal_leaf_beats_single_bit_flips(self):
        tree, X, rng = self._small_tree(depth=6)
        model = PerturbationModel(0.0, 0.1)
        for row in range(0, 10):
            q = X[row]
            own = traverse(tree, binarize(q))
            own_logp = leaf_log_probability(tree, q, own, model)
            for bit in range(tree.depth):
                sibling = own ^ (1 << bit)
                assert own_logp >= leaf_log_probability(tree, q, sibling, model) - 1e-12

    def test_invalid_path_rejected(self):
        tree, X, _ = self._small_tree(depth=4)
        model = PerturbationModel(0.0, 0.1)
        with pytest.raises(ValueError, match="out of range"):
            leaf_log_probability(tree, X[0], 1 << 4, model)


class TestPrioritySearch:
    def _fitted(self, seed=0, n=300, dim=24, trees=3, depth=7):
        rng = np.random.default_rng(seed)
        X = random_unit_vectors(rng, n, dim)
        forest = RandomTreeForest(n_trees=trees, depth=depth, random_state=seed).fit(
            X, np.arange(n)
        )
        return forest, X, rng

    def test_exhaustive_budget_returns_whole_database(self):
        forest, X, rng = self._fitted()
        model = PerturbationModel(0.0, 0.1)
        q = random_unit_vectors(rng, 1, 24)[0]
        result = forest.priority_search(q, model, max_leaves=forest.total_leaves_)
        assert result.candidate_rows.tolist() == list(range(300))

    def test_single_tree_best_leaf_is_enumerated_argmax(self):
        # The first emitted leaf must be the most probable nonempty leaf by
        # exhaustive enumeration.  (The query's own traversal leaf maximizes
        # every factor along its own path, but with path-dependent test
        # dimensions another branch can still carry more total mass, so
        # argmax is the defensible contract; the flip-sibling dominance of
        # the traversal leaf is asserted separately.)
        forest, X, rng = self._fitted(trees=1)
        model = PerturbationModel(0.0, 0.05)
        tree = forest.trees_[0]
        for _ in range(10):
            q = random_unit_vectors(rng, 1, 24)[0]
            result = forest.priority_search(q, model, max_leaves=1)
            hit = result.leaves[0]
            best = max(
                tree.leaves,
                key=lambda path: leaf_log_probability(tree, q, path, model),
            )
            assert hit.path == best
            assert hit.log_probability == pytest.approx(
                leaf_log_probability(tree, q, best, model), abs=1e-12
            )

    def test_emission_order_matches_exhaustive_ranking(self):
        forest, X, rng = self._fitted(trees=2, depth=8)
        model = PerturbationModel(0.01, 0.12)
        q = random_unit_vectors(rng, 1, 24)[0]
        result = forest.priority_search(q, model, max_leaves=10_000)
        exact = sorted(
            (
                (t, path, leaf_log_probability(tree, q, path, model))
                for t, tree in enumerate(forest.trees_)
                for path in tree.leaves
            ),
            key=lambda item: -item[2],
        )
        assert len(result.leaves) == len(exact)
        emitted_logps = [hit.log_probability for hit in result.leaves]
        assert np.allclose(emitted_logps, [lp for _, _, lp in exact], atol=1e-9)
        # Non-increasing emission is implied but assert it directly too.
        assert all(a >= b - 1e-12 for a, b in zip(emitted_logps, emitted_logps[1:]))

    def test_candidate_sets_nest_as_budget_grows(self):
        forest, X, rng = self._fitted()
        model = PerturbationModel(0.0, 0.08)
        q = random_unit_vectors(rng, 1, 24)[0]
        previous = set()
        for budget in (1, 5, 20, 80, forest.total_leaves_):
            rows = set(forest.priority_search(q, model, budget).candidate_rows.tolist())
            assert previous <= rows
            previous = rows

    def test_deterministic(self):
        forest, X, rng = self._fitted()
        model = PerturbationModel(0.0, 0.08)
        q = random_unit_vectors(rng, 1, 24)[0]
        a = forest.priority_search(q, model, 40)
        b = forest.priority_search(q, model, 40)
        assert a.leaves == b.leaves
        assert np.array_equal(a.candidate_rows, b.candidate_rows)

    def test_requires_fit(self):
        with pytest.raises(NotFittedError):
            RandomTreeForest().priority_search(
                np.zeros(4), PerturbationModel(0.0, 0.1), 1
            )


class TestEstimatePerturbationModel:
    def test_identical_pairs_degenerate(self):
        rng = np.random.default_rng(10)
        X = random_unit_vectors(rng, 50, 16)
        model = estimate_perturbation_model(X, X.copy(), seed=0)
        assert model.mu == 0.0
        assert model.sigma == SIGMA_FLOOR
        assert model.degenerate

    def test_recovers_generating_parameters(self):
        rng = np.random.default_rng(11)
        X = random_unit_vectors(rng, 4000, 32)
        delta = rng.normal(0.01, 0.05, size=X.shape)
        model = estimate_perturbation_model(X, X + delta, seed=1)
        assert model.mu == pytest.approx(0.01, abs=0.002)
        assert model.sigma == pytest.approx(0.05, abs=0.002)
        assert not model.degenerate

    def test_deterministic_under_seed(self):
        rng = np.random.default_rng(12)
        X = random_unit_vectors(rng, 100, 8)
        Y = perturb_unit_vectors(rng, X, 0.05)
        a = estimate_perturbation_model(X, Y, samples_per_test=10_000, seed=9)
        b = estimate_perturbation_model(X, Y, samples_per_test=10_000, seed=9)
        assert a == b

    def test_empty_pairs_rejected(self):
        with pytest.raises(ValueError, match="no matched pairs"):
            estimate_perturbation_model(np.empty((0, 4)), np.empty((0, 4)))


class TestForestSerialization:
    def test_round_trip_preserves_search(self, tmp_path):
        rng = np.random.default_rng(13)
        X = random_unit_vectors(rng, 150, 16)
        forest = RandomTreeForest(n_trees=3, depth=6, random_state=2).fit(X, np.arange(150))
        path = tmp_path / "index.plrt"
        save_forest(forest, path)
        loaded = load_forest(path)
        model = PerturbationModel(0.0, 0.1)
        q = random_unit_vectors(rng, 1, 16)[0]
        a = forest.priority_search(q, model, 25)
        b = loaded.priority_search(q, model, 25)
        assert a.leaves == b.leaves
        assert np.array_equal(a.candidate_rows, b.candidate_rows)

    def test_serialization_is_byte_stable(self, tmp_path):
        rng = np.random.default_rng(14)
        X = random_unit_vectors(rng, 80, 16)
        forest = RandomTreeForest(n_trees=2, depth=5, random_state=3).fit(X, np.arange(80))
        p1, p2 = tmp_path / "a.plrt", tmp_path / "b.plrt"
        save_forest(forest, p1)
        save_forest(load_forest(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.plrt"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_forest(path)

    def test_model_sidecar_round_trip(self, tmp_path):
        model = PerturbationModel(mu=0.0123, sigma=0.0456, degenerate=False)
        path = tmp_path / "model.txt"
        save_model(model, path)
        assert load_model(path) == model


class TestSklearnProtocol:
    def test_get_params_and_clone(self):
        forest = RandomTreeForest(n_trees=2, depth=4, candidate_dims=8, random_state=5)
        params = forest.get_params()
        assert params["n_trees"] == 2 and params["depth"] == 4
        cloned = clone(forest)
        assert cloned.get_params() == params

    def test_set_params(self):
        forest = RandomTreeForest().set_params(depth=3)
        assert forest.depth == 3
