"""Random-tree index over binary descriptors with probabilistic priority search.

Each tree is a complete binary tree of fixed depth K.  Every internal node
tests one descriptor dimension: entries whose sign bit at that dimension is
1 go right, 0 goes left, so indexing a descriptor needs no distance
computation.  Leaves hold buckets of database entry rows; empty leaves are
not stored.

Node tests are chosen during build from a random sample of candidate
dimensions, scored by split balance plus the number of same-landmark entry
groups the split tears across both children (weight 1).  This keeps
descriptors of one landmark together while balancing bucket sizes, and is
fully deterministic under the build seed.

Queries rank leaves by the probability that a matching descriptor lands in
them.  The match is modeled as the query plus i.i.d. Gaussian perturbation
delta ~ N(mu, sigma^2) on each dimension, so at a node testing dimension d
with query value q_d the branch probabilities are

    P(bit = 0) = Phi(-(mu + q_d) / sigma),    P(bit = 1) = 1 - P(bit = 0),

with Phi the standard normal CDF, and a leaf's probability is the product
of its path factors.  Probabilities accumulate in log space; a best-first
queue over partial paths therefore emits nonempty leaves across all trees
of a forest in non-increasing probability order.

Internal nodes are addressed heap-style: root is 1 and the children of node
i are 2i and 2i+1, so a leaf's K-bit path (first branch as most significant
bit) equals its node index minus 2^K.  Nodes never reached by any database
entry still need a defined test for probability arithmetic over arbitrary
paths; those fall back to a seeded hash of the node index, which keeps the
complete-tree semantics without storing 2^K - 1 entries.
"""

from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass
from heapq import heappop, heappush
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .validation import as_bit_vector, as_float_vector, check_unit_rows

ROOT_INDEX = 1

# Smallest sigma reported by model estimation; flags degenerate (zero
# variance) sample sets while keeping the model usable downstream.
SIGMA_FLOOR = float(np.finfo(np.float64).eps)

_MASK64 = (1 << 64) - 1
_SQRT2 = math.sqrt(2.0)
# Probability clamp so log-space accumulation never hits log(0); at most
# ~1e-297 of mass moves, far below every tolerance used on probabilities.
_P_MIN = 1e-300
_P_MAX = float(np.nextafter(1.0, 0.0))


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def forest_tree_seed(seed: int, tree_index: int) -> int:
    """Integer seed of tree ``tree_index`` in a forest built with ``seed``."""
    return _splitmix64(_splitmix64(seed & _MASK64) ^ (tree_index + 1))


def _fallback_dimension(tree_seed: int, node_index: int, n_dims: int) -> int:
    return _splitmix64(tree_seed ^ (node_index * 0xD1B54A32D192ED03 & _MASK64)) % n_dims


@dataclass(frozen=True)
class PerturbationModel:
    """Gaussian model of the per-dimension gap between matching descriptors."""

    mu: float
    sigma: float
    degenerate: bool = False

    def __post_init__(self):
        if not (self.sigma > 0.0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be positive and finite, got {self.sigma}")
        if not math.isfinite(self.mu):
            raise ValueError(f"mu must be finite, got {self.mu}")


def node_probability(q_d: float, branch_bit: int, model: PerturbationModel) -> float:
    """Probability that a match's sign bit at this node equals ``branch_bit``.

    The matching value is q_d + delta with delta ~ N(mu, sigma^2); the bit is
    1 exactly when that value is nonnegative.
    """
    if branch_bit not in (0, 1):
        raise ValueError(f"branch_bit must be 0 or 1, got {branch_bit}")
    z = (model.mu + q_d) / (model.sigma * _SQRT2)
    # erfc on both sides keeps tail probabilities accurate.
    p = 0.5 * math.erfc(z) if branch_bit == 0 else 0.5 * math.erfc(-z)
    return min(max(p, _P_MIN), _P_MAX)


def estimate_perturbation_model(
    queries: np.ndarray,
    matches: np.ndarray,
    tests_to_sample: int = 10,
    samples_per_test: int = 100_000,
    seed: int = 0,
) -> PerturbationModel:
    """Fit (mu, sigma) from matched descriptor pairs.

    Samples ``tests_to_sample`` distinct dimensions; for each, draws
    ``samples_per_test`` pairs with replacement and takes mean and standard
    deviation of the per-dimension gap match - query.  The returned model
    averages the per-dimension estimates.  A zero-variance sample set yields
    the sigma floor with ``degenerate`` set.
    """
    q = np.asarray(queries, dtype=np.float64)
    p = np.asarray(matches, dtype=np.float64)
    if q.shape != p.shape or q.ndim != 2:
        raise ValueError(f"pair arrays must have matching 2-D shapes, got {q.shape} vs {p.shape}")
    if q.shape[0] == 0:
        raise ValueError("no matched pairs to estimate from")
    n, dim = q.shape
    delta = p - q
    rng = np.random.default_rng(seed)
    dims = rng.choice(dim, size=min(tests_to_sample, dim), replace=False)
    mus, sigmas = [], []
    for d in dims:
        idx = rng.integers(0, n, size=samples_per_test)
        samples = delta[idx, d]
        mus.append(float(samples.mean()))
        sigmas.append(float(samples.std(ddof=1)) if samples_per_test > 1 else 0.0)
    mu = float(np.mean(mus))
    sigma = float(np.mean(sigmas))
    if sigma < SIGMA_FLOOR:
        return PerturbationModel(mu, SIGMA_FLOOR, degenerate=True)
    return PerturbationModel(mu, sigma)


@dataclass
class RandomTree:
    """One depth-K dimension-test tree over a fixed entry set."""

    depth: int
    n_dims: int
    seed: int                        # drives both build rng and fallback tests
    tests: dict[int, int]            # node index -> tested dimension
    leaves: dict[int, np.ndarray]    # K-bit path -> sorted entry rows

    def test_dimension(self, node_index: int) -> int:
        dim = self.tests.get(node_index)
        if dim is None:
            dim = _fallback_dimension(self.seed, node_index, self.n_dims)
        return dim


def _select_dimension(bits, landmark_ids, rows, rng, candidate_dims):
    """Pick the test dimension for one node.

    Score = |n_left - n_right| + (number of landmarks whose entries land in
    both children); smallest score wins, ties to the smallest dimension.
    """
    n_dims = bits.shape[1]
    k = min(candidate_dims, n_dims)
    cand = np.sort(rng.choice(n_dims, size=k, replace=False))
    sub = bits[np.ix_(rows, cand)].astype(np.int64)
    m = rows.size
    ones = sub.sum(axis=0)
    balance = np.abs(m - 2 * ones)

    ids = landmark_ids[rows]
    order = np.argsort(ids, kind="stable")
    sorted_ids = ids[order]
    starts = np.flatnonzero(np.r_[True, sorted_ids[1:] != sorted_ids[:-1]])
    group_sizes = np.diff(np.r_[starts, m])
    group_ones = np.add.reduceat(sub[order], starts, axis=0)
    splits = ((group_ones > 0) & (group_ones < group_sizes[:, np.newaxis])).sum(axis=0)

    return int(cand[int(np.argmin(balance + splits))])


def build_tree(
    bits: np.ndarray,
    landmark_ids: np.ndarray,
    depth: int,
    seed: int,
    candidate_dims: int = 64,
) -> RandomTree:
    """Build one tree over entry rows; deterministic under ``seed``.

    ``bits`` is the (n_entries, D) binary matrix, ``landmark_ids`` the
    landmark of each row (used as supervision by the split score).  Depth
    may exceed D; dimensions can repeat along a path.
    """
    bits = np.asarray(bits, dtype=np.uint8)
    landmark_ids = np.asarray(landmark_ids, dtype=np.int64)
    if bits.ndim != 2 or bits.shape[0] == 0:
        raise ValueError("entries must be a nonempty 2-D bit matrix")
    if landmark_ids.shape != (bits.shape[0],):
        raise ValueError("landmark_ids must align with entry rows")
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    if candidate_dims < 1:
        raise ValueError(f"candidate_dims must be >= 1, got {candidate_dims}")

    rng = np.random.default_rng(seed)
    tests: dict[int, int] = {}
    leaves: dict[int, np.ndarray] = {}
    # Explicit stack, children pushed right-then-left so the rng is consumed
    # in depth-first left-to-right node order.
    stack = [(ROOT_INDEX, 0, np.arange(bits.shape[0]))]
    while stack:
        node, level, rows = stack.pop()
        if level == depth:
            leaves[node - (1 << depth)] = np.sort(rows).astype(np.int64)
            continue
        dim = _select_dimension(bits, landmark_ids, rows, rng, candidate_dims)
        tests[node] = dim
        right_mask = bits[rows, dim] == 1
        right_rows = rows[right_mask]
        left_rows = rows[~right_mask]
        if right_rows.size:
            stack.append((2 * node + 1, level + 1, right_rows))
        if left_rows.size:
            stack.append((2 * node, level + 1, left_rows))
    return RandomTree(depth=depth, n_dims=bits.shape[1], seed=int(seed) & _MASK64,
                      tests=tests, leaves=leaves)


def build_forest(
    bits: np.ndarray,
    landmark_ids: np.ndarray,
    n_trees: int,
    depth: int,
    seed: int,
    candidate_dims: int = 64,
) -> list[RandomTree]:
    """T independent trees over the same entries, seeds derived from ``seed``."""
    if n_trees < 1:
        raise ValueError(f"n_trees must be >= 1, got {n_trees}")
    return [
        build_tree(bits, landmark_ids, depth, forest_tree_seed(seed, t), candidate_dims)
        for t in range(n_trees)
    ]


def traverse(tree: RandomTree, query_bits: np.ndarray) -> int:
    """Leaf path reached by a binary descriptor; no distance computations."""
    q = as_bit_vector(query_bits, "query_bits", dim=tree.n_dims)
    node = ROOT_INDEX
    for _ in range(tree.depth):
        node = 2 * node + int(q[tree.test_dimension(node)])
    return node - (1 << tree.depth)


def leaf_log_probability(
    tree: RandomTree,
    query: np.ndarray,
    path: int,
    model: PerturbationModel,
) -> float:
    """Log probability that a match of ``query`` lands in leaf ``path``.

    Defined for every one of the 2^K paths (unpopulated nodes use the
    tree's fallback tests), so leaf probabilities of one tree sum to 1.
    """
    q = as_float_vector(query, "query", dim=tree.n_dims)
    if not 0 <= path < (1 << tree.depth):
        raise ValueError(f"path {path} out of range for depth {tree.depth}")
    node = ROOT_INDEX
    logp = 0.0
    for level in range(tree.depth):
        bit = (path >> (tree.depth - 1 - level)) & 1
        logp += math.log(node_probability(q[tree.test_dimension(node)], bit, model))
        node = 2 * node + bit
    return logp


class LeafHit(NamedTuple):
    tree_index: int
    path: int
    log_probability: float


class PrioritySearchResult(NamedTuple):
    leaves: list[LeafHit]            # emission order, log-probability non-increasing
    candidate_rows: np.ndarray       # sorted unique entry rows over all buckets


class RandomTreeForest(BaseEstimator):
    """Forest of supervised random dimension-test trees, sklearn style.

    Parameters are fixed at construction; ``fit`` takes the matrix of real
    unit-norm database descriptors (bits are derived internally so real and
    binary forms can never drift) plus the landmark id of each row.
    """

    def __init__(self, n_trees=6, depth=23, candidate_dims=64, random_state=0):
        self.n_trees = n_trees
        self.depth = depth
        self.candidate_dims = candidate_dims
        self.random_state = random_state

    def fit(self, X, y):
        from .descriptors import binarize

        X = check_unit_rows(X, "X")
        y = np.asarray(y, dtype=np.int64)
        if y.shape != (X.shape[0],):
            raise ValueError("y must hold one landmark id per descriptor row")
        bits = binarize(X)
        self.trees_ = build_forest(
            bits, y, self.n_trees, self.depth, self.random_state, self.candidate_dims
        )
        self.landmark_ids_ = y.copy()
        # Descriptor index = position of the row within its landmark, in
        # order of appearance.
        desc_index = np.zeros(y.shape[0], dtype=np.int32)
        seen: dict[int, int] = {}
        for i, lid in enumerate(y.tolist()):
            desc_index[i] = seen.get(lid, 0)
            seen[lid] = desc_index[i] + 1
        self.descriptor_index_ = desc_index
        self.n_features_in_ = X.shape[1]
        return self

    def _check_fitted(self):
        if not hasattr(self, "trees_"):
            raise NotFittedError("forest is not fitted; call fit(X, y) first")

    @property
    def total_leaves_(self) -> int:
        self._check_fitted()
        return sum(len(t.leaves) for t in self.trees_)

    def priority_search(
        self,
        query: np.ndarray,
        model: PerturbationModel,
        max_leaves: int = 100,
    ) -> PrioritySearchResult:
        """Best-first enumeration of nonempty leaves across all trees.

        A single queue spans the forest, so ``max_leaves`` bounds the number
        of emitted leaves globally, not per tree.  The candidate set is the
        deduplicated union of the emitted buckets.
        """
        self._check_fitted()
        if max_leaves < 1:
            raise ValueError(f"max_leaves must be >= 1, got {max_leaves}")
        q = as_float_vector(query, "query", dim=self.n_features_in_)

        counter = itertools.count()
        heap = []
        for t in range(len(self.trees_)):
            heappush(heap, (0.0, next(counter), t, ROOT_INDEX, 0))

        leaves: list[LeafHit] = []
        buckets: list[np.ndarray] = []
        while heap and len(leaves) < max_leaves:
            neg_logp, _, t, node, level = heappop(heap)
            tree = self.trees_[t]
            if level == tree.depth:
                path = node - (1 << tree.depth)
                leaves.append(LeafHit(t, path, -neg_logp))
                buckets.append(tree.leaves[path])
                continue
            q_d = q[tree.tests[node]]
            for bit in (0, 1):
                child = 2 * node + bit
                if level + 1 == tree.depth:
                    populated = (child - (1 << tree.depth)) in tree.leaves
                else:
                    populated = child in tree.tests
                if not populated:
                    continue
                p = node_probability(q_d, bit, model)
                heappush(heap, (neg_logp - math.log(p), next(counter), t, child, level + 1))

        if buckets:
            rows = np.unique(np.concatenate(buckets))
        else:
            rows = np.empty(0, dtype=np.int64)
        return PrioritySearchResult(leaves, rows)

    def candidate_landmarks(self, rows: np.ndarray) -> np.ndarray:
        """Sorted unique landmark ids behind a set of entry rows."""
        self._check_fitted()
        return np.unique(self.landmark_ids_[rows])


# ---------------------------------------------------------------------------
# Serialization: versioned little-endian binary container.
#
#   header:  magic b"PLRT" | u32 version | u32 D | u32 T | u32 K | u64 n_entries
#   entries: n_entries x i64 landmark ids, n_entries x i32 descriptor indices
#   per tree: u64 seed | u64 n_tests | n_tests x (u64 node, u32 dim)
#             | u64 n_leaves | per leaf: u64 path | u64 len | len x u32 rows
#
# Tests and leaves are written sorted by node index / path, so identical
# forests serialize to identical bytes.
# ---------------------------------------------------------------------------

FOREST_MAGIC = b"PLRT"
FOREST_VERSION = 1


def save_forest(forest: RandomTreeForest, path) -> None:
    forest._check_fitted()
    trees = forest.trees_
    with open(path, "wb") as fh:
        fh.write(FOREST_MAGIC)
        fh.write(struct.pack(
            "<IIIIQ",
            FOREST_VERSION,
            forest.n_features_in_,
            len(trees),
            trees[0].depth,
            forest.landmark_ids_.shape[0],
        ))
        fh.write(forest.landmark_ids_.astype("<i8").tobytes())
        fh.write(forest.descriptor_index_.astype("<i4").tobytes())
        for tree in trees:
            fh.write(struct.pack("<QQ", tree.seed, len(tree.tests)))
            for node in sorted(tree.tests):
                fh.write(struct.pack("<QI", node, tree.tests[node]))
            fh.write(struct.pack("<Q", len(tree.leaves)))
            for leaf_path in sorted(tree.leaves):
                rows = tree.leaves[leaf_path]
                fh.write(struct.pack("<QQ", leaf_path, rows.shape[0]))
                fh.write(rows.astype("<u4").tobytes())


def _read_exactly(fh, size, path):
    data = fh.read(size)
    if len(data) != size:
        raise ValueError(f"{path}: truncated forest file")
    return data


def load_forest(path) -> RandomTreeForest:
    with open(path, "rb") as fh:
        magic = _read_exactly(fh, 4, path)
        if magic != FOREST_MAGIC:
            raise ValueError(f"{path}: not a forest container (bad magic {magic!r})")
        version, n_dims, n_trees, depth, n_entries = struct.unpack(
            "<IIIIQ", _read_exactly(fh, 24, path)
        )
        if version != FOREST_VERSION:
            raise ValueError(f"{path}: unsupported forest version {version}")
        landmark_ids = np.frombuffer(
            _read_exactly(fh, 8 * n_entries, path), dtype="<i8"
        ).astype(np.int64)
        desc_index = np.frombuffer(
            _read_exactly(fh, 4 * n_entries, path), dtype="<i4"
        ).astype(np.int32)
        trees = []
        for _ in range(n_trees):
            seed, n_tests = struct.unpack("<QQ", _read_exactly(fh, 16, path))
            tests = {}
            for _ in range(n_tests):
                node, dim = struct.unpack("<QI", _read_exactly(fh, 12, path))
                tests[node] = dim
            (n_leaves,) = struct.unpack("<Q", _read_exactly(fh, 8, path))
            leaves = {}
            for _ in range(n_leaves):
                leaf_path, count = struct.unpack("<QQ", _read_exactly(fh, 16, path))
                rows = np.frombuffer(
                    _read_exactly(fh, 4 * count, path), dtype="<u4"
                ).astype(np.int64)
                leaves[leaf_path] = rows
            trees.append(RandomTree(depth=depth, n_dims=n_dims, seed=seed,
                                    tests=tests, leaves=leaves))
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after forest data")

    forest = RandomTreeForest(n_trees=n_trees, depth=depth)
    forest.trees_ = trees
    forest.landmark_ids_ = landmark_ids
    forest.descriptor_index_ = desc_index
    forest.n_features_in_ = n_dims
    return forest


def save_model(model: PerturbationModel, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"mu {model.mu!r}\n")
        fh.write(f"sigma {model.sigma!r}\n")
        fh.write(f"degenerate {int(model.degenerate)}\n")


def load_model(path) -> PerturbationModel:
    values = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition(" ")
            values[key] = value
    try:
        return PerturbationModel(
            mu=float(values["mu"]),
            sigma=float(values["sigma"]),
            degenerate=bool(int(values.get("degenerate", "0"))),
        )
    except KeyError as exc:
        raise ValueError(f"{path}: missing model field {exc}") from exc
