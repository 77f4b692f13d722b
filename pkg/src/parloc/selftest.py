"""Invariant checks over generated fixtures, behind the selftest command."""

from __future__ import annotations

import math
import os
import tempfile

import numpy as np

from . import io as pio
from .descriptors import binarize
from .forest import (
    PerturbationModel,
    RandomTreeForest,
    leaf_log_probability,
    traverse,
)
from .localizer import VisualLocalizer
from .pose import CameraIntrinsics, CameraPose, project_many, ransac_pnp
from .pose import _rodrigues
from .synthetic import make_localization_scene, make_map_database, random_unit_vectors


def _check(name, ok, detail=""):
    print(f"{'ok' if ok else 'FAIL'} {name}" + (f" ({detail})" if detail else ""))
    return bool(ok)


def run_selftest(seed: int = 0) -> bool:
    rng = np.random.default_rng(seed)
    passed = True

    # Map files: canonical save/load is byte-stable.
    db = make_map_database(seed=seed, n_landmarks=40, n_frames=6)
    with tempfile.TemporaryDirectory() as tmp:
        l1, f1 = os.path.join(tmp, "l1"), os.path.join(tmp, "f1")
        l2, f2 = os.path.join(tmp, "l2"), os.path.join(tmp, "f2")
        pio.save_map(db, l1, f1)
        db2 = pio.load_map(l1, f1)
        pio.save_map(db2, l2, f2)
        same = (
            open(l1, "rb").read() == open(l2, "rb").read()
            and open(f1, "rb").read() == open(f2, "rb").read()
        )
    passed &= _check("map save/load round-trip is byte-identical", same)

    # Forest: every entry is found in the leaf its own descriptor reaches.
    X = random_unit_vectors(rng, 300, 32)
    y = np.arange(300, dtype=np.int64)
    forest = RandomTreeForest(n_trees=4, depth=8, random_state=seed).fit(X, y)
    bits = binarize(X)
    ok = all(
        row in tree.leaves.get(traverse(tree, bits[row]), np.empty(0)).tolist()
        for tree in forest.trees_
        for row in range(0, 300, 7)
    )
    passed &= _check("forest traversal round-trip", ok)

    # Leaf probabilities of one tree sum to 1.
    model = PerturbationModel(0.0, 0.1)
    tree = forest.trees_[0]
    total = sum(
        math.exp(leaf_log_probability(tree, X[0], path, model))
        for path in range(1 << tree.depth)
    )
    passed &= _check("leaf probability normalization", abs(total - 1.0) < 1e-9,
                     f"sum={total:.12f}")

    # Priority search emits leaves in exhaustive probability order.
    single = RandomTreeForest(n_trees=1, depth=8, random_state=seed + 1).fit(X, y)
    stree = single.trees_[0]
    q = random_unit_vectors(rng, 1, 32)[0]
    emitted = single.priority_search(q, model, max_leaves=10_000).leaves
    exact = sorted(
        ((path, leaf_log_probability(stree, q, path, model)) for path in stree.leaves),
        key=lambda item: -item[1],
    )
    ok = len(emitted) == len(exact) and all(
        abs(hit.log_probability - logp) < 1e-9
        for hit, (path, logp) in zip(emitted, exact)
    )
    passed &= _check("priority search matches exhaustive ranking", ok)

    # Noiseless RANSAC recovers an exact pose.
    intr = CameraIntrinsics(500, 500, 320, 240)
    gt = CameraPose(_rodrigues(np.array([0.1, -0.2, 0.05])), np.array([0.2, -0.1, 1.0]))
    pc = np.column_stack([
        rng.uniform(-2, 2, 60), rng.uniform(-2, 2, 60), rng.uniform(4, 10, 60),
    ])
    pts = (pc - gt.translation) @ gt.rotation
    px, _ = project_many(gt, intr, pts)
    result = ransac_pnp(pts, px, intr, seed=seed)
    err = max(
        np.abs(result.pose.rotation - gt.rotation).max(),
        np.abs(result.pose.translation - gt.translation).max(),
    ) if result.pose is not None else np.inf
    passed &= _check("noiseless pose recovery", err < 1e-8, f"max err {err:.2e}")

    # Fusion: the fused pipeline registers at least as much as each branch.
    scene = make_localization_scene(seed=seed, n_landmarks=250, n_frames=20,
                                    n_queries=8, keypoints_per_query=30,
                                    descriptor_dim=32)
    counts = {}
    for mode in ("fused", "tree_only", "retrieval_only"):
        localizer = VisualLocalizer(
            n_trees=4, depth=10, mode=mode, max_ransac_iterations=300,
            random_state=seed,
        ).fit(scene.db)
        counts[mode] = sum(r.status == "ok" for r in localizer.predict(scene.queries))
    ok = counts["fused"] >= max(counts["tree_only"], counts["retrieval_only"])
    passed &= _check("fused registers >= each single branch", ok, str(counts))

    # Determinism: fitting and predicting twice gives identical results.
    a = VisualLocalizer(n_trees=4, depth=10, max_ransac_iterations=300,
                        random_state=seed).fit(scene.db)
    b = VisualLocalizer(n_trees=4, depth=10, max_ransac_iterations=300,
                        random_state=seed).fit(scene.db)
    ra = a.predict(scene.queries)
    rb = b.predict(scene.queries)
    ok = all(
        x.status == y.status
        and x.inlier_indices == y.inlier_indices
        and (x.pose is None or np.array_equal(x.pose.rotation, y.pose.rotation))
        for x, y in zip(ra, rb)
    )
    passed &= _check("end-to-end determinism", ok)

    print("selftest " + ("passed" if passed else "FAILED"))
    return passed
