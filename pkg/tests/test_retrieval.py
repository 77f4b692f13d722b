"""Frame retrieval: brute-force KNN correctness and candidate expansion."""

import numpy as np
import pytest
from sklearn.exceptions import NotFittedError

from parloc.retrieval import FrameRetrievalIndex, frame_candidates
from parloc.synthetic import make_map_database, random_unit_vectors


def fitted_index(rng, n_frames=500, dim=32, n_neighbors=20):
    G = random_unit_vectors(rng, n_frames, dim)
    ids = np.arange(n_frames, dtype=np.int64)
    return FrameRetrievalIndex(n_neighbors=n_neighbors).fit(G, ids), G


class TestKnnFrames:
    def test_exact_match_is_first(self):
        rng = np.random.default_rng(0)
        index, G = fitted_index(rng, n_frames=50)
        hits = index.knn_frames(G[17], k=1)
        assert hits == [(17, 0.0)]

    def test_k_larger_than_index_returns_all_sorted(self):
        rng = np.random.default_rng(1)
        index, G = fitted_index(rng, n_frames=10)
        q = random_unit_vectors(rng, 1, 32)[0]
        hits = index.knn_frames(q, k=50)
        assert len(hits) == 10
        dists = [d for _, d in hits]
        assert dists == sorted(dists)

    def test_matches_brute_force_sort(self):
        rng = np.random.default_rng(2)
        index, G = fitted_index(rng, n_frames=500)
        for _ in range(10):
            q = random_unit_vectors(rng, 1, 32)[0]
            hits = index.knn_frames(q, k=20)
            full = sorted(
                ((float(np.linalg.norm(G[i] - q)), i) for i in range(500))
            )
            assert [i for _, i in full[:20]] == [i for i, _ in hits]
            np.testing.assert_allclose(
                [d for d, _ in full[:20]], [d for _, d in hits], atol=1e-12
            )

    def test_result_is_prefix_of_full_ranking(self):
        rng = np.random.default_rng(3)
        index, G = fitted_index(rng, n_frames=100)
        q = random_unit_vectors(rng, 1, 32)[0]
        all_hits = index.knn_frames(q, k=100)
        for k in (1, 7, 40):
            assert index.knn_frames(q, k=k) == all_hits[:k]

    def test_ties_break_by_frame_id(self):
        G = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        index = FrameRetrievalIndex().fit(G, np.array([5, 1, 3]))
        hits = index.knn_frames(np.array([1.0, 0.0]), k=3)
        assert [fid for fid, _ in hits] == [3, 5, 1]

    def test_l2_order_equals_cosine_order_on_unit_vectors(self):
        rng = np.random.default_rng(4)
        index, G = fitted_index(rng, n_frames=200)
        q = random_unit_vectors(rng, 1, 32)[0]
        by_l2 = [fid for fid, _ in index.knn_frames(q, k=200)]
        cosines = G @ q
        by_cosine = sorted(range(200), key=lambda i: (-cosines[i], i))
        assert by_l2 == by_cosine

    def test_validation(self):
        rng = np.random.default_rng(5)
        index, G = fitted_index(rng, n_frames=10)
        with pytest.raises(ValueError, match="k must be >= 1"):
            index.knn_frames(G[0], k=0)
        with pytest.raises(ValueError, match="dimension"):
            index.knn_frames(np.zeros(7))
        with pytest.raises(NotFittedError):
            FrameRetrievalIndex().knn_frames(G[0])
        with pytest.raises(ValueError, match="zero frames"):
            FrameRetrievalIndex().fit(np.empty((0, 4)), np.empty(0))


class TestFrameCandidates:
    def test_single_frame_exact_visibility(self):
        db = make_map_database(seed=6)
        fid = next(iter(db.frames))
        assert frame_candidates([fid], db) == set(db.frames[fid].visible_landmarks)

    def test_union_without_duplicates(self):
        db = make_map_database(seed=7)
        fids = list(db.frames)[:2]
        expected = set(db.frames[fids[0]].visible_landmarks) | set(
            db.frames[fids[1]].visible_landmarks
        )
        assert frame_candidates(fids, db) == expected

    def test_many_frames_match_set_union_oracle(self):
        db = make_map_database(seed=8, n_landmarks=200, n_frames=25)
        fids = list(db.frames)[:20]
        oracle = set()
        for fid in fids:
            for lid in db.frames[fid].visible_landmarks:
                oracle.add(lid)
        assert frame_candidates(fids, db) == oracle

    def test_unknown_frame_rejected(self):
        db = make_map_database(seed=9)
        with pytest.raises(KeyError, match="9999"):
            frame_candidates([9999], db)
