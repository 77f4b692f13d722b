"""Domain records for the localization map: landmarks, frames, keypoints.

A map database couples a landmark table (3D points, each with one or more
unit-norm local descriptors) with a frame table (database images, each with
a unit-norm global descriptor and the set of landmark ids it observes).
Visibility is bidirectional: landmark ``observing_frames`` sets are always
rebuilt from the frame table, which is the single source of truth.

All records are treated as immutable once a :class:`MapDatabase` is built;
the database precomputes stacked descriptor arrays so that index build and
linear search run on contiguous numpy matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .descriptors import binarize
from .errors import IntegrityError
from .validation import as_float_vector, ingest_unit_rows


@dataclass
class LandmarkRecord:
    """A reconstructed 3D point with its database descriptors."""

    id: int
    position: np.ndarray                 # (3,) meters, world frame
    descriptors: np.ndarray              # (n_desc, D) unit rows
    observing_frames: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.position = as_float_vector(self.position, "position", dim=3)
        self.descriptors = ingest_unit_rows(self.descriptors, f"landmark {self.id} descriptors")
        if self.descriptors.shape[0] < 1:
            raise ValueError(f"landmark {self.id} has no descriptors")
        self.observing_frames = frozenset(int(f) for f in self.observing_frames)

    @property
    def binary_descriptors(self) -> np.ndarray:
        """Sign bits derived from the real descriptors (never stored)."""
        return binarize(self.descriptors)


@dataclass
class FrameRecord:
    """A database image: global descriptor plus the landmarks it observes."""

    id: int
    global_descriptor: np.ndarray        # (G,) unit norm
    visible_landmarks: frozenset

    def __post_init__(self):
        g = ingest_unit_rows(
            np.asarray(self.global_descriptor, dtype=np.float64)[np.newaxis, :],
            f"frame {self.id} global descriptor",
        )
        self.global_descriptor = g[0]
        self.visible_landmarks = frozenset(int(l) for l in self.visible_landmarks)
        if not self.visible_landmarks:
            raise IntegrityError(f"frame {self.id} observes no landmarks")


@dataclass
class QueryKeypoint:
    """A detected 2D feature in a query image."""

    pixel: np.ndarray                    # (2,) u, v in pixels
    orientation: float                   # radians
    scale: float                         # pixels, > 0
    descriptor: np.ndarray | None = None # (D,) unit norm, when extracted

    def __post_init__(self):
        self.pixel = as_float_vector(self.pixel, "pixel", dim=2)
        self.orientation = float(self.orientation)
        self.scale = float(self.scale)
        if self.scale <= 0:
            raise ValueError(f"keypoint scale must be positive, got {self.scale}")
        if self.descriptor is not None:
            self.descriptor = ingest_unit_rows(
                np.asarray(self.descriptor, dtype=np.float64)[np.newaxis, :],
                "keypoint descriptor",
            )[0]


class MapDatabase:
    """Validated landmark and frame tables with stacked descriptor arrays.

    Entry arrays stack every landmark descriptor row in ascending landmark
    id order (and per-landmark descriptor order), so row index r maps to
    ``(entry_landmark_ids[r], entry_descriptor_index[r])``.
    """

    def __init__(self, landmarks: dict[int, LandmarkRecord], frames: dict[int, FrameRecord]):
        if not landmarks:
            raise IntegrityError("map has no landmarks")
        if not frames:
            raise IntegrityError("map has no frames")
        self.landmarks = dict(sorted(landmarks.items()))
        self.frames = dict(sorted(frames.items()))
        self._validate_and_link()
        self._stack()

    def _validate_and_link(self):
        dims = {lm.descriptors.shape[1] for lm in self.landmarks.values()}
        if len(dims) != 1:
            raise IntegrityError(f"inconsistent local descriptor dimensions: {sorted(dims)}")
        self.descriptor_dim = dims.pop()
        gdims = {fr.global_descriptor.shape[0] for fr in self.frames.values()}
        if len(gdims) != 1:
            raise IntegrityError(f"inconsistent global descriptor dimensions: {sorted(gdims)}")
        self.global_dim = gdims.pop()

        observers: dict[int, set[int]] = {lid: set() for lid in self.landmarks}
        for fr in self.frames.values():
            for lid in fr.visible_landmarks:
                if lid not in self.landmarks:
                    raise IntegrityError(
                        f"frame {fr.id} references unknown landmark {lid}"
                    )
                observers[lid].add(fr.id)
        orphans = sorted(lid for lid, obs in observers.items() if not obs)
        if orphans:
            raise IntegrityError(
                f"landmarks observed by no frame: {orphans[:10]}"
            )
        for lid, obs in observers.items():
            self.landmarks[lid].observing_frames = frozenset(obs)

    def _stack(self):
        ids, desc_idx, blocks = [], [], []
        row_ranges: dict[int, tuple[int, int]] = {}
        start = 0
        for lid, lm in self.landmarks.items():
            n = lm.descriptors.shape[0]
            blocks.append(lm.descriptors)
            ids.append(np.full(n, lid, dtype=np.int64))
            desc_idx.append(np.arange(n, dtype=np.int32))
            row_ranges[lid] = (start, start + n)
            start += n
        self.descriptor_matrix = np.vstack(blocks)
        self.bits_matrix = binarize(self.descriptor_matrix)
        self.entry_landmark_ids = np.concatenate(ids)
        self.entry_descriptor_index = np.concatenate(desc_idx)
        self.landmark_row_ranges = row_ranges

        fids = sorted(self.frames)
        self.frame_ids = np.asarray(fids, dtype=np.int64)
        self.frame_descriptor_matrix = np.vstack(
            [self.frames[f].global_descriptor for f in fids]
        )

    @property
    def n_entries(self) -> int:
        return self.descriptor_matrix.shape[0]

    def landmark_rows(self, landmark_id: int) -> np.ndarray:
        start, stop = self.landmark_row_ranges[landmark_id]
        return np.arange(start, stop)

    def position(self, landmark_id: int) -> np.ndarray:
        return self.landmarks[landmark_id].position

    def matched_descriptor_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """All unordered descriptor pairs of the same landmark, as two arrays.

        Landmarks holding a single descriptor contribute nothing; the result
        may therefore be empty, which callers must handle (for example by
        falling back to an assumed perturbation scale).
        """
        left, right = [], []
        for lm in self.landmarks.values():
            n = lm.descriptors.shape[0]
            for i in range(n - 1):
                for j in range(i + 1, n):
                    left.append(lm.descriptors[i])
                    right.append(lm.descriptors[j])
        if not left:
            d = self.descriptor_dim
            return np.empty((0, d)), np.empty((0, d))
        return np.asarray(left), np.asarray(right)
