"""Text file formats for maps, queries, results, and ground truth.

All formats are whitespace-separated text with ``#`` comments and blank
lines ignored.  Floats are written with shortest round-trip precision, so
saving a loaded canonical file reproduces it byte for byte.

landmarks file     one line per landmark:
                   id x y z n_desc D v0 ... v(D-1) [next descriptor ...]
frames file        one line per frame:
                   id G g0 ... g(G-1) n_vis lid0 ... lid(n_vis-1)
query file         per image, a header line, a global-descriptor line, and
                   one line per keypoint:
                   image id n_keypoints fx fy cx cy k1 k2
                   global G g0 ... g(G-1)        (or: global none)
                   u v orientation scale D v0 ... v(D-1)
results file       one line per query:
                   query_id status tx ty tz qw qx qy qz n_inliers
ground-truth file  one line per query:
                   query_id tx ty tz qw qx qy qz

Poses are world-to-camera, rotation encoded as a unit quaternion with
nonnegative w.  Failed queries write the identity pose with zero inliers
and a non-ok status.  Binary local-descriptor bits are never stored; they
are derived from the real values on load.
"""

from __future__ import annotations

import numpy as np

from .errors import IntegrityError, ParseError
from .localizer import QueryImage
from .mapdata import FrameRecord, LandmarkRecord, MapDatabase
from .pose import (
    CameraIntrinsics,
    CameraPose,
    LocalizationResult,
    quaternion_to_rotation,
    rotation_to_quaternion,
)

STATUSES = ("ok", "insufficient_matches", "ransac_failed")


def _fmt(x: float) -> str:
    return repr(float(x))


def _content_lines(path):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line.split()


class _TokenLine:
    """One tokenized line with typed, position-checked accessors."""

    def __init__(self, path, lineno, tokens):
        self.path = path
        self.lineno = lineno
        self.tokens = tokens
        self.pos = 0

    def fail(self, message):
        raise ParseError(self.path, self.lineno, message)

    def take(self, kind, what):
        if self.pos >= len(self.tokens):
            self.fail(f"missing {what}")
        token = self.tokens[self.pos]
        self.pos += 1
        try:
            return kind(token)
        except ValueError:
            self.fail(f"bad {what}: {token!r}")

    def take_int(self, what):
        return self.take(int, what)

    def take_float(self, what):
        value = self.take(float, what)
        if not np.isfinite(value):
            self.fail(f"non-finite {what}: {value}")
        return value

    def take_floats(self, count, what):
        return np.array([self.take_float(what) for _ in range(count)])

    def done(self):
        if self.pos != len(self.tokens):
            self.fail(f"{len(self.tokens) - self.pos} unexpected trailing tokens")


# ---------------------------------------------------------------------------
# Map
# ---------------------------------------------------------------------------

def load_map(landmarks_path, frames_path) -> MapDatabase:
    """Parse and cross-validate the two map files.

    Descriptors are normalized on ingest, binary bits derived from real
    values, and visibility rebuilt in both directions; referential problems
    raise :class:`IntegrityError` naming the offending ids.
    """
    landmarks: dict[int, LandmarkRecord] = {}
    for lineno, tokens in _content_lines(landmarks_path):
        line = _TokenLine(landmarks_path, lineno, tokens)
        lid = line.take_int("landmark id")
        if lid in landmarks:
            raise IntegrityError(f"duplicate landmark id {lid}")
        position = line.take_floats(3, "position")
        n_desc = line.take_int("descriptor count")
        if n_desc < 1:
            line.fail(f"landmark {lid} needs at least one descriptor")
        dim = line.take_int("descriptor dimension")
        if dim < 1:
            line.fail(f"bad descriptor dimension {dim}")
        descs = np.vstack([line.take_floats(dim, "descriptor value") for _ in range(n_desc)])
        line.done()
        try:
            landmarks[lid] = LandmarkRecord(lid, position, descs)
        except ValueError as exc:
            raise ParseError(landmarks_path, lineno, str(exc)) from exc

    frames: dict[int, FrameRecord] = {}
    for lineno, tokens in _content_lines(frames_path):
        line = _TokenLine(frames_path, lineno, tokens)
        fid = line.take_int("frame id")
        if fid in frames:
            raise IntegrityError(f"duplicate frame id {fid}")
        gdim = line.take_int("global dimension")
        if gdim < 1:
            line.fail(f"bad global dimension {gdim}")
        gdesc = line.take_floats(gdim, "global descriptor value")
        n_vis = line.take_int("visibility count")
        visible = [line.take_int("landmark id") for _ in range(n_vis)]
        line.done()
        try:
            frames[fid] = FrameRecord(fid, gdesc, frozenset(visible))
        except IntegrityError:
            raise
        except ValueError as exc:
            raise ParseError(frames_path, lineno, str(exc)) from exc

    return MapDatabase(landmarks, frames)


def save_map(db: MapDatabase, landmarks_path, frames_path) -> None:
    with open(landmarks_path, "w") as fh:
        for lid, lm in db.landmarks.items():
            parts = [str(lid)] + [_fmt(v) for v in lm.position]
            parts.append(str(lm.descriptors.shape[0]))
            parts.append(str(lm.descriptors.shape[1]))
            for row in lm.descriptors:
                parts.extend(_fmt(v) for v in row)
            fh.write(" ".join(parts) + "\n")
    with open(frames_path, "w") as fh:
        for fid, fr in db.frames.items():
            parts = [str(fid), str(fr.global_descriptor.shape[0])]
            parts.extend(_fmt(v) for v in fr.global_descriptor)
            visible = sorted(fr.visible_landmarks)
            parts.append(str(len(visible)))
            parts.extend(str(l) for l in visible)
            fh.write(" ".join(parts) + "\n")


# ---------------------------------------------------------------------------
# Queries
# ---------------------------------------------------------------------------

def load_queries(path) -> list[QueryImage]:
    queries: list[QueryImage] = []
    lines = list(_content_lines(path))
    i = 0
    seen: set[int] = set()
    while i < len(lines):
        lineno, tokens = lines[i]
        line = _TokenLine(path, lineno, tokens)
        tag = line.take(str, "image header")
        if tag != "image":
            line.fail(f"expected 'image' header, got {tag!r}")
        qid = line.take_int("query id")
        if qid in seen:
            line.fail(f"duplicate query id {qid}")
        seen.add(qid)
        n_kp = line.take_int("keypoint count")
        fx = line.take_float("fx")
        fy = line.take_float("fy")
        cx = line.take_float("cx")
        cy = line.take_float("cy")
        k1 = line.take_float("k1")
        k2 = line.take_float("k2")
        line.done()
        try:
            intr = CameraIntrinsics(fx, fy, cx, cy, k1, k2)
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from exc

        i += 1
        if i >= len(lines):
            raise ParseError(path, lineno, f"query {qid}: missing global line")
        glineno, gtokens = lines[i]
        gline = _TokenLine(path, glineno, gtokens)
        if gline.take(str, "global tag") != "global":
            gline.fail("expected 'global' line after image header")
        if gtokens[1:] == ["none"]:
            gdesc = None
        else:
            gdim = gline.take_int("global dimension")
            gdesc = gline.take_floats(gdim, "global descriptor value")
            gline.done()

        kps = np.empty((n_kp, 4))
        descs = None
        for k in range(n_kp):
            i += 1
            if i >= len(lines):
                raise ParseError(path, lineno, f"query {qid}: expected {n_kp} keypoints")
            klineno, ktokens = lines[i]
            kline = _TokenLine(path, klineno, ktokens)
            kps[k, 0] = kline.take_float("u")
            kps[k, 1] = kline.take_float("v")
            kps[k, 2] = kline.take_float("orientation")
            kps[k, 3] = kline.take_float("scale")
            if kps[k, 3] <= 0:
                kline.fail(f"scale must be positive, got {kps[k, 3]}")
            dim = kline.take_int("descriptor dimension")
            row = kline.take_floats(dim, "descriptor value")
            kline.done()
            if descs is None:
                descs = np.empty((n_kp, dim))
            elif descs.shape[1] != dim:
                kline.fail(f"descriptor dimension changed from {descs.shape[1]} to {dim}")
            descs[k] = row
        if descs is None:
            descs = np.empty((0, 1))
        queries.append(QueryImage(qid, intr, gdesc, kps, descs))
        i += 1
    return queries


def save_queries(queries, path) -> None:
    with open(path, "w") as fh:
        for q in queries:
            intr = q.intrinsics
            fh.write(
                " ".join(
                    ["image", str(q.query_id), str(q.keypoints.shape[0])]
                    + [_fmt(v) for v in (intr.fx, intr.fy, intr.cx, intr.cy, intr.k1, intr.k2)]
                )
                + "\n"
            )
            if q.global_descriptor is None:
                fh.write("global none\n")
            else:
                g = q.global_descriptor
                fh.write(
                    " ".join(["global", str(g.shape[0])] + [_fmt(v) for v in g]) + "\n"
                )
            for kp, desc in zip(q.keypoints, q.descriptors):
                parts = [_fmt(v) for v in kp]
                parts.append(str(desc.shape[0]))
                parts.extend(_fmt(v) for v in desc)
                fh.write(" ".join(parts) + "\n")


# ---------------------------------------------------------------------------
# Results and ground truth
# ---------------------------------------------------------------------------

def save_results(results, path) -> None:
    """Write ``(query_id, LocalizationResult)`` pairs, one line each."""
    with open(path, "w") as fh:
        for qid, result in results:
            if result.pose is not None:
                q = rotation_to_quaternion(result.pose.rotation)
                t = result.pose.translation
            else:
                q = np.array([1.0, 0.0, 0.0, 0.0])
                t = np.zeros(3)
            parts = [str(qid), result.status]
            parts.extend(_fmt(v) for v in t)
            parts.extend(_fmt(v) for v in q)
            parts.append(str(len(result.inlier_indices)))
            fh.write(" ".join(parts) + "\n")


def load_results(path) -> dict[int, LocalizationResult]:
    results: dict[int, LocalizationResult] = {}
    for lineno, tokens in _content_lines(path):
        line = _TokenLine(path, lineno, tokens)
        qid = line.take_int("query id")
        if qid in results:
            line.fail(f"duplicate query id {qid}")
        status = line.take(str, "status")
        if status not in STATUSES:
            line.fail(f"unknown status {status!r}")
        t = line.take_floats(3, "translation")
        q = line.take_floats(4, "quaternion")
        n_inliers = line.take_int("inlier count")
        line.done()
        if status == "ok":
            pose = CameraPose(quaternion_to_rotation(q), t)
            # Inlier identities are not persisted, only their count.
            results[qid] = LocalizationResult(pose, frozenset(range(n_inliers)), 0, status)
        else:
            results[qid] = LocalizationResult(None, frozenset(), 0, status)
    return results


def save_ground_truth(poses, path) -> None:
    """Write ``{query_id: CameraPose}`` one line per query."""
    with open(path, "w") as fh:
        for qid in sorted(poses):
            pose = poses[qid]
            q = rotation_to_quaternion(pose.rotation)
            parts = [str(qid)]
            parts.extend(_fmt(v) for v in pose.translation)
            parts.extend(_fmt(v) for v in q)
            fh.write(" ".join(parts) + "\n")


def load_ground_truth(path) -> dict[int, CameraPose]:
    poses: dict[int, CameraPose] = {}
    for lineno, tokens in _content_lines(path):
        line = _TokenLine(path, lineno, tokens)
        qid = line.take_int("query id")
        if qid in poses:
            line.fail(f"duplicate query id {qid}")
        t = line.take_floats(3, "translation")
        q = line.take_floats(4, "quaternion")
        line.done()
        poses[qid] = CameraPose(quaternion_to_rotation(q), t)
    return poses


# ---------------------------------------------------------------------------
# Images: binary PGM (P5), 8-bit, intensities mapped to [0, 1]
# ---------------------------------------------------------------------------

def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported, maxval {maxval}")
    pos += 1   # single whitespace after maxval
    raster = data[pos:pos + width * height]
    if len(raster) != width * height:
        raise ValueError(f"{path}: truncated raster")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    return img.astype(np.float64) / 255.0


def write_pgm(image: np.ndarray, path) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"image must be 2-D, got shape {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image intensities must lie in [0, 1]")
    raster = np.round(img * 255.0).astype(np.uint8)
    height, width = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode())
        fh.write(raster.tobytes())
