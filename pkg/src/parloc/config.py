"""Run configuration: defaults, key=value files, CLI overrides.

A config file holds ``key = value`` lines (``#`` comments allowed) with the
field names below; command-line flags override file values, which override
defaults.  All randomness in a command flows from the single ``seed``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .matching import MODES, SearchConfig


@dataclass
class RunConfig:
    # search
    mode: str = "fused"
    max_leaves: int = 100
    knn_frames_k: int = 20
    ratio_threshold: float = 0.8
    strict_ratio: bool = False
    # forest
    n_trees: int = 6
    depth: int = 23
    candidate_dims: int = 64
    # perturbation model estimation
    model_tests: int = 10
    model_samples: int = 100_000
    assume_sigma: float = 0.0   # > 0 skips estimation, uses N(0, sigma^2)
    # RANSAC
    inlier_threshold_px: float = 8.0
    max_ransac_iterations: int = 10_000
    ransac_confidence: float = 0.9999
    min_inliers: int = 12
    # randomness
    seed: int = 0
    # file paths (usually given as CLI flags)
    landmarks: str = ""
    frames: str = ""
    forest: str = ""
    model: str = ""
    queries: str = ""
    results: str = ""
    ground_truth: str = ""

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("max_leaves", "knn_frames_k", "n_trees", "depth",
                     "candidate_dims", "model_tests", "model_samples", "min_inliers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 < self.ratio_threshold <= 1.0:
            raise ValueError(f"ratio_threshold must be in (0, 1], got {self.ratio_threshold}")
        if not 0.0 < self.ransac_confidence < 1.0:
            raise ValueError(f"ransac_confidence must be in (0, 1), got {self.ransac_confidence}")
        if self.inlier_threshold_px <= 0:
            raise ValueError(f"inlier_threshold_px must be positive, got {self.inlier_threshold_px}")
        if self.max_ransac_iterations < 1:
            raise ValueError(f"max_ransac_iterations must be >= 1, got {self.max_ransac_iterations}")
        if self.assume_sigma < 0:
            raise ValueError(f"assume_sigma must be >= 0, got {self.assume_sigma}")
        return self

    def search_config(self) -> SearchConfig:
        return SearchConfig(
            mode=self.mode,
            max_leaves=self.max_leaves,
            knn_frames_k=self.knn_frames_k,
            ratio_threshold=self.ratio_threshold,
            strict_ratio=self.strict_ratio,
        )

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: f.type if isinstance(f.type, type) else _TYPE_NAMES[f.type]
                for f in fields(cls)}

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        cfg = cls()
        cfg.update_from_file(path)
        return cfg

    def update_from_file(self, path) -> "RunConfig":
        types = self.field_types()
        with open(path) as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                key, sep, value = line.partition("=")
                key, value = key.strip(), value.strip()
                if not sep or not key:
                    raise ValueError(f"{path}:{lineno}: expected key = value, got {raw.strip()!r}")
                if key not in types:
                    raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
                setattr(self, key, _parse(types[key], value, path, lineno))
        return self

    def to_file(self, path) -> None:
        with open(path, "w") as fh:
            for f in fields(self):
                fh.write(f"{f.name} = {getattr(self, f.name)}\n")


_TYPE_NAMES = {"int": int, "float": float, "str": str, "bool": bool}


def _parse(kind, value, path, lineno):
    try:
        if kind is bool:
            lowered = value.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        return kind(value)
    except ValueError:
        raise ValueError(
            f"{path}:{lineno}: cannot parse {value!r} as {kind.__name__}"
        ) from None
