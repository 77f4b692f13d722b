"""Command-line interface: build-index, localize, evaluate, fit-model, selftest.

Exit codes: 0 success, 1 selftest failure, 2 bad configuration or usage,
3 I/O error, 4 parse error, 5 map integrity error, 6 insufficient or
mismatched data.  Per-query localization failures are recorded in the
result file, never aborting the batch.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import io as pio
from .config import RunConfig
from .errors import IntegrityError, ParseError
from .forest import (
    PerturbationModel,
    estimate_perturbation_model,
    load_forest,
    load_model,
    save_forest,
    save_model,
)
from .localizer import VisualLocalizer
from .matching import match_image
from .pose import ransac_pnp, recall_at_thresholds
from .retrieval import FrameRetrievalIndex

EXIT_OK = 0
EXIT_SELFTEST = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_PARSE = 4
EXIT_INTEGRITY = 5
EXIT_DATA = 6

DEFAULT_THRESHOLDS = "0.25:2,0.5:5,5.0:10"


class DataError(ValueError):
    """Input cannot support the requested computation."""


def _add_config_flags(parser, names):
    defaults = RunConfig()
    for name in names:
        kind = RunConfig.field_types()[name]
        flag = "--" + name.replace("_", "-")
        if kind is bool:
            parser.add_argument(flag, action="store_true", default=None)
        else:
            parser.add_argument(flag, type=kind, default=None,
                                help=f"default {getattr(defaults, name)}")


def _resolve_config(args, names) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg.update_from_file(args.config)
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    return cfg.validate()


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="parloc",
        description="Visual localization with parallel local/global candidate search",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = dict(help="key = value config file; flags override it")

    p = sub.add_parser("build-index", help="build the random-tree forest from a map")
    p.add_argument("--landmarks", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True, help="forest container output path")
    p.add_argument("--model-out", default=None,
                   help="model sidecar path (default: <out>.model)")
    p.add_argument("--config", **common)
    _add_config_flags(p, ["n_trees", "depth", "candidate_dims", "seed",
                          "model_tests", "model_samples", "assume_sigma"])

    p = sub.add_parser("localize", help="localize query images against a built index")
    p.add_argument("--forest", required=True)
    p.add_argument("--model", default=None, help="model sidecar (default: <forest>.model)")
    p.add_argument("--landmarks", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True, help="result file output path")
    p.add_argument("--config", **common)
    _add_config_flags(p, ["mode", "max_leaves", "knn_frames_k", "ratio_threshold",
                          "strict_ratio", "inlier_threshold_px",
                          "max_ransac_iterations", "ransac_confidence",
                          "min_inliers", "seed"])

    p = sub.add_parser("evaluate", help="recall table from results and ground truth")
    p.add_argument("--results", required=True)
    p.add_argument("--ground-truth", required=True)
    p.add_argument("--thresholds", default=DEFAULT_THRESHOLDS,
                   help="comma list of meters:degrees pairs "
                        f"(default {DEFAULT_THRESHOLDS})")
    p.add_argument("--csv", default=None, help="also write the table as CSV")

    p = sub.add_parser("fit-model", help="fit the perturbation model from map pairs")
    p.add_argument("--landmarks", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True, help="model sidecar output path")
    p.add_argument("--config", **common)
    _add_config_flags(p, ["model_tests", "model_samples", "seed", "assume_sigma"])

    p = sub.add_parser("selftest", help="run invariant checks on generated fixtures")
    p.add_argument("--seed", type=int, default=0)
    return parser


def _perturbation_model(db, cfg: RunConfig) -> PerturbationModel:
    if cfg.assume_sigma > 0:
        return PerturbationModel(0.0, cfg.assume_sigma)
    left, right = db.matched_descriptor_pairs()
    if left.shape[0] == 0:
        raise DataError(
            "no landmark has two or more descriptors, so the perturbation "
            "model cannot be estimated; rerun with --assume-sigma SIGMA to "
            "use a synthetic N(0, SIGMA^2) perturbation instead"
        )
    return estimate_perturbation_model(
        left, right, tests_to_sample=cfg.model_tests,
        samples_per_test=cfg.model_samples, seed=cfg.seed,
    )


def _cmd_build_index(args) -> int:
    names = ["n_trees", "depth", "candidate_dims", "seed",
             "model_tests", "model_samples", "assume_sigma"]
    cfg = _resolve_config(args, names)
    db = pio.load_map(args.landmarks, args.frames)
    localizer = VisualLocalizer(
        n_trees=cfg.n_trees, depth=cfg.depth, candidate_dims=cfg.candidate_dims,
        perturbation_model=_perturbation_model(db, cfg), random_state=cfg.seed,
    ).fit(db)
    save_forest(localizer.forest_, args.out)
    model_path = args.model_out or args.out + ".model"
    save_model(localizer.model_, model_path)

    sizes = np.array([
        rows.shape[0]
        for tree in localizer.forest_.trees_
        for rows in tree.leaves.values()
    ])
    print(f"indexed {db.n_entries} descriptors of {len(db.landmarks)} landmarks "
          f"into {cfg.n_trees} trees of depth {cfg.depth}")
    print(f"model: mu={localizer.model_.mu:.6g} sigma={localizer.model_.sigma:.6g}"
          + (" (degenerate)" if localizer.model_.degenerate else ""))
    print(f"nonempty leaves: {sizes.size}")
    print("leaf occupancy histogram (bucket size: leaf count):")
    edges = [1, 2, 4, 8, 16, 32, 64]
    for lo, hi in zip(edges, edges[1:] + [None]):
        count = int(((sizes >= lo) & (sizes < (hi or np.inf))).sum())
        label = f"{lo}" if hi == lo + 1 else (f"{lo}-{hi - 1}" if hi else f">={lo}")
        print(f"  {label:>5}: {count}")
    print(f"wrote {args.out} and {model_path}")
    return EXIT_OK


def _cmd_localize(args) -> int:
    names = ["mode", "max_leaves", "knn_frames_k", "ratio_threshold", "strict_ratio",
             "inlier_threshold_px", "max_ransac_iterations", "ransac_confidence",
             "min_inliers", "seed"]
    cfg = _resolve_config(args, names)
    db = pio.load_map(args.landmarks, args.frames)
    forest = load_forest(args.forest)
    if forest.n_features_in_ != db.descriptor_dim:
        raise DataError(
            f"forest dimension {forest.n_features_in_} does not match map "
            f"dimension {db.descriptor_dim}"
        )
    model = load_model(args.model or args.forest + ".model")
    frame_index = FrameRetrievalIndex(n_neighbors=cfg.knn_frames_k).fit(
        db.frame_descriptor_matrix, db.frame_ids
    )
    queries = pio.load_queries(args.queries)

    from .localizer import _query_seed

    results = []
    counts = {"ok": 0, "insufficient_matches": 0, "ransac_failed": 0}
    search = cfg.search_config()
    for query in queries:
        matches = match_image(
            query.descriptors, query.global_descriptor, forest, frame_index,
            db, model, search,
        )
        points3d = np.array([db.position(m.landmark_id) for m in matches]).reshape(-1, 3)
        pixels = np.array([query.keypoints[m.query_index, :2] for m in matches]).reshape(-1, 2)
        result = ransac_pnp(
            points3d, pixels, query.intrinsics,
            inlier_threshold_px=cfg.inlier_threshold_px,
            max_iterations=cfg.max_ransac_iterations,
            confidence=cfg.ransac_confidence,
            min_inliers=cfg.min_inliers,
            seed=_query_seed(cfg.seed, query.query_id),
        )
        counts[result.status] += 1
        results.append((query.query_id, result))
    pio.save_results(results, args.out)
    print(f"localized {len(results)} queries in mode {cfg.mode}: "
          f"{counts['ok']} ok, {counts['insufficient_matches']} insufficient_matches, "
          f"{counts['ransac_failed']} ransac_failed")
    print(f"wrote {args.out}")
    return EXIT_OK


def _parse_thresholds(text):
    pairs = []
    for part in text.split(","):
        meters, sep, degrees = part.partition(":")
        if not sep:
            raise ValueError(f"bad threshold {part!r}, expected meters:degrees")
        pairs.append((float(meters), float(degrees)))
    if not pairs:
        raise ValueError("no thresholds given")
    return pairs


def _cmd_evaluate(args) -> int:
    thresholds = _parse_thresholds(args.thresholds)
    results = pio.load_results(args.results)
    truths = pio.load_ground_truth(args.ground_truth)
    missing = sorted(set(results) - set(truths))
    if missing:
        raise DataError(f"results reference unknown ground-truth ids: {missing[:10]}")
    extra = sorted(set(truths) - set(results))
    if extra:
        raise DataError(f"ground truth has queries missing from results: {extra[:10]}")
    recalls = recall_at_thresholds(results, truths, thresholds)

    print(f"{'threshold':>16} {'recall':>8}")
    for (meters, degrees), recall in zip(thresholds, recalls):
        print(f"{meters:>8.2f}m {degrees:>5.1f}deg {recall:>7.1f}%")
    csv_lines = ["threshold_m,threshold_deg,recall_pct"]
    csv_lines += [
        f"{meters},{degrees},{recall}"
        for (meters, degrees), recall in zip(thresholds, recalls)
    ]
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write("\n".join(csv_lines) + "\n")
        print(f"wrote {args.csv}")
    else:
        print("\n".join(csv_lines))
    return EXIT_OK


def _cmd_fit_model(args) -> int:
    names = ["model_tests", "model_samples", "seed", "assume_sigma"]
    cfg = _resolve_config(args, names)
    db = pio.load_map(args.landmarks, args.frames)
    model = _perturbation_model(db, cfg)
    save_model(model, args.out)
    print(f"model: mu={model.mu:.6g} sigma={model.sigma:.6g}"
          + (" (degenerate)" if model.degenerate else ""))
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return EXIT_OK if run_selftest(args.seed) else EXIT_SELFTEST


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "build-index": _cmd_build_index,
        "localize": _cmd_localize,
        "evaluate": _cmd_evaluate,
        "fit-model": _cmd_fit_model,
        "selftest": _cmd_selftest,
    }
    try:
        return handlers[args.command](args)
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
