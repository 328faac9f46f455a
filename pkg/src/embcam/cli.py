"""Command-line entry point: ``embcam <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import __version__
from .activations import ActivationKind, RankPairParams, TripletConfig, make_activation, sq_dist
from .backbone import BackboneConfig
from .errors import EmbcamError
from .gradweights import BuildConfig, mean_weights, per_triplet_alpha, sample_triplets, top_m
from .head import HeadParams, finite_diff_check, head_forward, load_head, save_head
from .heatmap import (RegionAnnotation, evaluate_regions, grad_cam_heatmap, localization_accuracy,
                      normalize_heatmap, read_pgm, upsample_bilinear, write_pgm)
from .synthetic import fixture_head, generate_synthetic_dataset, read_manifest
from .tensor import read_tensor, write_tensor
from .weightdb import (build, compact_kmeans, db_stats, load_database, query_nearest,
                       save_database)

ACTIVATIONS = [k.value for k in ActivationKind]


class UsageError(Exception):
    pass


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}")
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return w, h


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


def _add_build_flags(p):
    p.add_argument("--margin", type=float, default=0.2)
    p.add_argument("--triplets", type=_positive, default=50)
    p.add_argument("--top-m", type=_positive, default=50)
    p.add_argument("--activation", choices=ACTIVATIONS, default="triplet")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--rank-params", type=Path, help="directory with rank_w.tnsr [2,D] and rank_b.tnsr [2]")
    p.add_argument("--workers", type=_positive, default=1)


def _build_config(args) -> BuildConfig:
    if args.margin < 0:
        raise UsageError("--margin must be non-negative")
    return BuildConfig(args.margin, args.triplets, args.top_m, args.seed, ActivationKind(args.activation))


def _rank_params(args):
    if args.rank_params is None:
        if args.activation == "rank-pair":
            raise UsageError("--activation rank-pair needs --rank-params")
        return None
    w = np.array(read_tensor(args.rank_params / "rank_w.tnsr"))
    b = np.array(read_tensor(args.rank_params / "rank_b.tnsr"))
    return RankPairParams(w, b)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="embcam", description="Grad-CAM explanations for embedding networks")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic quadrant dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--per-class", type=_positive, default=50)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--backbone-seed", type=_seed, default=0)
    p.add_argument("--id-offset", type=int, default=0)

    p = sub.add_parser("build-db", help="build the embedding/grad-weights database")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--head", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_build_flags(p)

    p = sub.add_parser("explain", help="heatmap for one feature map")
    p.add_argument("--db", type=Path)
    p.add_argument("--head", type=Path, required=True)
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--upsample", type=_size)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--tnsr-out", type=Path, help="also write the float heatmap as TNSR")
    p.add_argument("--self", dest="self_mode", action="store_true",
                   help="compute fresh grad-weights instead of querying the database")
    p.add_argument("--manifest", type=Path)
    p.add_argument("--id", type=int, help="manifest id of the image (--self)")
    _add_build_flags(p)

    p = sub.add_parser("eval", help="score heatmaps against annotations")
    p.add_argument("--heatmaps", type=Path, required=True)
    p.add_argument("--annotations", type=Path, required=True)
    p.add_argument("--metric", choices=["bbox", "mask", "loc"], default="bbox")
    p.add_argument("--threshold", type=float, action="append")
    p.add_argument("--iou-min", type=float, default=0.5)
    p.add_argument("--report", type=Path)

    p = sub.add_parser("check-grad", help="finite-difference check of the analytic gradients")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--channels", type=_positive, default=8)
    p.add_argument("--spatial", type=_positive, nargs=2, default=[5, 5], metavar=("H", "W"))
    p.add_argument("--dim", type=int, default=4)
    p.add_argument("--activation", choices=ACTIVATIONS, default="triplet")
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--margin", type=float, default=0.2)

    p = sub.add_parser("compact-db", help="build a k-means compacted database")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--head", type=Path, required=True)
    p.add_argument("--clusters", type=_positive, required=True)
    p.add_argument("--iters", type=_positive, default=100)
    p.add_argument("--out", type=Path, required=True)
    _add_build_flags(p)

    p = sub.add_parser("db-stats", help="top-1 channel histogram of a database")
    p.add_argument("--db", type=Path, required=True)
    return parser


# -- subcommands ------------------------------------------------------------

def cmd_synth(args, out):
    if args.classes < 2:
        raise UsageError("--classes must be at least 2")
    if args.channels < 2:
        raise UsageError("--channels must be at least 2")
    backbone = BackboneConfig(args.backbone_seed, args.channels)
    records = generate_synthetic_dataset(args.out, args.per_class, args.classes, args.seed, backbone,
                                         id_offset=args.id_offset)
    save_head(fixture_head(backbone, args.classes), args.out / "head")
    print(f"records={len(records)} classes={args.classes} channels={args.channels}", file=out)


def cmd_build_db(args, out):
    cfg = _build_config(args)
    rank = _rank_params(args)
    records = read_manifest(args.manifest)
    result = build(records, load_head(args.head), cfg, rank, workers=args.workers)
    save_database(result.database, args.out)
    hist = Counter(result.shortfalls.values())
    shortfall = ";".join(f"{k}:{v}" for k, v in sorted(hist.items()))
    print(f"entries={len(result.database)} excluded={len(result.database.excluded_ids)} "
          f"shortfall={shortfall}", file=out)


def _self_weights(args, features, params: HeadParams):
    cfg = _build_config(args)
    rank = _rank_params(args)
    records = read_manifest(args.manifest)
    feats = {}
    for r in records:
        feats[r.id] = np.array(read_tensor(r.feature_path))
    emb = {rid: head_forward(A, params)[0] for rid, A in feats.items()}
    ids = [r.id for r in records]
    if args.id is not None:
        if args.id not in emb:
            raise EmbcamError(f"id {args.id} not in manifest")
        anchor_id = args.id
    else:
        target = args.features.resolve()
        matches = [r.id for r in records if r.feature_path.resolve() == target]
        if not matches:
            f_q = head_forward(features, params)[0]
            matches = [rid for rid in ids if emb[rid].tobytes() == f_q.tobytes()]
        if not matches:
            raise EmbcamError("query features not found in manifest; pass --id")
        anchor_id = matches[0]
    index = ids.index(anchor_id)
    E = np.stack([emb[i] for i in ids])
    labels = np.array([r.label for r in records])
    triplets, _ = sample_triplets(E, labels, ids, index, cfg)
    if not triplets:
        raise EmbcamError(f"anchor {anchor_id} has no valid triplet")
    _, cache = head_forward(features, params)
    Z = features.shape[1] * features.shape[2]
    label_by_id = {r.id: r.label for r in records}
    alphas = [per_triplet_alpha(cache, params, Z, t, emb, cfg, rank, label_by_id) for t in triplets]
    return anchor_id, top_m(mean_weights(alphas), cfg.top_m)


def cmd_explain(args, out):
    if not args.self_mode and args.db is None:
        raise UsageError("explain needs --db (or --self with --manifest)")
    if args.self_mode and args.manifest is None:
        raise UsageError("--self needs --manifest")
    params = load_head(args.head)
    features = np.array(read_tensor(args.features))
    if args.self_mode:
        anchor_id, weights = _self_weights(args, features, params)
        print(f"self={anchor_id}", file=out)
    else:
        db = load_database(args.db)
        f_q, _ = head_forward(features, params)
        entry, sim = query_nearest(db, f_q)
        weights = entry.weights
        print(f"neighbor={entry.id} label={entry.label} similarity={sim:.6f}", file=out)
    heat = normalize_heatmap(grad_cam_heatmap(features, weights))
    if args.upsample is not None:
        heat = upsample_bilinear(heat, *args.upsample)
    write_pgm(heat, args.out)
    if args.tnsr_out is not None:
        write_tensor(heat.grid, args.tnsr_out)


def _load_heatmap(directory: Path, rid: int) -> np.ndarray:
    tn = directory / f"{rid}.tnsr"
    if tn.exists():
        return np.array(read_tensor(tn))
    pg = directory / f"{rid}.pgm"
    if pg.exists():
        return read_pgm(pg).astype(np.float32) / 255.0
    raise EmbcamError(f"no heatmap {rid}.tnsr or {rid}.pgm in {directory}")


def _read_annotations(path: Path):
    anns = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").split("\n"), 1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) not in (7, 8):
            raise UsageError(f"{path}:{lineno}: expected 7 or 8 fields")
        rid, w, h, x0, y0, x1, y1 = (int(v) for v in parts[:7])
        mask = None
        if len(parts) == 8:
            mpath = Path(parts[7])
            if not mpath.is_absolute():
                mpath = path.parent / mpath
            mask = read_pgm(mpath)
        anns.append((rid, RegionAnnotation(w, h, (x0, y0, x1, y1), mask)))
    return anns


def cmd_eval(args, out):
    anns = _read_annotations(args.annotations)
    if not anns:
        raise UsageError("annotation file is empty")
    thresholds = args.threshold or [0.2]
    if any(not 0.0 < t <= 1.0 for t in thresholds):
        raise UsageError("thresholds must lie in (0, 1]")
    items = []
    for rid, ann in anns:
        g = _load_heatmap(args.heatmaps, rid)
        if g.shape != (ann.height, ann.width):
            g = upsample_bilinear(g, ann.width, ann.height).grid
        items.append((rid, g, ann))
    if args.metric == "loc":
        report = localization_accuracy([(rid, g, ann.box) for rid, g, ann in items], thresholds, args.iou_min)
    else:
        report = evaluate_regions(items, "box" if args.metric == "bbox" else "mask")
    text = "".join(line + "\n" for line in report.lines())
    if args.report is not None:
        args.report.write_bytes(text.encode("utf-8"))
    print(report.summary(), file=out)
    print("scored at annotation image resolution", file=out)
    for t, acc in report.accuracy.items():
        print(f"threshold {t:g}: accuracy {acc:.3f}", file=out)


def gradcheck_setup(seed: int, K: int, H: int, W: int, D: int, kind: ActivationKind, margin: float = 0.2):
    """Seeded feature map, head and activation for a gradient check.

    For the triplet loss the positive and negative are ordered so the hinge
    is active with value at least ``margin``.
    """
    rng = np.random.default_rng(seed)
    A = rng.random((K, H, W)).astype(np.float32)
    params = HeadParams(rng.standard_normal((D, K)) / np.sqrt(K), 0.1 * rng.standard_normal(D))
    f_a, _ = head_forward(A, params)
    f_p = rng.standard_normal(D)
    f_p /= np.linalg.norm(f_p)
    f_n = rng.standard_normal(D)
    f_n /= np.linalg.norm(f_n)
    if sq_dist(f_a, f_p) < sq_dist(f_a, f_n):
        f_p, f_n = f_n, f_p
    rank = RankPairParams(rng.standard_normal((2, D)), rng.standard_normal(2), bool(rng.integers(2)))
    act = make_activation(kind, f_p, f_n, TripletConfig(margin), rank)
    return A, params, act


def cmd_check_grad(args, out):
    if args.dim < 2:
        raise UsageError("--dim must be at least 2")
    if not 1e-4 <= args.eps <= 1e-2:
        raise UsageError("--eps must lie in [1e-4, 1e-2]")
    H, W = args.spatial
    A, params, act = gradcheck_setup(args.seed, args.channels, H, W, args.dim,
                                     ActivationKind(args.activation), args.margin)
    err = finite_diff_check(A, params, act, args.eps, seed=args.seed)
    print(f"max_rel_error={err:.3e}", file=out)
    return 0 if err < 1e-3 else 1


def cmd_compact_db(args, out):
    cfg = _build_config(args)
    rank = _rank_params(args)
    records = read_manifest(args.manifest)
    result = build(records, load_head(args.head), cfg, rank, workers=args.workers)
    if args.clusters > len(result.database):
        raise UsageError(f"--clusters {args.clusters} exceeds {len(result.database)} entries")
    db = compact_kmeans(result.database, result.dense, args.clusters, args.iters, args.seed)
    save_database(db, args.out)
    print(f"entries={len(db)} source_entries={len(result.database)} "
          f"excluded={len(db.excluded_ids)}", file=out)


def cmd_db_stats(args, out):
    stats = db_stats(load_database(args.db))
    for line in stats.lines():
        print(line, file=out)


COMMANDS = {
    "synth": cmd_synth,
    "build-db": cmd_build_db,
    "explain": cmd_explain,
    "eval": cmd_eval,
    "check-grad": cmd_check_grad,
    "compact-db": cmd_compact_db,
    "db-stats": cmd_db_stats,
}


def main(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        code = COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"embcam {args.command}: usage error: {exc}", file=err)
        return 2
    except (EmbcamError, OSError, ValueError) as exc:
        print(f"embcam {args.command}: error: {exc}", file=err)
        return 1
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
