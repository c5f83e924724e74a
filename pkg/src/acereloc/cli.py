"""Command-line interface: ``acereloc <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error.
"""
import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import AceError, DataError, EmptyDataset
from .losses import CurriculumConfig

log = logging.getLogger("acereloc")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --- shared helpers ---------------------------------------------------------

def _echo_config(args):
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func"}
    print("config: " + json.dumps(cfg, sort_keys=True))


def _load_split(path):
    from .dataset import load_dataset

    frames = load_dataset(path)
    if not frames:
        raise EmptyDataset(f"{path}: no frames")
    return frames


def _resolve_backbone(spec, split_dir, frames):
    """Returns ``(backbone, can_augment)`` for a ``--backbone`` value."""
    from .backbone import HandcraftedBackbone, LearnedBackbone, OracleBackbone, load_backbone
    from .dataset import StoredFeatures, find_world

    if spec == "oracle":
        if all(f.feature_path is not None for f in frames):
            return StoredFeatures(frames), False
        world = find_world(split_dir)
        if world is None:
            raise DataError(f"{split_dir}: oracle backbone needs stored features or a world.json")
        return OracleBackbone(world), True
    if spec == "handcrafted":
        _require_images(frames, spec)
        return HandcraftedBackbone().fit(), True
    if spec.startswith("learned:"):
        _require_images(frames, spec)
        path = spec.split(":", 1)[1]
        try:
            net = load_backbone(path)
        except (OSError, ValueError, KeyError) as e:
            raise DataError(f"{path}: cannot load backbone ({e})") from None
        return LearnedBackbone(net), True
    raise UsageError(f"unknown backbone {spec!r} (oracle, handcrafted or learned:<path>)")


def _require_images(frames, spec):
    missing = [f.frame_id for f in frames if f.image_path is None]
    if missing:
        raise DataError(f"backbone {spec!r} needs images; frame {missing[0]!r} has none")


def _features(frame, backbone):
    return backbone.extract(frame.view(with_image=frame.image_path is not None))


def _solver_config(args):
    from .solver import SolverConfig

    return SolverConfig(hypotheses=args.hypotheses, inlier_threshold=args.inlier_threshold, seed=args.seed)


def _load_head(path):
    from .neural import load_map

    try:
        return load_map(path)
    except OSError as e:
        raise DataError(f"{path}: {e}") from None


def _localize_all(frames, backbone, locate, threads):
    """Run ``locate(feature_map)`` per frame; results come back in frame order."""
    def one(frame):
        return frame.frame_id, locate(_features(frame, backbone))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, frames))
    return [one(f) for f in frames]


# --- commands ---------------------------------------------------------------

def cmd_synth(args):
    from .synth import TrajectorySpec, generate_trajectory, generate_world, write_dataset

    world = generate_world(args.seed, args.points, args.extent, args.descriptor_dim,
                           args.coherence, args.length_scale)
    world.noise_sigma = args.noise
    world.outlier_fraction = args.outliers
    mapping = generate_trajectory(
        TrajectorySpec(kind=args.kind, n_frames=args.mapping, radius=args.radius, pose_noise=args.pose_noise,
                       rotation_noise_deg=args.rotation_noise),
        world, args.seed + 1, prefix="map")
    query = generate_trajectory(
        TrajectorySpec(kind=args.kind, n_frames=args.query, radius=args.radius, random_azimuth=True,
                       elevation_deg=(5.0, 40.0)),
        world, args.seed + 2, prefix="query")
    out = Path(args.out)
    write_dataset(out, mapping, "mapping", world, args.features, args.images)
    write_dataset(out, query, "query", world, args.features, args.images)
    print(f"wrote {len(mapping)} mapping and {len(query)} query frames to {out}")
    return EXIT_OK


def cmd_train(args):
    from .backbone import HEAD_AUGMENT
    from .ensemble import read_clusters
    from .features import View
    from .neural import RegressionHead, save_map
    from .training import fill_buffer, train_head

    frames = _load_split(args.dataset)
    if args.clusters:
        ids, assignment = read_clusters(args.clusters)
        keep = {fid for fid, c in zip(ids, assignment.labels) if c == args.cluster}
        frames = [f for f in frames if f.frame_id in keep]
        if not frames:
            raise EmptyDataset(f"cluster {args.cluster} has no frames in {args.dataset}")
    curriculum = CurriculumConfig(args.tau_min, args.tau_max, args.schedule, args.loss)
    rng = np.random.default_rng(args.seed)
    centers = np.array([f.pose.translation for f in frames])
    backbone, can_augment = _resolve_backbone(args.backbone, args.dataset, frames)
    in_dim = _features(frames[0], backbone).channels
    head = RegressionHead.init(in_dim, args.width, args.layers, not args.direct, rng=rng)
    head.mean_translation = centers.mean(axis=0).astype(np.float32)
    if args.epochs > 0:
        augment = HEAD_AUGMENT if (can_augment and not args.no_augment) else None
        views = [View(f.frame_id, f.pose, f.intrinsics, f.load_image()) for f in frames]
        buf = fill_buffer(views, backbone, args.buffer_size, args.samples_per_image, rng, augment)
        log.info("buffer: %d features from %d image passes", len(buf), len(buf.poses))
        head, losses = train_head(buf, head, args.epochs, args.batch, args.lr_min, args.lr_max, curriculum,
                                  rng=rng, shuffle=args.shuffle)
        print(f"final loss {losses[-max(1, len(losses) // 20):].mean():.4f} after {len(losses)} steps")
    save_map(head, args.out)
    print(f"map written to {args.out}")
    return EXIT_OK


def cmd_train_backbone(args):
    from .backbone import BackboneTrainingConfig, save_backbone, train_backbone

    scenes = []
    for d in args.scenes:
        frames = _load_split(d)
        _require_images(frames, "learned")
        scenes.append([f.view() for f in frames])
    cfg = BackboneTrainingConfig(steps=args.steps, images_per_head=args.images_per_head,
                                 out_channels=args.out_channels, head_width=args.width,
                                 lr_min=args.lr_min, lr_max=args.lr_max,
                                 curriculum=CurriculumConfig(args.tau_min, args.tau_max, args.schedule, args.loss),
                                 seed=args.seed)
    net, _, losses = train_backbone(scenes, cfg)
    save_backbone(net, args.out)
    print(f"backbone written to {args.out}; final loss {np.mean(losses[-10:]):.4f}")
    return EXIT_OK


def _write_estimates(args, results):
    from .dataset import write_pose_csv

    write_pose_csv(args.out, results, timing=not args.no_timing)
    ok = sum(est.success for _, est in results)
    print(f"localized {ok}/{len(results)} frames; poses written to {args.out}")


def cmd_localize(args):
    from .solver import localize_frame

    frames = _load_split(args.dataset)
    head = _load_head(args.map)
    backbone = _resolve_backbone(args.backbone, args.dataset, frames)[0]
    cfg = _solver_config(args)
    results = _localize_all(frames, backbone, lambda fm: localize_frame(fm, head, cfg), args.threads)
    _write_estimates(args, results)
    return EXIT_OK


def cmd_ensemble_localize(args):
    from .ensemble import ensemble_localize

    frames = _load_split(args.dataset)
    heads = [_load_head(p) for p in args.maps]
    backbone = _resolve_backbone(args.backbone, args.dataset, frames)[0]
    cfg = _solver_config(args)
    results = _localize_all(frames, backbone, lambda fm: ensemble_localize(fm, heads, cfg), args.threads)
    _write_estimates(args, results)
    return EXIT_OK


def cmd_cluster(args):
    from .ensemble import hierarchical_cluster, write_clusters

    frames = _load_split(args.dataset)
    centers = np.array([f.pose.translation for f in frames])
    assignment = hierarchical_cluster(centers, args.clusters, args.seed)
    write_clusters(args.out, [f.frame_id for f in frames], assignment)
    print(f"cluster sizes: {assignment.sizes().tolist()}; written to {args.out}")
    return EXIT_OK


def _trajectory(path):
    """Frame id -> Pose from a pose CSV (successful rows only) or a dataset split."""
    from .dataset import load_dataset, read_pose_csv

    p = Path(path)
    if p.is_dir():
        return {f.frame_id: f.pose for f in load_dataset(p)}
    return {fid: row.pose for fid, row in read_pose_csv(p).items() if row.success}


def cmd_align(args):
    from .alignment import AlignConfig, ransac_align

    a, b = _trajectory(args.source), _trajectory(args.target)
    ids = sorted(set(a) & set(b))
    pa = np.array([a[i].translation for i in ids]).reshape(-1, 3)
    pb = np.array([b[i].translation for i in ids]).reshape(-1, 3)
    res = ransac_align(pa, pb, AlignConfig(args.triplets, args.threshold, args.seed),
                       [a[i].rotation for i in ids], [b[i].rotation for i in ids])
    T = res.transform
    report = dict(correspondences=len(ids), inliers=res.inlier_count, inlier_ratio=res.inlier_ratio,
                  quaternion_wxyz=T.as_quaternion().tolist(), translation=T.translation.tolist(),
                  position_m=res.stats("position"), position_inliers_m=res.stats("position", True),
                  rotation_deg=res.stats("rotation"))
    print(json.dumps(report, indent=1))
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=1) + "\n")
    return EXIT_OK


def cmd_eval(args):
    from .dataset import read_pose_csv
    from .evaluation import evaluate

    estimates = read_pose_csv(args.estimates)
    gt = {f.frame_id: f.pose for f in _load_split(args.ground_truth)}
    report = evaluate(estimates, gt)
    print(report.summary())
    if args.json:
        Path(args.json).write_text(json.dumps(dict(
            accuracy={f"{cm:g}cm_{deg:g}deg": acc for (cm, deg), acc in report.accuracies.items()},
            median_translation_cm=report.median_translation_cm, median_rotation_deg=report.median_rotation_deg,
            failures=report.failures, frames=len(report.frames)), indent=1) + "\n")
    return EXIT_OK


def cmd_export_cloud(args):
    from .export import export_pointcloud

    frames = _load_split(args.dataset)
    head = _load_head(args.map)
    backbone = _resolve_backbone(args.backbone, args.dataset, frames)[0]
    items = ((_features(f, backbone), f.pose, f.load_image()) for f in frames)
    n_pts, n_fr = export_pointcloud(items, head, args.out, args.max_depth, args.frustum_every)
    print(f"wrote {n_pts} points and {n_fr} frusta to {args.out}")
    return EXIT_OK


# --- parser -----------------------------------------------------------------

def _add_training_flags(p):
    p.add_argument("--buffer-size", type=int, default=500_000)
    p.add_argument("--batch", type=int, default=1024)
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--shuffle", choices=["feature", "image"], default="feature")
    _add_curriculum_flags(p)


def _add_curriculum_flags(p):
    p.add_argument("--lr-min", type=float, default=5e-4)
    p.add_argument("--lr-max", type=float, default=5e-3)
    p.add_argument("--tau-min", type=float, default=1.0)
    p.add_argument("--tau-max", type=float, default=50.0)
    p.add_argument("--schedule", choices=["circular", "linear", "fixed"], default="circular")
    p.add_argument("--loss", choices=["tanh", "dsacstar"], default="tanh")


def _add_solver_flags(p):
    p.add_argument("--hypotheses", type=int, default=64)
    p.add_argument("--inlier-threshold", type=float, default=10.0)
    p.add_argument("--no-timing", action="store_true", help="write time_ms as 0 for byte-reproducible CSVs")


def build_parser():
    parser = _Parser(prog="acereloc", description="Scene coordinate regression relocalization.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)
        return p

    p = command("synth", cmd_synth, "generate a synthetic scene with mapping and query splits")
    p.add_argument("out")
    p.add_argument("--points", type=int, default=20_000)
    p.add_argument("--extent", type=float, default=5.0)
    p.add_argument("--descriptor-dim", type=int, default=128)
    p.add_argument("--coherence", type=float, default=0.5)
    p.add_argument("--length-scale", type=float, default=1.0)
    p.add_argument("--mapping", type=int, default=400)
    p.add_argument("--query", type=int, default=200)
    p.add_argument("--kind", choices=["orbit", "arc", "grid"], default="orbit")
    p.add_argument("--radius", type=float, default=6.0)
    p.add_argument("--noise", type=float, default=0.0, help="descriptor noise sigma")
    p.add_argument("--outliers", type=float, default=0.0, help="fraction of cells with random descriptors")
    p.add_argument("--pose-noise", type=float, default=0.0, help="mapping position noise (m)")
    p.add_argument("--rotation-noise", type=float, default=0.0, help="mapping rotation noise (deg)")
    p.add_argument("--features", action="store_true", help="store oracle feature maps")
    p.add_argument("--images", action="store_true", help="store rendered PGM images")

    p = command("train", cmd_train, "train a scene-specific head (map)")
    p.add_argument("dataset")
    p.add_argument("out")
    p.add_argument("--backbone", default="oracle")
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--layers", type=int, default=8)
    p.add_argument("--direct", action="store_true", help="3-d output instead of homogeneous")
    p.add_argument("--samples-per-image", type=int, default=1024)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--clusters", help="cluster file restricting the mapping frames")
    p.add_argument("--cluster", type=int, default=0)
    _add_training_flags(p)

    p = command("train-backbone", cmd_train_backbone, "train a shared backbone over several scenes")
    p.add_argument("out")
    p.add_argument("scenes", nargs="+")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--images-per-head", type=int, default=6)
    p.add_argument("--out-channels", type=int, default=128)
    p.add_argument("--width", type=int, default=512)
    _add_curriculum_flags(p)
    p.set_defaults(lr_min=1e-4, lr_max=1e-3)

    p = command("localize", cmd_localize, "localize query frames with one map")
    p.add_argument("dataset")
    p.add_argument("map")
    p.add_argument("out")
    p.add_argument("--backbone", default="oracle")
    _add_solver_flags(p)

    p = command("ensemble-localize", cmd_ensemble_localize, "localize with several maps, keep most inliers")
    p.add_argument("dataset")
    p.add_argument("out")
    p.add_argument("maps", nargs="+")
    p.add_argument("--backbone", default="oracle")
    _add_solver_flags(p)

    p = command("cluster", cmd_cluster, "split mapping frames by camera position")
    p.add_argument("dataset")
    p.add_argument("out")
    p.add_argument("--clusters", type=int, default=2)

    p = command("align", cmd_align, "register one trajectory onto another by camera positions")
    p.add_argument("source", help="pose CSV or dataset split")
    p.add_argument("target", help="pose CSV or dataset split")
    p.add_argument("--triplets", type=int, default=1000)
    p.add_argument("--threshold", type=float, default=0.10, help="inlier threshold (m)")
    p.add_argument("--out")

    p = command("eval", cmd_eval, "accuracy of a pose CSV against a dataset split")
    p.add_argument("estimates")
    p.add_argument("ground_truth")
    p.add_argument("--json")

    p = command("export-cloud", cmd_export_cloud, "export predicted scene coordinates as PLY")
    p.add_argument("dataset")
    p.add_argument("map")
    p.add_argument("out")
    p.add_argument("--backbone", default="oracle")
    p.add_argument("--max-depth", type=float, default=10.0)
    p.add_argument("--frustum-every", type=int, default=25)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _echo_config(args)
    try:
        with threadpool_limits(max(1, args.threads)):
            return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (AceError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        # configuration values rejected by the library (e.g. tau_min > tau_max)
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


def entry_point():
    sys.exit(main())


if __name__ == "__main__":
    entry_point()
