"""Command-line surface for the field pipeline.

Eight subcommands cover the full loop: `synth` makes verification shapes,
`train` fits the fields, `extract` / `reconstruct` / `slice` read a trained
checkpoint, and the three `eval-*` commands run the metric protocols and
emit CSV reports.

Conventions shared by every subcommand:
  - trailing `section.key=value` arguments override configuration fields
  - `--seed` fully determines every artifact byte
  - the fully resolved configuration is logged as one `resolved:` JSON line
  - failures print a single `error: ...` line to stderr and exit 1;
    argument errors exit 2
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from kpfield.config import (
    PRESET_NAMES,
    RunConfig,
    apply_overrides,
    load_config,
    preset,
    run_config_to_dict,
    save_config,
)
from kpfield.extraction import (
    AXES,
    FIELD_NAMES,
    SLICE_MODES,
    extract_from_raw,
    extract_keypoints,
    field_slice,
    reconstruct_surface,
)
from kpfield.geometry import (
    PointCloud,
    add_gaussian_noise,
    apply_transform,
    normalize_cloud,
    random_downsample,
    random_se3,
)
from kpfield.io import (
    load_annotations,
    load_cloud,
    load_keypoints,
    load_manifest,
    save_cloud,
    save_keypoints,
    save_mesh,
    save_slice,
)
from kpfield.metrics import (
    SWEEP_EPSILON,
    RegistrationPair,
    RegistrationParams,
    geodesic_distances,
    histogram_descriptor,
    make_field_detector,
    random_detector,
    registration_metrics,
    relative_repeatability,
    semantic_miou_annotated,
    semantic_miou_pairwise,
    write_metric_csv,
)
from kpfield.synthetic import KINDS, generate_shape
from kpfield.training import fit, load_train_state

SWEEP_KINDS = ("none", "threshold", "downsample", "noise")


# ---------------------------------------------------------------------------
# small shared helpers


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    overrides: dict[str, str] = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ValueError(f"override {pair!r} must look like section.key=value")
        overrides[key.strip()] = value.strip()
    return overrides


def _parse_float_list(text: str, flag: str) -> list[float]:
    try:
        values = [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise ValueError(f"{flag} expects comma-separated numbers, got {text!r}")
    if not values:
        raise ValueError(f"{flag} needs at least one value")
    return values


def _parse_int_list(text: str, flag: str) -> list[int]:
    return [int(round(v)) for v in _parse_float_list(text, flag)]


def _log_resolved(command: str, settings: dict, config: RunConfig | None = None) -> None:
    payload = {"command": command, **settings}
    if config is not None:
        payload["config"] = run_config_to_dict(config)
    print("resolved: " + json.dumps(payload, sort_keys=True, default=str))


def _resolve_run_config(args) -> RunConfig:
    if args.config and args.preset:
        raise ValueError("use either --config or --preset, not both")
    if args.config:
        config = load_config(args.config)
    elif args.preset:
        config = preset(args.preset)
    else:
        raise ValueError("one of --config or --preset is required")
    overrides = _parse_overrides(args.overrides)
    if args.seed is not None:
        overrides.setdefault("train.seed", str(args.seed))
    if overrides:
        config = apply_overrides(config, overrides)
    return config


def _load_model(checkpoint: str, overrides: list[str]):
    state = load_train_state(checkpoint)
    config = state.config
    parsed = _parse_overrides(overrides)
    if parsed:
        config = apply_overrides(config, parsed)
    model = state.model
    model.eval()
    return model, config


def _apply_workers(args) -> None:
    workers = getattr(args, "workers", None)
    if workers is None:
        return
    if workers < 1:
        raise ValueError(f"--workers must be >= 1, got {workers}")
    import torch

    torch.set_num_threads(workers)


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_synth(args) -> int:
    params = {}
    for pair in args.param:
        key, sep, value = pair.partition("=")
        if not sep:
            raise ValueError(f"--param {pair!r} must look like name=value")
        params[key.strip()] = float(value)
    sample = generate_shape(args.kind, n_points=args.n, seed=args.seed, **params)
    _log_resolved(
        "synth",
        {"kind": args.kind, "n": args.n, "seed": args.seed, "params": params,
         "out": str(args.out)},
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_cloud(out, sample.cloud.points, binary=args.binary)
    print(f"cloud: {len(sample.cloud)} points -> {out}")
    if args.corners_out:
        corners = Path(args.corners_out)
        corners.parent.mkdir(parents=True, exist_ok=True)
        save_keypoints(
            corners,
            sample.corners,
            np.ones(len(sample.corners)),
            header=f"analytic corners of kind={args.kind}",
        )
        print(f"corners: {len(sample.corners)} -> {corners}")
    return 0


def _cmd_train(args) -> int:
    _apply_workers(args)
    config = _resolve_run_config(args)
    if not args.cloud:
        raise ValueError("at least one --cloud is required")
    dataset = []
    for path in args.cloud:
        cloud, _ = normalize_cloud(load_cloud(path))
        dataset.append(cloud)
    _log_resolved(
        "train",
        {"clouds": [str(c) for c in args.cloud], "out": str(args.out),
         "resume": str(args.resume) if args.resume else None},
        config,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, out_dir / "config.ini")
    result = fit(dataset, config, out_dir, progress=print, resume_from=args.resume)
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_extract(args) -> int:
    _apply_workers(args)
    model, config = _load_model(args.checkpoint, args.overrides)
    raw = load_cloud(args.cloud)
    _log_resolved(
        "extract",
        {"checkpoint": str(args.checkpoint), "cloud": str(args.cloud),
         "out": str(args.out)},
        config,
    )
    kps, _ = extract_from_raw(model, raw, config.extract)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    prov = kps.provenance
    header = (
        f"keypoints from {args.cloud}\n"
        f"lattice={prov.n_lattice} occupied={prov.n_occupied} "
        f"salient={prov.n_salient} after_nms={prov.n_after_nms}\n"
        f"iterations={prov.iterations} saliency_threshold={prov.saliency_threshold} "
        f"nms_radius={prov.nms_radius} snapped={prov.snapped}"
    )
    save_keypoints(out, kps.coordinates, kps.saliencies, header=header)
    if prov.note:
        print(f"note: {prov.note}")
    print(f"keypoints: {len(kps)} -> {out}")
    return 0


def _cmd_reconstruct(args) -> int:
    _apply_workers(args)
    model, config = _load_model(args.checkpoint, args.overrides)
    raw = load_cloud(args.cloud)
    cloud, norm = normalize_cloud(raw)
    _log_resolved(
        "reconstruct",
        {"checkpoint": str(args.checkpoint), "cloud": str(args.cloud),
         "iso": args.iso, "resolution": args.resolution, "out": str(args.out)},
        config,
    )
    mesh = reconstruct_surface(model, cloud, iso_threshold=args.iso,
                               resolution=args.resolution)
    vertices = norm.to_raw(mesh.vertices) if len(mesh.vertices) else mesh.vertices
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_mesh(out, vertices, mesh.triangles)
    if mesh.note:
        print(f"note: {mesh.note}")
    print(f"mesh: {len(vertices)} vertices {len(mesh.triangles)} faces -> {out}")
    return 0


def _cmd_slice(args) -> int:
    _apply_workers(args)
    model, config = _load_model(args.checkpoint, args.overrides)
    cloud, _ = normalize_cloud(load_cloud(args.cloud))
    _log_resolved(
        "slice",
        {"checkpoint": str(args.checkpoint), "cloud": str(args.cloud),
         "field": args.field, "axis": args.axis, "mode": args.mode,
         "resolution": args.resolution, "out": str(args.out)},
        config,
    )
    image = field_slice(model, cloud, args.field, axis=args.axis, mode=args.mode,
                        resolution=args.resolution)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_slice(out, image)
    print(f"slice: {image.shape[0]}x{image.shape[1]} -> {out}")
    return 0


def _sweep_points(args) -> list[float]:
    if args.sweep == "threshold":
        return _parse_float_list(args.epsilons, "--epsilons")
    if args.sweep == "downsample":
        return _parse_float_list(args.rates, "--rates")
    if args.sweep == "noise":
        return _parse_float_list(args.sigmas, "--sigmas")
    return [args.epsilon]


def _cmd_eval_repeat(args) -> int:
    _apply_workers(args)
    model, config = _load_model(args.checkpoint, args.overrides)
    cloud, _ = normalize_cloud(load_cloud(args.cloud))
    points = _sweep_points(args)
    _log_resolved(
        "eval-repeat",
        {"checkpoint": str(args.checkpoint), "cloud": str(args.cloud),
         "views": args.views, "sweep": args.sweep, "points": points,
         "seed": args.seed, "out": str(args.out)},
        config,
    )
    params = config.extract
    base = extract_keypoints(model, cloud, params)
    if len(base) == 0:
        print("note: no keypoints on the unperturbed cloud; report will be zeros")
    rng = np.random.default_rng(args.seed)
    transforms = [random_se3(rng, math.pi, args.max_translation)
                  for _ in range(args.views)]
    view_rng = np.random.default_rng(args.seed + 1)

    rows = []
    means = []
    for value in points:
        total = 0.0
        for v, transform in enumerate(transforms):
            view = PointCloud(apply_transform(cloud.points, transform))
            epsilon = args.epsilon
            if args.sweep == "threshold":
                epsilon = value
            elif args.sweep == "downsample":
                epsilon = SWEEP_EPSILON
                view = random_downsample(view, value, view_rng)
            elif args.sweep == "noise":
                epsilon = SWEEP_EPSILON
                view = add_gaussian_noise(view, value, view_rng)
            kps_view, _ = extract_from_raw(model, view.points, params)
            score = relative_repeatability(base, kps_view, transform, epsilon) \
                if len(base) else 0.0
            rows.append({"instance": f"view_{v:02d}", "metric": "repeatability",
                         "parameter": value, "value": score})
            total += score
        means.append(total / args.views)

    summary = {f"mean_repeatability@{value:g}": mean
               for value, mean in zip(points, means)}
    if args.sweep == "threshold":
        assert all(b >= a - 1e-12 for a, b in zip(means, means[1:])), \
            "repeatability must be non-decreasing in the matching radius"
    if args.sweep in ("downsample", "noise"):
        within = all(b <= a + args.monotone_tolerance
                     for a, b in zip(means, means[1:]))
        summary["monotone_within_tolerance"] = float(within)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metric_csv(out, rows, summary)
    for name, value in summary.items():
        print(f"{name}: {value:.6f}")
    print(f"report: {out}")
    return 0


def _cmd_eval_semantic(args) -> int:
    _apply_workers(args)
    thresholds = _parse_float_list(args.thresholds, "--thresholds")
    pred_coords, _ = load_keypoints(args.pred)
    if args.pred2:
        if not (args.corr_source and args.corr_target):
            raise ValueError("--pred2 requires --corr-source and --corr-target")
        pred2_coords, _ = load_keypoints(args.pred2)
        sources = load_cloud(args.corr_source)
        targets = load_cloud(args.corr_target)
        _log_resolved(
            "eval-semantic",
            {"protocol": "pairwise", "pred": str(args.pred), "pred2": str(args.pred2),
             "thresholds": thresholds, "out": str(args.out)},
        )
        curve = semantic_miou_pairwise(
            pred_coords, pred2_coords, (sources, targets), thresholds
        )
    else:
        if not (args.annot and args.cloud):
            raise ValueError("annotated protocol requires --annot and --cloud")
        annot_coords, _ = load_annotations(args.annot)
        cloud_pts = load_cloud(args.cloud)
        _log_resolved(
            "eval-semantic",
            {"protocol": "annotated", "pred": str(args.pred),
             "annot": str(args.annot), "cloud": str(args.cloud), "k": args.k,
             "thresholds": thresholds, "out": str(args.out)},
        )
        geo = geodesic_distances(cloud_pts, pred_coords, annot_coords, k=args.k)
        curve = semantic_miou_annotated(pred_coords, annot_coords, geo, thresholds)
    rows = [
        {"instance": "instance_0", "metric": "miou", "parameter": t, "value": v}
        for t, v in zip(thresholds, curve)
    ]
    summary = {"mean_miou": float(np.mean(curve))}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metric_csv(out, rows, summary)
    print(f"mean_miou: {summary['mean_miou']:.6f}")
    print(f"report: {out}")
    return 0


def _registration_pairs(args, rng) -> list[RegistrationPair]:
    if args.manifest and args.synthetic:
        raise ValueError("use either --manifest or --synthetic, not both")
    if args.manifest:
        manifest = load_manifest(args.manifest)
        pairs = []
        for record in manifest.records:
            if record.pair_path is None or record.transform is None:
                continue
            pairs.append(RegistrationPair(
                PointCloud(load_cloud(record.cloud_path)),
                PointCloud(load_cloud(record.pair_path)),
                record.transform,
            ))
        if not pairs:
            raise ValueError(f"manifest {args.manifest} contains no transform pairs")
        return pairs
    if args.synthetic < 1:
        raise ValueError("one of --manifest or --synthetic N is required")
    pairs = []
    for i in range(args.synthetic):
        sample = generate_shape("two-box", n_points=args.n, seed=args.seed + i)
        transform = random_se3(rng, math.pi / 2.0, 0.3)
        pairs.append(RegistrationPair(
            sample.cloud,
            PointCloud(apply_transform(sample.cloud.points, transform)),
            transform,
        ))
    return pairs


def _cmd_eval_register(args) -> int:
    _apply_workers(args)
    budgets = _parse_int_list(args.budgets, "--budgets")
    rng = np.random.default_rng(args.seed)
    pairs = _registration_pairs(args, rng)

    config = None
    if args.checkpoint:
        model, config = _load_model(args.checkpoint, args.overrides)
        detector = make_field_detector(model, config.extract)
    else:
        detector_rng = np.random.default_rng(args.seed + 1)
        max_budget = max(budgets)

        def detector(cloud: PointCloud):
            return random_detector(cloud, min(max_budget, len(cloud)), detector_rng)

    def descriptor(cloud, keypoints):
        return histogram_descriptor(cloud, keypoints, radius=args.descriptor_radius)

    _log_resolved(
        "eval-register",
        {"pairs": len(pairs), "budgets": budgets, "seed": args.seed,
         "detector": "field" if args.checkpoint else "random",
         "descriptor_radius": args.descriptor_radius, "out": str(args.out)},
        config,
    )
    params = RegistrationParams(
        ransac_iterations=args.ransac_iterations,
        ransac_inlier_radius=args.ransac_inlier_radius,
    )
    rows = []
    summary = {}
    for budget in budgets:
        report = registration_metrics(
            pairs, detector, descriptor, budget, params,
            np.random.default_rng(args.seed + 2),
        )
        for p, diag in enumerate(report.pair_diagnostics):
            rows.append({"instance": f"pair_{p:02d}", "metric": "inlier_ratio",
                         "parameter": budget, "value": diag["inlier_ratio"]})
            rows.append({"instance": f"pair_{p:02d}", "metric": "registered",
                         "parameter": budget, "value": float(diag["registered"])})
        summary[f"fmr@{budget}"] = report.fmr
        summary[f"inlier_ratio@{budget}"] = report.inlier_ratio
        summary[f"rr@{budget}"] = report.rr
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metric_csv(out, rows, summary)
    for name, value in summary.items():
        print(f"{name}: {value:.6f}")
    print(f"report: {out}")
    return 0


# ---------------------------------------------------------------------------
# parser assembly


def _add_override_arg(sub) -> None:
    sub.add_argument("overrides", nargs="*", metavar="section.key=value",
                     help="configuration overrides")


def _add_checkpoint_args(sub) -> None:
    sub.add_argument("--checkpoint", required=True, help="trained checkpoint path")
    sub.add_argument("--cloud", required=True, help="input point cloud (PLY or XYZ)")
    sub.add_argument("--workers", type=int, default=None,
                     help="cap compute threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kpfield",
        description="occupancy / keypoint-saliency fields: train, extract, evaluate",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="generate a synthetic benchmark shape")
    synth.add_argument("--kind", required=True, choices=KINDS)
    synth.add_argument("--n", type=int, default=2048, help="number of surface samples")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", required=True, help="output cloud path (.ply or .xyz)")
    synth.add_argument("--param", action="append", default=[], metavar="name=value",
                       help="shape size parameter (repeatable)")
    synth.add_argument("--corners-out", default=None,
                       help="also write analytic corners to this path")
    synth.add_argument("--binary", action="store_true", help="write binary PLY")
    synth.set_defaults(func=_cmd_synth)

    train = commands.add_parser("train", help="fit the fields on input clouds")
    train.add_argument("--config", default=None, help="config file path")
    train.add_argument("--preset", default=None, choices=PRESET_NAMES)
    train.add_argument("--cloud", action="append", default=[],
                       help="training cloud (repeatable)")
    train.add_argument("--out", required=True, help="output directory")
    train.add_argument("--seed", type=int, default=None,
                       help="overrides train.seed")
    train.add_argument("--resume", default=None, help="checkpoint to resume from")
    train.add_argument("--workers", type=int, default=None)
    _add_override_arg(train)
    train.set_defaults(func=_cmd_train)

    extract = commands.add_parser("extract", help="extract keypoints from a cloud")
    _add_checkpoint_args(extract)
    extract.add_argument("--out", required=True, help="output keypoint file")
    _add_override_arg(extract)
    extract.set_defaults(func=_cmd_extract)

    reconstruct = commands.add_parser("reconstruct",
                                      help="marching-cubes surface from the field")
    _add_checkpoint_args(reconstruct)
    reconstruct.add_argument("--out", required=True, help="output mesh (.ply)")
    reconstruct.add_argument("--iso", type=float, default=0.4,
                             help="occupancy isovalue")
    reconstruct.add_argument("--resolution", type=int, default=64)
    _add_override_arg(reconstruct)
    reconstruct.set_defaults(func=_cmd_reconstruct)

    slice_cmd = commands.add_parser("slice", help="2D slice image of a field")
    _add_checkpoint_args(slice_cmd)
    slice_cmd.add_argument("--out", required=True, help="output image (.csv or .pgm)")
    slice_cmd.add_argument("--field", default="occupancy", choices=FIELD_NAMES)
    slice_cmd.add_argument("--axis", default="z", choices=AXES)
    slice_cmd.add_argument("--mode", default="mid", choices=SLICE_MODES)
    slice_cmd.add_argument("--resolution", type=int, default=64)
    _add_override_arg(slice_cmd)
    slice_cmd.set_defaults(func=_cmd_slice)

    repeat = commands.add_parser("eval-repeat",
                                 help="repeatability under random rigid views")
    _add_checkpoint_args(repeat)
    repeat.add_argument("--out", required=True, help="output CSV report")
    repeat.add_argument("--views", type=int, default=20)
    repeat.add_argument("--epsilon", type=float, default=0.06,
                        help="matching radius outside sweeps")
    repeat.add_argument("--seed", type=int, default=0)
    repeat.add_argument("--max-translation", type=float, default=0.2)
    repeat.add_argument("--sweep", default="none", choices=SWEEP_KINDS)
    repeat.add_argument("--epsilons", default="0.02,0.04,0.06,0.08",
                        help="threshold sweep values")
    repeat.add_argument("--rates", default="1,2,4",
                        help="downsample sweep values")
    repeat.add_argument("--sigmas", default="0,0.02,0.04,0.06",
                        help="noise sweep values")
    repeat.add_argument("--monotone-tolerance", type=float, default=0.05)
    _add_override_arg(repeat)
    repeat.set_defaults(func=_cmd_eval_repeat)

    semantic = commands.add_parser("eval-semantic",
                                   help="semantic-consistency mIoU curves")
    semantic.add_argument("--pred", required=True, help="predicted keypoint file")
    semantic.add_argument("--annot", default=None, help="annotation file")
    semantic.add_argument("--cloud", default=None,
                          help="cloud for geodesic distances (annotated protocol)")
    semantic.add_argument("--pred2", default=None,
                          help="second model keypoints (pairwise protocol)")
    semantic.add_argument("--corr-source", default=None,
                          help="correspondence source cloud")
    semantic.add_argument("--corr-target", default=None,
                          help="correspondence target cloud")
    semantic.add_argument("--thresholds", default="0.01,0.02,0.05,0.1")
    semantic.add_argument("--k", type=int, default=8, help="geodesic graph degree")
    semantic.add_argument("--out", required=True)
    semantic.add_argument("--workers", type=int, default=None)
    semantic.set_defaults(func=_cmd_eval_semantic)

    register = commands.add_parser("eval-register",
                                   help="FMR / inlier ratio / RR protocol")
    register.add_argument("--checkpoint", default=None,
                          help="field detector checkpoint (default: random baseline)")
    register.add_argument("--manifest", default=None,
                          help="dataset manifest with GT-transform pairs")
    register.add_argument("--synthetic", type=int, default=0,
                          help="number of synthetic two-box pairs")
    register.add_argument("--n", type=int, default=2048,
                          help="points per synthetic cloud")
    register.add_argument("--budgets", default="100",
                          help="keypoint budgets, comma-separated")
    register.add_argument("--descriptor-radius", type=float, default=0.1)
    register.add_argument("--ransac-iterations", type=int, default=1000)
    register.add_argument("--ransac-inlier-radius", type=float, default=0.1)
    register.add_argument("--seed", type=int, default=0)
    register.add_argument("--out", required=True)
    register.add_argument("--workers", type=int, default=None)
    _add_override_arg(register)
    register.set_defaults(func=_cmd_eval_register)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, OSError, KeyError, RuntimeError) as exc:
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
