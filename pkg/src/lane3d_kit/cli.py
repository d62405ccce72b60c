"""Command-line surface binding all modules together.

Subcommands: gen-scene, gen-weights, anchors, forward, loss, evaluate,
grad-check, bench.  Exit codes: 0 success, 2 input error, 3
invariant/verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .anchors import (
    CoefficientHeadWeights,
    PrototypeBank,
    combine_metas,
    materialize,
    pool_and_weigh,
)
from .config import RunConfig, make_profile
from .errors import FileFormatError, Lane3DKitError
from .evaluation import evaluate_once, evaluate_openlane, format_report_table
from .gradcheck import run_grad_check
from .geometry import CameraRig
from .head import HeadWeights, Proposal, run_pipeline
from .lanes import Lane3D
from .laneio import Frame, read_lane_file, write_lane_file
from .losses import assign, total_loss
from .sampling import FeatureMap, FeatureVolume
from .synth import (
    NoiseSpec,
    SceneSpec,
    generate_scene,
    perturb_predictions,
    rasterize_features,
    rasterize_volume,
)
from .tensorio import read_tensors, write_tensors

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_VERIFY = 3

_LEVELS = (3, 4, 5)
_DEFAULT_SIGMA = 6.0
_DEFAULT_LIDAR_DIMS = (6, 24, 16)


def _load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig.default()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FileFormatError(path, f"offset {e.pos}", f"invalid JSON: {e.msg}") from e
    try:
        return RunConfig.from_json_dict(doc)
    except FileFormatError as e:
        raise FileFormatError(path, e.location, "missing field") from e


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=1))


# --- weights file ------------------------------------------------------------


def save_weights_file(
    path,
    bank: PrototypeBank,
    coeff: CoefficientHeadWeights,
    heads: dict[str, HeadWeights],
) -> None:
    tensors = {
        "proto.xs": bank.xs,
        "proto.phi": bank.phi,
        "proto.theta": bank.theta,
        "coeff.a_xs": coeff.a_xs,
        "coeff.b_xs": coeff.b_xs,
        "coeff.a_phi": coeff.a_phi,
        "coeff.b_phi": coeff.b_phi,
        "coeff.a_theta": coeff.a_theta,
        "coeff.b_theta": coeff.b_theta,
    }
    for wid, w in heads.items():
        for name in ("w_q", "w_k", "w_v", "w_o", "cls_w", "cls_b", "reg_w", "reg_b"):
            tensors[f"head.{wid}.{name}"] = getattr(w, name)
    write_tensors(path, tensors)


def load_weights_file(path):
    raw = read_tensors(path)

    def take(name):
        if name not in raw:
            raise FileFormatError(path, name, "missing tensor")
        return np.asarray(raw[name], dtype=np.float64)

    bank = PrototypeBank(xs=take("proto.xs"), phi=take("proto.phi"), theta=take("proto.theta"))
    coeff = CoefficientHeadWeights(
        a_xs=take("coeff.a_xs"), b_xs=take("coeff.b_xs"),
        a_phi=take("coeff.a_phi"), b_phi=take("coeff.b_phi"),
        a_theta=take("coeff.a_theta"), b_theta=take("coeff.b_theta"),
    )
    head_ids = sorted(
        {name.split(".")[1] for name in raw if name.startswith("head.")}
    )
    heads = {}
    for wid in head_ids:
        heads[wid] = HeadWeights(
            **{part: take(f"head.{wid}.{part}")
               for part in ("w_q", "w_k", "w_v", "w_o", "cls_w", "cls_b", "reg_w", "reg_b")}
        )
    return bank, coeff, heads


def make_random_weights(cfg: RunConfig, seed: int, scale: float = 0.02):
    rng = np.random.default_rng(seed)
    m_xs, m_phi, m_theta = cfg.num_prototypes
    bank = PrototypeBank.uniform(m_xs, m_phi, m_theta)
    h_f, w_f = cfg.feature_size
    coeff = CoefficientHeadWeights.random(
        rng, w_f * cfg.feature_channels, cfg.num_anchors, bank, scale=scale
    )
    channels = cfg.feature_channels + (cfg.lidar_channels if cfg.fusion else 0)
    feature_len = cfg.profile.num_points * channels
    heads = {}
    for _, wid in cfg.plan.stages:
        if wid not in heads:
            heads[wid] = HeadWeights.random(
                rng, feature_len, cfg.profile.num_categories, cfg.profile.num_points,
                scale=scale,
            )
    return bank, coeff, heads


# --- scene files --------------------------------------------------------------


def _feature_maps_for_frame(tensors: dict, frame_id: str) -> dict[int, FeatureMap]:
    maps = {}
    for level in _LEVELS:
        for key in (f"{frame_id}/F{level}", f"F{level}"):
            if key in tensors:
                maps[level] = FeatureMap(
                    data=np.asarray(tensors[key], dtype=np.float64), level=level
                )
                break
    return maps


def _volumes_for_frame(tensors: dict, frame_id: str) -> dict[int, FeatureVolume] | None:
    vols = {}
    for level in _LEVELS:
        data_key = extent_key = None
        for dk, ek in (
            (f"{frame_id}/L{level}", f"{frame_id}/L{level}.extent"),
            (f"L{level}", f"L{level}.extent"),
        ):
            if dk in tensors and ek in tensors:
                data_key, extent_key = dk, ek
                break
        if data_key is None:
            return None
        vols[level] = FeatureVolume(
            data=np.asarray(tensors[data_key], dtype=np.float64),
            extent=np.asarray(tensors[extent_key], dtype=np.float64),
        )
    return vols


def cmd_gen_scene(args) -> int:
    try:
        doc = json.loads(Path(args.spec).read_text())
    except json.JSONDecodeError as e:
        raise FileFormatError(args.spec, f"offset {e.pos}", f"invalid JSON: {e.msg}") from e
    profile = make_profile(doc.pop("profile", "openlane"))
    sigma = float(doc.pop("sigma", _DEFAULT_SIGMA))
    channels = int(doc.pop("feature_channels", 64))
    with_lidar = bool(doc.pop("lidar", False))
    lidar_channels = int(doc.pop("lidar_channels", 8))
    noise_doc = doc.pop("noise", None)
    try:
        spec = SceneSpec.from_json_dict(doc)
    except TypeError as e:
        raise FileFormatError(args.spec, "/", f"bad scene spec: {e}") from e

    gts, rig = generate_scene(spec, profile, with_lidar=with_lidar)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_lane_file(out / "gt.json", [Frame(id="0", camera=rig, lanes=gts)])

    h_f, w_f = rig.feature_size
    tensors = {}
    for level in _LEVELS:
        fm = rasterize_features(gts, rig, (h_f, w_f, channels), sigma, level=level)
        tensors[f"F{level}"] = fm.data
    if with_lidar:
        extent = np.array([[-15.0, 15.0], [0.0, 105.0], [-2.0, 3.0]])
        dims = (*_DEFAULT_LIDAR_DIMS, lidar_channels)
        vol = rasterize_volume(gts, dims, extent)
        for level in _LEVELS:
            tensors[f"L{level}"] = vol.data
            tensors[f"L{level}.extent"] = vol.extent
    write_tensors(out / "features.a3t", tensors)
    if noise_doc is not None:
        noise = NoiseSpec.from_json_dict(noise_doc)
        props = perturb_predictions(gts, noise, spec.seed, profile.num_categories)
        lanes = [p.to_lane(profile.y_samples) for p in props]
        write_lane_file(out / "preds.json", [Frame(id="0", camera=rig, lanes=lanes)])
    print(f"wrote scene with {len(gts)} lanes to {out}")
    return EXIT_OK


def cmd_gen_weights(args) -> int:
    cfg = _load_config(args.config)
    bank, coeff, heads = make_random_weights(cfg, args.seed, scale=args.scale)
    save_weights_file(args.out, bank, coeff, heads)
    print(f"wrote {len(heads)} head(s) to {args.out}")
    return EXIT_OK


def cmd_anchors(args) -> int:
    cfg = _load_config(args.config)
    bank, coeff_w, _ = load_weights_file(args.weights)
    tensors = read_tensors(args.features)
    maps = _feature_maps_for_frame(tensors, "0")
    if 5 not in maps:
        raise FileFormatError(args.features, "F5", "missing level-5 feature map")
    coeffs = pool_and_weigh(maps[5], coeff_w)
    metas = combine_metas(bank, coeffs, cfg.meta_ranges, literal_scale=cfg.literal_meta_scale)
    anchors = [materialize(m, cfg.profile.y_samples) for m in metas]
    doc = {
        "metas": [{"xs": m.xs, "phi": m.phi, "theta": m.theta} for m in metas],
        "anchors": [a.points.tolist() for a in anchors],
    }
    Path(args.out).write_text(json.dumps(doc, indent=1) + "\n")
    print(f"wrote {len(anchors)} anchors to {args.out}")
    return EXIT_OK


def _forward_frame(cfg: RunConfig, frame: Frame, tensors: dict, weights):
    rig = frame.camera
    if rig is None:
        raise FileFormatError("<scene>", f"/frames/{frame.id}/camera", "frame has no rig")
    maps = _feature_maps_for_frame(tensors, frame.id)
    missing = [lvl for lvl, _ in cfg.plan.stages if lvl not in maps]
    if missing:
        raise FileFormatError("<scene>", f"F{missing[0]}", "missing feature level")
    vols = _volumes_for_frame(tensors, frame.id) if cfg.fusion else None
    if cfg.fusion and vols is None:
        raise FileFormatError("<scene>", "L5", "fusion enabled but no lidar volumes")
    bank, coeff_w, heads = weights
    return run_pipeline(
        maps, vols, rig, bank, coeff_w, heads, cfg.plan,
        cfg.profile.y_samples, cfg.meta_ranges,
        literal_scale=cfg.literal_meta_scale,
    )


def cmd_forward(args) -> int:
    cfg = _load_config(args.config)
    scene = Path(args.scene)
    frames = read_lane_file(scene / "gt.json")
    tensors = read_tensors(scene / "features.a3t")
    weights = load_weights_file(args.weights)

    out_frames = []
    traces = []
    for frame in frames:
        result = _forward_frame(cfg, frame, tensors, weights)
        lanes = [p.to_lane(cfg.profile.y_samples) for p in result.proposals]
        out_frames.append(Frame(id=frame.id, camera=frame.camera, lanes=lanes, tags=frame.tags))
        if args.trace:
            traces.append(
                {"frame": frame.id, "stages": [st.to_json_dict() for st in result.trace]}
            )
    write_lane_file(args.out, out_frames)
    if args.trace:
        Path(args.trace).write_text(json.dumps(traces, indent=1) + "\n")
    print(f"wrote proposals for {len(out_frames)} frame(s) to {args.out}")
    return EXIT_OK


def _proposal_from_lane(lane: Lane3D, where: str) -> Proposal:
    if lane.class_probs is None:
        raise FileFormatError("<pred>", where, "lane lacks class_probs; run forward to produce them")
    return Proposal(
        class_probs=lane.class_probs, x=lane.x, z=lane.z, vis=lane.visibility,
        score=lane.score,
    )


def _check_on_profile_grid(lane: Lane3D, y: np.ndarray, where: str) -> None:
    if lane.y.shape[0] != y.shape[0] or not np.allclose(lane.y, y, atol=1e-9):
        raise FileFormatError("<lane file>", where, "lane is not on the profile y-grid")


def cmd_loss(args) -> int:
    cfg = _load_config(args.config)
    gt_frames = {f.id: f for f in read_lane_file(args.gt)}
    pred_frames = read_lane_file(args.pred)
    y = cfg.profile.y_samples
    per_frame = []
    sums = {"cls": 0.0, "reg": 0.0, "ew": 0.0, "total": 0.0}
    for pf in pred_frames:
        if pf.id not in gt_frames:
            raise FileFormatError(args.pred, f"/frames/{pf.id}", "no matching ground-truth frame")
        gts = gt_frames[pf.id].lanes
        for i, lane in enumerate(gts):
            _check_on_profile_grid(lane, y, f"/frames/{pf.id}/lanes/{i}")
        props = [
            _proposal_from_lane(lane, f"/frames/{pf.id}/lanes/{i}")
            for i, lane in enumerate(pf.lanes)
        ]
        assignment = assign(gts, props, cfg.loss)
        breakdown, _ = total_loss(gts, props, assignment, cfg.loss, y)
        per_frame.append({"id": pf.id, **breakdown.to_json_dict()})
        for key in sums:
            sums[key] += per_frame[-1][key]
    _print_json({"frames": per_frame, "sum": sums})
    return EXIT_OK


def _frame_pairs(gt_frames, pred_frames, tag_filter):
    by_id = {f.id: f for f in pred_frames}
    pairs = []
    ids = []
    for gf in gt_frames:
        if tag_filter and tag_filter not in gf.tags:
            continue
        pf = by_id.get(gf.id)
        pairs.append((gf.lanes, pf.lanes if pf else []))
        ids.append(gf.id)
    return pairs, ids


def _write_svg(path, gts, preds) -> None:
    # Top view: x right, y up, 5 px per meter over x in [-20, 20], y in [0, 110].
    def pts(lane):
        return " ".join(
            f"{(x + 20) * 5:.1f},{(110 - y) * 5:.1f}" for x, y in zip(lane.x, lane.y)
        )

    rows = ['<svg xmlns="http://www.w3.org/2000/svg" width="200" height="550">']
    for lane in gts:
        rows.append(f'<polyline points="{pts(lane)}" fill="none" stroke="green"/>')
    for lane in preds:
        rows.append(
            f'<polyline points="{pts(lane)}" fill="none" stroke="red" stroke-dasharray="4"/>'
        )
    rows.append("</svg>")
    Path(path).write_text("\n".join(rows) + "\n")


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config)
    gt_frames = read_lane_file(args.gt)
    pred_frames = read_lane_file(args.pred)
    pairs, ids = _frame_pairs(gt_frames, pred_frames, args.tag_filter)
    if args.plot:
        plot_dir = Path(args.plot)
        plot_dir.mkdir(parents=True, exist_ok=True)
        for (gts, preds), fid in zip(pairs, ids):
            _write_svg(plot_dir / f"frame_{fid}.svg", gts, preds)
    if args.protocol == "openlane":
        report = evaluate_openlane(pairs, cfg.eval_openlane)
        doc = report.to_json_dict()
        doc["empty_gt_frames"] = [ids[i] for i in report.empty_gt_frames]
        if args.out:
            Path(args.out).write_text(json.dumps(doc, indent=1) + "\n")
        _print_json(doc)
        print(format_report_table(report))
    else:
        report = evaluate_once(pairs, cfg.eval_once)
        if args.out:
            Path(args.out).write_text(json.dumps(report.to_json_dict(), indent=1) + "\n")
        _print_json(report.to_json_dict())
    return EXIT_OK


def cmd_grad_check(args) -> int:
    cfg = _load_config(args.config)
    result = run_grad_check(args.trials, args.seed, cfg.loss)
    _print_json(result.to_json_dict())
    return EXIT_OK if result.passed else EXIT_VERIFY


def _bench_setup(seed: int):
    cfg = RunConfig.default("openlane")
    spec = SceneSpec(
        n_lanes=4, curvature=(0.0, 0.02), slope=(0.0, 0.005), seed=seed
    )
    gts, rig = generate_scene(spec, cfg.profile)
    h_f, w_f = rig.feature_size
    features = {
        level: rasterize_features(gts, rig, (h_f, w_f, cfg.feature_channels),
                                  _DEFAULT_SIGMA, level=level)
        for level in _LEVELS
    }
    bank, coeff_w, heads = make_random_weights(cfg, seed)
    return cfg, gts, rig, features, (bank, coeff_w, heads)


def cmd_bench(args) -> int:
    cfg, gts, rig, features, (bank, coeff_w, heads) = _bench_setup(args.seed)

    def one_frame(_: int) -> float:
        result = run_pipeline(
            features, None, rig, bank, coeff_w, heads, cfg.plan,
            cfg.profile.y_samples, cfg.meta_ranges,
        )
        lanes = [p.to_lane(cfg.profile.y_samples) for p in result.proposals]
        report = evaluate_openlane([(gts, lanes)], cfg.eval_openlane)
        return report.f1

    start = time.perf_counter()
    if args.threads <= 1:
        for i in range(args.frames):
            one_frame(i)
    else:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            list(pool.map(one_frame, range(args.frames)))
    elapsed = time.perf_counter() - start
    fps = args.frames / elapsed if elapsed > 0 else float("inf")
    _print_json(
        {"frames": args.frames, "threads": args.threads,
         "seconds": round(elapsed, 4), "fps": round(fps, 2)}
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lane3d-kit",
        description="3D lane anchors, losses, and evaluation at desk scale",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="generate a synthetic scene directory")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("gen-weights", help="generate a random seeded weights file")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=0.02)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_weights)

    p = sub.add_parser("anchors", help="emit adaptive anchors for a feature file")
    p.add_argument("--config", default=None)
    p.add_argument("--features", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_anchors)

    p = sub.add_parser("forward", help="run the refinement pipeline on a scene")
    p.add_argument("--config", default=None)
    p.add_argument("--scene", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", default=None)
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("loss", help="compute losses for predictions against GT")
    p.add_argument("--config", default=None)
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("evaluate", help="run a metric protocol over lane files")
    p.add_argument("--protocol", choices=("openlane", "once"), required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--tag-filter", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--plot", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("grad-check", help="verify analytic gradients numerically")
    p.add_argument("--config", default=None)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("bench", help="forward+evaluate throughput on synthetic frames")
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except FileFormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (Lane3DKitError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
