"""``epivo`` command line: synth, fivepoint, optimize, eval and gradcheck subcommands.

Exit codes: 0 on success, 1 on input/output errors, 2 when estimation fails.
Every run prints a header listing all options, defaults included, and writes
only inside its ``--out`` directory.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import imageio, synth
from .evaluation import CAPS, DepthMetrics, atde, depth_metrics, snippet_metrics
from .fivepoint import FivePointError, decompose_essential, ransac_essential
from .geometry import CameraIntrinsics, GeometryError, Pose, format_pose, load_poses, normalize, rotation_angle
from .gradcheck import check_gradients, random_check_scene
from .losses import LossConfig, epipolar_weight_map, depth_from_inverse, normalize_inverse_depth
from .optim import ADAM_BETA1, ADAM_BETA2, ADAM_LR, optimize_direct, write_trace

EXIT_OK = 0
EXIT_IO = 1
EXIT_ESTIMATION = 2
GRADCHECK_TOL = 1e-4
PRESETS = ("plane", "edge", "mover", "odometry", "stripes")


class InputError(Exception):
    pass


def _fmt(x: float) -> str:
    return f"{x:.12e}"


def _require_files(*paths):
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise InputError(f"no such file: {p}")


def _prepare_out(out: str) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _header(args: argparse.Namespace) -> str:
    items = {k: v for k, v in vars(args).items() if k != "func"}
    return "\n".join([f"# epivo {args.command}"] + [f"# {k} = {items[k]}" for k in sorted(items)])


def read_correspondences(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Pixel matches from a CSV with header ``tx,ty,sx,sy``."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["tx", "ty", "sx", "sy"]:
            raise InputError(f"{path}: expected header 'tx,ty,sx,sy'")
        rows = [[float(v) for v in row] for row in reader if row]
    data = np.array(rows, dtype=float).reshape(-1, 4)
    return data[:, :2], data[:, 2:]


def write_correspondences(path: str | Path, target_px: np.ndarray, source_px: np.ndarray) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["tx", "ty", "sx", "sy"])
        for (tx, ty), (sx, sy) in zip(target_px, source_px):
            writer.writerow([_fmt(tx), _fmt(ty), _fmt(sx), _fmt(sy)])


def _write_matrix(path: Path, m: np.ndarray) -> None:
    path.write_text("".join(" ".join(_fmt(v) for v in row) + "\n" for row in m))


def _estimate(target_px, source_px, k: CameraIntrinsics, args):
    qt = normalize(target_px, k)
    qs = normalize(source_px, k)
    result = ransac_essential(qt, qs, threshold=args.ransac_thresh, max_iters=args.ransac_iters, seed=args.seed)
    hyp = decompose_essential(result.best, qt[result.inlier_mask], qs[result.inlier_mask])
    return result, hyp


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    _require_files(args.scene)
    if args.scene:
        spec = synth.load_scene(args.scene)
    elif args.preset in ("plane", "edge"):
        spec = synth.plane_scene(args.size, args.seed, "sines" if args.preset == "plane" else "edge")
    elif args.preset == "mover":
        spec = synth.mover_scene(args.size, args.seed)
    else:
        spec = synth.odometry_scene(args.size, args.seed, "sines" if args.preset == "odometry" else "stripes")
    out = _prepare_out(args.out)
    pair = synth.render_pair(spec)
    k = pair.intrinsics
    imageio.write_pnm(out / "target.pgm", pair.target)
    imageio.write_pnm(out / "source.pgm", pair.source)
    imageio.write_pfm(out / "depth.pfm", pair.depth)
    imageio.write_pfm(out / "inv_depth.pfm", pair.inv_depth)
    imageio.write_pnm(out / "mover_mask.pgm", pair.mover_mask.astype(float))
    k.save(out / "intrinsics.txt")
    (out / "pose.txt").write_text(format_pose(pair.pose) + "\n")
    (out / "loss_pose.txt").write_text(format_pose(pair.loss_pose()) + "\n")
    if pair.essential is not None:
        _write_matrix(out / "essential.txt", pair.essential)
    qt, qs, inlier = synth.sample_correspondences(pair, args.num_corr, args.noise, args.outlier_frac, args.seed)
    write_correspondences(out / "corr.csv", qt * [k.fx, k.fy] + [k.cx, k.cy], qs * [k.fx, k.fy] + [k.cx, k.cy])
    np.savetxt(out / "corr_labels.csv", inlier.astype(int), fmt="%d", header="inlier", comments="")
    print(f"rendered {spec.width}x{spec.height} pair, {args.num_corr} correspondences -> {out}")
    return EXIT_OK


def cmd_fivepoint(args) -> int:
    _require_files(args.corr, args.intrinsics)
    k = CameraIntrinsics.load(args.intrinsics)
    target_px, source_px = read_correspondences(args.corr)
    out = _prepare_out(args.out)
    result, hyp = _estimate(target_px, source_px, k, args)
    _write_matrix(out / "essential.txt", result.best)
    (out / "pose.txt").write_text(format_pose(hyp.pose) + "\n")
    with open(out / "inliers.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["index", "inlier"])
        for i, flag in enumerate(result.inlier_mask):
            writer.writerow([i, int(flag)])
    print(f"inliers {result.inlier_count}/{len(target_px)}; cheirality votes {hyp.cheirality_votes}")
    print("t_dir " + " ".join(_fmt(v) for v in hyp.pose.translation))
    return EXIT_OK


def cmd_optimize(args) -> int:
    _require_files(args.target, args.source, args.intrinsics, args.depth_init, args.corr, args.pose_init, args.gt_pose)
    if args.depth_init is None and args.flat_depth is None:
        raise InputError("give --depth-init or --flat-depth")
    if not args.no_epi and args.corr is None:
        raise InputError("epipolar weighting needs --corr (or pass --no-epi)")
    k = CameraIntrinsics.load(args.intrinsics)
    target = imageio.read_pnm(args.target)
    source = imageio.read_pnm(args.source)
    if args.depth_init is not None:
        inv_depth = 1.0 / np.clip(imageio.read_pfm(args.depth_init), 1e-3, 1e3)
    else:
        inv_depth = np.full(target.shape[:2], 1.0 / args.flat_depth)
    if inv_depth.shape != target.shape[:2] or source.shape != target.shape:
        raise InputError("target, source and depth dimensions differ")
    gt_pose = load_poses(args.gt_pose)[0] if args.gt_pose else None
    out = _prepare_out(args.out)

    E, init = None, Pose.identity()
    if args.corr is not None:
        target_px, source_px = read_correspondences(args.corr)
        result, hyp = _estimate(target_px, source_px, k, args)
        E = result.best
        init = hyp.pose.with_translation(hyp.pose.translation * args.init_baseline)
        print(f"five-point: inliers {result.inlier_count}/{len(target_px)}")
    if args.pose_init:
        init = load_poses(args.pose_init)[0]
    config = LossConfig(args.scales, args.lambda_smooth, not args.no_epi, None if args.no_epi else E,
                        args.stop_grad_weight)
    res = optimize_direct(target, source, inv_depth, init, k, config, args.iters, args.lr,
                          optimize_depth=not args.fix_depth)

    (out / "pose.txt").write_text(format_pose(res.pose) + "\n")
    imageio.write_pfm(out / "inv_depth.pfm", res.inv_depth)
    write_trace(out / "trace.csv", res.trace)
    if E is not None:
        depth = depth_from_inverse(normalize_inverse_depth(res.inv_depth))
        weights = epipolar_weight_map(depth, k, res.pose, E)
        imageio.write_pfm(out / "weights.pfm", weights)
        imageio.write_pnm(out / "weights.pgm", imageio.heatmap(weights))
    summary = [f"final loss {_fmt(res.final.total)}"]
    if gt_pose is not None:
        rot = float(np.rad2deg(rotation_angle(res.pose.rotation @ gt_pose.rotation.T)))
        summary.append(f"atde {_fmt(atde(res.pose.translation, gt_pose.translation))} rad")
        summary.append(f"rotation error {_fmt(rot)} deg")
    line = "; ".join(summary)
    (out / "summary.txt").write_text(line + "\n")
    print(line)
    return EXIT_OK


def _depth_table(pred, gt, mask, caps) -> list[tuple[float, DepthMetrics]]:
    return [(cap, depth_metrics(pred, gt, mask, cap)) for cap in caps]


def _trajectory_snippets(poses: list[Pose], length: int = 3) -> list[list[Pose]]:
    snippets = []
    for i in range(len(poses) - length + 1):
        base = poses[i].inverse()
        snippets.append([base @ p for p in poses[i : i + length]])
    return snippets


def cmd_eval(args) -> int:
    _require_files(args.pred, args.gt, args.mask)
    out = _prepare_out(args.out)
    lines, rows = [], []
    if args.pred.endswith(".pfm"):
        pred = imageio.read_pfm(args.pred)
        gt = imageio.read_pfm(args.gt)
        mask = imageio.read_mask(args.mask) if args.mask else gt > 0
        caps = (args.cap,) if args.cap is not None else CAPS
        lines.append("cap " + " ".join(f"{f:>12s}" for f in DepthMetrics.FIELDS))
        rows.append(["cap", *DepthMetrics.FIELDS])
        for cap, m in _depth_table(pred, gt, mask, caps):
            lines.append(f"{cap:g} " + " ".join(f"{v:12.6f}" for v in m.as_tuple()))
            rows.append([f"{cap:g}", *(_fmt(v) for v in m.as_tuple())])
    else:
        pred = load_poses(args.pred)
        gt = load_poses(args.gt)
        if len(pred) != len(gt) or len(pred) < 3:
            raise InputError("trajectories must have equal length of at least 3 poses")
        m = snippet_metrics(_trajectory_snippets(pred), _trajectory_snippets(gt))
        lines.append(f"ATE {m.ate_mean:.6f} +- {m.ate_std:.6f} m")
        lines.append(f"ATDE {m.atde_mean:.6f} +- {m.atde_std:.6f} rad")
        rows.append(["ate_mean", "ate_std", "atde_mean", "atde_std"])
        rows.append([_fmt(m.ate_mean), _fmt(m.ate_std), _fmt(m.atde_mean), _fmt(m.atde_std)])
    text = "\n".join(lines) + "\n"
    (out / "metrics.txt").write_text(text)
    with open(out / "metrics.csv", "w", newline="") as f:
        csv.writer(f, lineterminator="\n").writerows(rows)
    print(text, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    out = _prepare_out(args.out)
    rows = [["config", "epipolar", "stop_grad", "pose_rel_err", "depth_rel_err", "pass"]]
    failures = 0
    for i in range(args.configs):
        seed = args.seed + i
        pair, inv_depth, pose = random_check_scene(seed, args.size)
        epi = i % 2 == 1
        config = LossConfig(args.scales, args.lambda_smooth, epi, pair.essential if epi else None, epi and i % 4 == 3)
        r = check_gradients(pair.target, pair.source, inv_depth, pose, pair.intrinsics, config,
                            pixels=args.pixels, seed=seed)
        ok = r.pose_error < GRADCHECK_TOL and r.depth_error < GRADCHECK_TOL
        failures += not ok
        rows.append([seed, int(epi), int(config.stop_grad_weight), _fmt(r.pose_error), _fmt(r.depth_error), int(ok)])
        print(f"config {seed}: pose {r.pose_error:.3e} depth {r.depth_error:.3e} {'PASS' if ok else 'FAIL'}")
    with open(out / "gradcheck.csv", "w", newline="") as f:
        csv.writer(f, lineterminator="\n").writerows(rows)
    print(f"{args.configs - failures}/{args.configs} configurations passed")
    return EXIT_OK if failures == 0 else EXIT_ESTIMATION


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _ransac_flags(p):
    p.add_argument("--ransac-thresh", type=float, default=1e-6, help="Sampson inlier threshold (normalized units squared)")
    p.add_argument("--ransac-iters", type=int, default=1000)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epivo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic pair with ground truth")
    p.add_argument("--scene", help="scene description file (key = value lines)")
    p.add_argument("--preset", choices=PRESETS, default="plane", help="built-in scene when --scene is not given")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--num-corr", type=int, default=200)
    p.add_argument("--noise", type=float, default=0.0, help="correspondence noise std (normalized units)")
    p.add_argument("--outlier-frac", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fivepoint", help="robust essential matrix and relative pose")
    p.add_argument("--corr", required=True, help="CSV with header tx,ty,sx,sy (pixels)")
    p.add_argument("--intrinsics", required=True, help="text file 'fx fy cx cy'")
    _ransac_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fivepoint)

    p = sub.add_parser("optimize", help="direct pose/depth optimization of the multi-scale loss")
    p.add_argument("--target", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--depth-init", help="initial depth (PFM)")
    p.add_argument("--flat-depth", type=float, help="constant initial depth")
    p.add_argument("--corr", help="correspondence CSV for the five-point essential matrix")
    p.add_argument("--pose-init", help="initial pose (KITTI line); default: five-point pose or identity")
    p.add_argument("--init-baseline", type=float, default=0.1, help="translation norm given to the five-point initial pose")
    p.add_argument("--gt-pose", help="ground-truth pose (KITTI line) for the summary")
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--lr", type=float, default=ADAM_LR)
    p.add_argument("--scales", type=int, default=4)
    p.add_argument("--lambda-smooth", type=float, default=0.2)
    _ransac_flags(p)
    p.add_argument("--no-epi", action="store_true", help="disable epipolar weighting")
    p.add_argument("--stop-grad-weight", action="store_true", help="treat the epipolar weight as a constant")
    p.add_argument("--fix-depth", action="store_true", help="optimize the pose only")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_optimize, beta1=ADAM_BETA1, beta2=ADAM_BETA2)

    p = sub.add_parser("eval", help="depth (PFM) or trajectory (KITTI text) metrics")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mask", help="validity mask PGM for depth (0 = missing); default gt > 0")
    p.add_argument("--cap", type=float, help="depth cap in meters; default reports both 50 and 80")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference gradients on random scenes")
    p.add_argument("--configs", type=int, default=50)
    p.add_argument("--pixels", type=int, default=20)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--scales", type=int, default=4)
    p.add_argument("--lambda-smooth", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    print(_header(args))
    threads = os.environ.get("EPIVO_THREADS")
    try:
        with threadpool_limits(limits=int(threads) if threads else None):
            return args.func(args)
    except FivePointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except (InputError, OSError, ValueError, GeometryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
