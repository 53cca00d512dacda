"""Command-line front end: ``cascade3d {pcs-stats,eval,cascade-sim,voxel-stats,convert}``.

Settings come from an optional ``key = value`` config file; command-line
flags override it. Every table written starts with a config echo line.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

from . import plotting
from .cascade import (
    ContractionRefiner,
    IdentityRefiner,
    IoUConfidenceScorer,
    JitteredContractionRefiner,
    bin_spread,
    experiment_iou_gain,
    experiment_loss_distribution,
    synthetic_loss_samples,
)
from .completeness import SparsityLevel, pc_score, pc_score_histogram, sparsity_counts
from .dataset_io import (
    DetectionRecord,
    Difficulty,
    KittiLayout,
    WaymoLayout,
    camera_box_to_lidar,
    difficulty_of,
    parse_calib_file,
    parse_label_file,
    read_result_labels,
    read_velodyne_bin,
    read_waymo_jsonl,
)
from .evaluation import EvalConfig, FrameEvalRecord, GroundTruth, error_analysis, evaluate, pc_binned_ap
from .geometry import PointCloud
from .report import write_table
from .voxelgrid import PRESETS, VoxelConfig, dump_grid, grid_dims, occupancy_stats, voxelize

log = logging.getLogger("cascade3d")

DEFAULT_CLASSES = {"kitti": ["Car"], "waymo-export": ["Vehicle"]}
DEFAULT_IOU_THRESH = {"Car": 0.7, "Vehicle": 0.7, "Van": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5}


@dataclass
class RunConfig:
    dataset_root: Optional[str] = None
    dataset: str = "kitti"
    split: Optional[str] = None
    out: str = "out"
    seed: int = 0
    threads: int = 1
    classes: list[str] = field(default_factory=list)
    metric: Optional[str] = None
    iou: str = "3d"
    iou_thresh: Optional[float] = None
    results: Optional[str] = None
    bin_width: float = 0.05
    pc_bins: list[float] = field(default_factory=list)
    error_thresholds: list[float] = field(default_factory=list)
    voxel_preset: str = "kitti"
    range_min: list[float] = field(default_factory=list)
    range_max: list[float] = field(default_factory=list)
    voxel_size: list[float] = field(default_factory=list)
    dump_grids: bool = False
    refiner: str = "jitter"
    lam: float = 0.5
    sigma_center: float = 0.05
    stages: list[int] = field(default_factory=lambda: [1, 3])
    grid: list[float] = field(default_factory=lambda: [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
    n: int = 1000
    loss_samples: int = 2000
    loss_bins: float = 0.1
    plots: bool = True

    def class_list(self) -> list[str]:
        return self.classes or DEFAULT_CLASSES.get(self.dataset, ["Car"])

    def positions(self) -> tuple[int, ...]:
        return {None: (11, 40), "ap11": (11,), "ap40": (40,)}[self.metric]

    def voxel_config(self) -> VoxelConfig:
        base = PRESETS[self.voxel_preset]
        return VoxelConfig(
            tuple(self.range_min) if self.range_min else base.range_min,
            tuple(self.range_max) if self.range_max else base.range_max,
            tuple(self.voxel_size) if self.voxel_size else base.voxel_size,
        )

    def echo(self, command: str) -> dict:
        # thread count and output location never change results, so they stay out
        d = {k: v for k, v in asdict(self).items() if k not in ("threads", "out")}
        d["command"] = command
        return d


def _coerce(name: str, raw):
    f = {f.name: f for f in fields(RunConfig)}[name]
    kind = str(f.type)
    if isinstance(raw, list) or raw is None:
        return raw
    if kind.startswith("list"):
        parts = [p for p in str(raw).replace(",", " ").split() if p]
        conv = int if "int" in kind else float if "float" in kind else str
        return [conv(p) for p in parts]
    if kind == "bool":
        return str(raw).strip().lower() in ("1", "true", "yes", "on")
    if kind == "int":
        return int(raw)
    if "float" in kind:
        return float(raw)
    return str(raw)


def load_config_file(path: str | Path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment; dashes in keys become underscores."""
    out = {}
    known = {f.name for f in fields(RunConfig)}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        k = k.replace("-", "_")
        if k not in known:
            raise ValueError(f"{path}:{lineno}: unknown key {k!r}")
        out[k] = _coerce(k, v)
    return out


def build_config(args: argparse.Namespace) -> RunConfig:
    values = load_config_file(args.config) if args.config else {}
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = _coerce(f.name, v)
    return RunConfig(**values)


# --- frame loading --------------------------------------------------------------


@dataclass
class FrameData:
    frame_id: str
    gts: list[GroundTruth]
    cloud: Optional[PointCloud]


def _pmap(fn: Callable, items: Sequence, threads: int) -> list:
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _gt_with_completeness(box, cls, cloud, difficulty=None, num_points=None) -> GroundTruth:
    q, n = math.nan, 0
    if cloud is not None and not box.is_degenerate:
        r = pc_score(box, cloud)
        q, n = r.score, r.point_count
    return GroundTruth(box, cls, difficulty, q, n if num_points is None else num_points)


def load_frames(cfg: RunConfig, need_cloud: bool, errors: list[str]) -> list[FrameData]:
    """Ground truths (LiDAR frame, with completeness when clouds exist) for every frame."""
    if not cfg.dataset_root:
        raise SystemExit("error: --dataset-root is required")
    root = Path(cfg.dataset_root)
    if not root.exists():
        raise SystemExit(f"error: dataset root {root} does not exist")

    if cfg.dataset == "kitti":
        layout = KittiLayout.find(root)
        ids = layout.frame_ids(cfg.split)

        def load(fid: str):
            missing = [p for p in (layout.label(fid), layout.calib(fid)) if not p.exists()]
            if need_cloud and not layout.velodyne(fid).exists():
                missing.append(layout.velodyne(fid))
            if missing:
                return fid, None, [str(p) for p in missing]
            calib = parse_calib_file(layout.calib(fid))
            cloud = read_velodyne_bin(layout.velodyne(fid)) if layout.velodyne(fid).exists() else None
            gts = []
            for lab in parse_label_file(layout.label(fid)):
                if lab.class_name == "DontCare" or min(lab.dims_cam) <= 0:
                    continue
                box = camera_box_to_lidar(lab, calib)
                gts.append(_gt_with_completeness(box, lab.class_name, cloud, difficulty_of(lab)))
            return fid, FrameData(fid, gts, cloud), []

    elif cfg.dataset == "waymo-export":
        layout = WaymoLayout(root)
        objs = layout.objects_by_frame()
        ids = list(objs)

        def load(fid: str):
            p = layout.points(fid)
            if need_cloud and not p.exists():
                return fid, None, [str(p)]
            cloud = read_velodyne_bin(p) if p.exists() else None
            gts = [_gt_with_completeness(o.box, o.class_name, cloud, None, o.num_points) for o in objs[fid] if not o.box.is_degenerate]
            return fid, FrameData(fid, gts, cloud), []
    else:
        raise SystemExit(f"error: unknown dataset kind {cfg.dataset!r}")

    out = []
    for fid, data, missing in _pmap(load, ids, cfg.threads):
        if missing:
            errors.append(f"frame {fid}: missing " + ", ".join(missing))
        else:
            out.append(data)
    return out


def _report_errors(errors: list[str]) -> int:
    for e in errors:
        print(e, file=sys.stderr)
    return 1 if errors else 0


# --- commands -----------------------------------------------------------------------


def cmd_pcs_stats(cfg: RunConfig) -> int:
    errors: list[str] = []
    frames = load_frames(cfg, need_cloud=True, errors=errors)
    out = Path(cfg.out)
    echo = cfg.echo("pcs-stats")
    classes = set(cfg.class_list())
    rows, scores = [], []
    for fd in frames:
        for k, g in enumerate(fd.gts):
            if g.class_name in classes:
                rows.append((fd.frame_id, k, g.class_name, g.q, g.num_points))
                scores.append(g.q)
    write_table(out / "pcs_objects.tsv", ["frame_id", "object_id", "class", "pc_score", "num_points"], rows, echo)
    hist = pc_score_histogram(scores, cfg.bin_width)
    write_table(out / "pcs_histogram.tsv", ["bin_lo", "bin_hi", "fraction"], hist, echo)
    groups = sparsity_counts(scores)
    total = max(len(scores), 1)
    write_table(
        out / "sparsity_groups.tsv",
        ["level", "count", "fraction"],
        [(lvl.value, groups[lvl], groups[lvl] / total) for lvl in SparsityLevel],
        echo,
    )
    if scores:
        below = lambda t: sum(q < t for q in scores) / len(scores)  # noqa: E731
        print(f"objects={len(scores)} frac(Q<0.05)={below(0.05):.4f} frac(Q<0.5)={below(0.5):.4f}")
    if cfg.plots:
        plotting.plot_pc_distribution(hist, out / "pcs_histogram.png")
    return _report_errors(errors)


def _load_detections(cfg: RunConfig, frames: list[FrameData]) -> dict[str, list[DetectionRecord]]:
    if not cfg.results:
        raise SystemExit("error: --results is required for eval")
    gt_ids = {f.frame_id for f in frames}
    dets: dict[str, list[DetectionRecord]] = {}
    if cfg.dataset == "kitti":
        layout = KittiLayout.find(cfg.dataset_root)
        for fid, labels in read_result_labels(cfg.results).items():
            if fid not in gt_ids:
                dets[fid] = []
                continue
            calib = parse_calib_file(layout.calib(fid))
            dets[fid] = [
                DetectionRecord(fid, camera_box_to_lidar(lab, calib), lab.class_name, 1.0 if lab.score is None else lab.score)
                for lab in labels
            ]
    else:
        for o in read_waymo_jsonl(cfg.results):
            dets.setdefault(o.frame_id, []).append(
                DetectionRecord(o.frame_id, o.box, o.class_name, 1.0 if o.score is None else o.score)
            )
        for fid in gt_ids:
            dets.setdefault(fid, [])
    return dets


def cmd_eval(cfg: RunConfig) -> int:
    errors: list[str] = []
    frames = load_frames(cfg, need_cloud=False, errors=errors)
    dets = _load_detections(cfg, frames)
    gt_ids = {f.frame_id for f in frames}
    extra = sorted(set(dets) - gt_ids)
    missing = sorted(gt_ids - set(dets)) if cfg.dataset == "kitti" else []
    if extra or missing:
        if extra:
            print("error: result frames without ground truth: " + " ".join(extra), file=sys.stderr)
        if missing:
            print("error: ground-truth frames without results: " + " ".join(missing), file=sys.stderr)
        return 2
    records = [FrameEvalRecord(f.frame_id, dets[f.frame_id], f.gts) for f in frames]

    out = Path(cfg.out)
    echo = cfg.echo("eval")
    stratifier = "kitti" if cfg.dataset == "kitti" else "waymo"
    ap_rows, pr_rows, curves = [], [], {}
    for cls in cfg.class_list():
        thresh = cfg.iou_thresh or DEFAULT_IOU_THRESH.get(cls, 0.7)
        ec = EvalConfig(cls, cfg.iou, thresh, cfg.positions(), stratifier)
        for r in evaluate(records, ec):
            ap_rows.append((r.stratum, r.class_name, cfg.iou, thresh, r.metric, r.ap, r.num_gt))
            key = f"{cls}/{r.stratum}"
            if key not in curves:
                curves[key] = r.pr
                pr_rows.extend((cls, r.stratum, p.recall, p.precision) for p in r.pr)
    write_table(out / "ap.tsv", ["stratum", "class", "iou", "iou_thresh", "metric", "ap", "num_gt"], ap_rows, echo)
    write_table(out / "pr_curves.tsv", ["class", "stratum", "recall", "precision"], pr_rows, echo)
    for row in ap_rows:
        print("\t".join(str(v) if not isinstance(v, float) else f"{v:.4f}" for v in row))

    if cfg.pc_bins:
        base = (lambda g: g.difficulty is not None and g.difficulty <= Difficulty.MODERATE) if stratifier == "kitti" else None
        rows, binned = [], {}
        for cls in cfg.class_list():
            thresh = cfg.iou_thresh or DEFAULT_IOU_THRESH.get(cls, 0.7)
            pos = cfg.positions()[0]
            res = pc_binned_ap(records, cfg.pc_bins, EvalConfig(cls, cfg.iou, thresh, (pos,), "none"), pos, base)
            binned[cls] = res
            rows.extend((cls, lo, hi, f"AP@R{pos}", ap) for lo, hi, ap in res)
        write_table(out / "pc_binned_ap.tsv", ["class", "bin_lo", "bin_hi", "metric", "ap"], rows, echo)
        if cfg.plots:
            cls = cfg.class_list()[0]
            qs = [g.q for f in records for g in f.ground_truths if g.class_name == cls and not math.isnan(g.q)]
            plotting.plot_pc_distribution(pc_score_histogram(qs, cfg.bin_width), out / "pc_binned_ap.png", binned[cls])

    if cfg.error_thresholds:
        breakdowns, rows = [], []
        for t in cfg.error_thresholds:
            for cls in cfg.class_list():
                b = error_analysis(records, t, cls, cfg.iou)
                breakdowns.append(b)
                rc, rm, rb = b.ratios()
                rows.append((cls, t, b.correct, b.mis_localized, b.background, rc, rm, rb))
        write_table(
            out / "errors.tsv",
            ["class", "score_threshold", "correct", "mis_localized", "background", "correct_ratio", "mis_localized_ratio", "background_ratio"],
            rows,
            echo,
        )
        if cfg.plots:
            plotting.plot_error_breakdown(breakdowns, out / "errors.png")
    if cfg.plots:
        plotting.plot_pr_curves(curves, out / "pr_curves.png")
    return _report_errors(errors)


def make_refiner(cfg: RunConfig):
    if cfg.refiner == "identity":
        return IdentityRefiner()
    if cfg.refiner == "contraction":
        return ContractionRefiner(cfg.lam)
    if cfg.refiner == "jitter":
        return JitteredContractionRefiner(cfg.lam, sigma_center=cfg.sigma_center)
    if cfg.refiner == "iou-scored":
        return IoUConfidenceScorer(JitteredContractionRefiner(cfg.lam, sigma_center=cfg.sigma_center))
    raise SystemExit(f"error: unknown refiner {cfg.refiner!r}")


def cmd_cascade_sim(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    echo = cfg.echo("cascade-sim")
    refiner = make_refiner(cfg)
    gain = experiment_iou_gain(refiner, cfg.grid, cfg.stages, cfg.n, cfg.seed)
    write_table(
        out / "iou_gain.tsv",
        ["experiment", "input_iou", "stages", "mean_output_iou"],
        [("iou_gain", r.input_iou, r.stages, r.mean_output_iou) for r in gain],
        echo,
    )
    n_bins = round(1.0 / cfg.loss_bins)
    edges = [i / n_bins for i in range(n_bins + 1)]
    samples = synthetic_loss_samples(cfg.loss_samples, cfg.seed)
    dist = experiment_loss_distribution(samples, edges)
    write_table(
        out / "loss_distribution.tsv",
        ["experiment", "bin_lo", "bin_hi", "count", "loss_raw", "loss_reweighted"],
        [("loss_distribution", r.lo, r.hi, r.count, r.loss_raw, r.loss_reweighted) for r in dist],
        echo,
    )
    print(
        "loss spread max/min: raw={:.4f} reweighted={:.4f}".format(
            bin_spread([r.loss_raw for r in dist]), bin_spread([r.loss_reweighted for r in dist])
        )
    )
    if cfg.plots:
        plotting.plot_iou_gain(gain, out / "iou_gain.png")
        plotting.plot_loss_distribution(dist, out / "loss_distribution.png")
    return 0


def _cloud_paths(cfg: RunConfig) -> list[tuple[str, Path]]:
    if not cfg.dataset_root:
        raise SystemExit("error: --dataset-root is required")
    root = Path(cfg.dataset_root)
    if cfg.dataset == "kitti":
        layout = KittiLayout.find(root)
        if cfg.split:
            ids = layout.frame_ids(cfg.split)
        else:
            vdir = layout.root / "velodyne"
            ids = sorted(p.stem for p in vdir.glob("*.bin")) if vdir.is_dir() else []
        return [(fid, layout.velodyne(fid)) for fid in ids]
    pdir = root / "points"
    return [(p.stem, p) for p in sorted(pdir.glob("*.bin"))] if pdir.is_dir() else []


def cmd_voxel_stats(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    vc = cfg.voxel_config()
    dims = grid_dims(vc)
    echo = cfg.echo("voxel-stats") | {"grid_dims": list(dims)}
    errors: list[str] = []

    def one(item):
        fid, path = item
        if not path.exists():
            return fid, None
        grid = voxelize(read_velodyne_bin(path), vc)
        if cfg.dump_grids:
            (out / "grids").mkdir(parents=True, exist_ok=True)
            with open(out / "grids" / f"{fid}.txt", "w") as fh:
                dump_grid(grid, fh)
        return fid, (grid.num_points, *occupancy_stats(grid))

    rows, fracs = [], []
    nonempty_sum = total_sum = 0
    for fid, st in _pmap(one, _cloud_paths(cfg), cfg.threads):
        if st is None:
            errors.append(f"frame {fid}: missing point cloud")
            continue
        rows.append((fid, *st))
        nonempty_sum += st[1]
        total_sum += st[2]
        fracs.append(st[3])
    agg = 1.0 - nonempty_sum / total_sum if total_sum else 1.0
    rows.append(("ALL", sum(r[1] for r in rows), nonempty_sum, total_sum, agg))
    write_table(out / "voxel_stats.tsv", ["frame_id", "points_in_range", "nonempty", "total", "empty_fraction"], rows, echo)
    print(f"grid_dims={dims[0]}x{dims[1]}x{dims[2]} frames={len(fracs)} empty_fraction={agg:.6f}")
    if cfg.plots and fracs:
        plotting.plot_occupancy(fracs, out / "voxel_occupancy.png")
    return _report_errors(errors)


def cmd_convert(cfg: RunConfig) -> int:
    errors: list[str] = []
    if cfg.dataset != "kitti":
        raise SystemExit("error: convert reads camera-frame KITTI labels only")
    layout = KittiLayout.find(cfg.dataset_root or ".")
    rows = []
    for fid in layout.frame_ids(cfg.split):
        if not layout.label(fid).exists() or not layout.calib(fid).exists():
            errors.append(f"frame {fid}: missing label or calib")
            continue
        calib = parse_calib_file(layout.calib(fid))
        for k, lab in enumerate(parse_label_file(layout.label(fid))):
            if lab.class_name == "DontCare" or min(lab.dims_cam) <= 0:
                continue
            b = camera_box_to_lidar(lab, calib)
            rows.append((fid, k, lab.class_name, b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw, difficulty_of(lab).name.capitalize()))
    write_table(
        Path(cfg.out) / "lidar_boxes.tsv",
        ["frame_id", "object_id", "class", "cx", "cy", "cz", "l", "w", "h", "yaw", "difficulty"],
        rows,
        cfg.echo("convert"),
    )
    return _report_errors(errors)


COMMANDS = {
    "pcs-stats": cmd_pcs_stats,
    "eval": cmd_eval,
    "cascade-sim": cmd_cascade_sim,
    "voxel-stats": cmd_voxel_stats,
    "convert": cmd_convert,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value settings file")
    common.add_argument("--dataset-root")
    common.add_argument("--dataset", choices=["kitti", "waymo-export"])
    common.add_argument("--split", help="file listing frame ids")
    common.add_argument("--out")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int)
    common.add_argument("--classes", help="comma-separated class names")
    common.add_argument("--metric", choices=["ap11", "ap40"])
    common.add_argument("--iou", choices=["3d", "bev"])
    common.add_argument("--no-plots", dest="plots", action="store_const", const="false")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="cascade3d", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pcs-stats", parents=[common], help="point completeness distribution")
    s.add_argument("--bin-width", type=float)

    s = sub.add_parser("eval", parents=[common], help="stratified AP report")
    s.add_argument("--results", help="KITTI result dir or Waymo-export detections .jsonl")
    s.add_argument("--iou-thresh", type=float)
    s.add_argument("--pc-bins", help="completeness bin edges, e.g. 0,0.2,0.4,0.6,0.8,1")
    s.add_argument("--error-thresholds", help="score thresholds for error analysis, e.g. 0.7,0.9")
    s.add_argument("--bin-width", type=float)

    s = sub.add_parser("cascade-sim", parents=[common], help="synthetic cascade experiments")
    s.add_argument("--refiner", choices=["identity", "contraction", "jitter", "iou-scored"])
    s.add_argument("--lam", type=float)
    s.add_argument("--sigma-center", type=float)
    s.add_argument("--stages", help="stage counts, e.g. 1,3")
    s.add_argument("--grid", help="input IoU grid, e.g. 0.3,0.5,0.7")
    s.add_argument("--n", type=int, help="proposals per grid point")
    s.add_argument("--loss-samples", type=int)
    s.add_argument("--loss-bins", type=float, help="loss histogram bin width")

    s = sub.add_parser("voxel-stats", parents=[common], help="voxel occupancy report")
    s.add_argument("--voxel-preset", choices=sorted(PRESETS))
    s.add_argument("--range-min")
    s.add_argument("--range-max")
    s.add_argument("--voxel-size")
    s.add_argument("--dump-grids", action="store_const", const="true")

    sub.add_parser("convert", parents=[common], help="camera-frame labels to LiDAR-frame boxes")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = build_config(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return COMMANDS[args.command](cfg)


if __name__ == "__main__":
    sys.exit(main())
