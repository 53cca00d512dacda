"""KITTI and Waymo-export readers/writers plus camera <-> LiDAR box conversion."""

from __future__ import annotations

import enum
import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .geometry import Box3D, PointCloud, wrap_angle

log = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]


class Difficulty(enum.IntEnum):
    EASY = 0
    MODERATE = 1
    HARD = 2
    IGNORED = 3


# (min 2D height px, max occlusion, max truncation) per level, from the KITTI devkit
DIFFICULTY_RULES = {
    Difficulty.EASY: (40.0, 0, 0.15),
    Difficulty.MODERATE: (25.0, 1, 0.30),
    Difficulty.HARD: (25.0, 2, 0.50),
}


@dataclass(frozen=True)
class KittiLabel:
    class_name: str
    truncation: float
    occlusion: int
    alpha: float
    bbox2d: tuple[float, float, float, float]
    dims_cam: tuple[float, float, float]  # (h, w, l)
    loc_cam: tuple[float, float, float]  # bottom center, camera frame
    ry: float
    score: Optional[float] = None

    def to_line(self) -> str:
        vals = [self.alpha, *self.bbox2d, *self.dims_cam, *self.loc_cam, self.ry]
        fields = [self.class_name, f"{self.truncation:.6f}", str(int(self.occlusion))]
        fields += [f"{v:.6f}" for v in vals]
        if self.score is not None:
            fields.append(f"{self.score:.6f}")
        return " ".join(fields)


@dataclass(frozen=True)
class CalibBundle:
    P2: np.ndarray
    R0_rect: np.ndarray
    Tr_velo_to_cam: np.ndarray

    def velo_to_rect(self) -> np.ndarray:
        """4x4 homogeneous transform from LiDAR to rectified camera coordinates."""
        r0 = np.eye(4)
        r0[:3, :3] = self.R0_rect
        tr = np.eye(4)
        tr[:3, :4] = self.Tr_velo_to_cam
        return r0 @ tr

    def rect_to_velo(self) -> np.ndarray:
        try:
            return np.linalg.inv(self.velo_to_rect())
        except np.linalg.LinAlgError as exc:
            raise ValueError("singular camera/LiDAR transform") from exc

    def check(self, tol: float = 1e-3) -> None:
        for name, rot in (("R0_rect", self.R0_rect), ("Tr_velo_to_cam", self.Tr_velo_to_cam[:, :3])):
            if not np.allclose(rot @ rot.T, np.eye(3), atol=tol):
                raise ValueError(f"{name} rotation is not orthonormal")


@dataclass(frozen=True)
class DetectionRecord:
    frame_id: str
    box: Box3D
    class_name: str
    score: float


# --- point clouds ----------------------------------------------------------


def read_velodyne_bin(path: PathLike) -> PointCloud:
    """Read packed little-endian float32 (x, y, z, intensity) records."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        raise ValueError(f"{path}: truncated point record ({len(raw)} bytes)")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    ok = np.all(np.isfinite(pts[:, :3]), axis=1)
    if not ok.all():
        log.warning("%s: dropped %d points with non-finite coordinates", path, int((~ok).sum()))
        pts = pts[ok]
    return PointCloud(pts[:, :3], pts[:, 3])


def write_velodyne_bin(cloud: PointCloud, path: PathLike) -> None:
    arr = np.column_stack([cloud.xyz, cloud.intensity]).astype("<f4")
    Path(path).write_bytes(arr.tobytes())


# --- labels ----------------------------------------------------------------


def parse_label_line(line: str, where: str = "") -> KittiLabel:
    parts = line.split()
    if len(parts) not in (15, 16):
        raise ValueError(f"{where}: expected 15 or 16 fields, got {len(parts)}")
    try:
        v = [float(p) for p in parts[1:]]
    except ValueError as exc:
        raise ValueError(f"{where}: {exc}") from None
    return KittiLabel(
        class_name=parts[0],
        truncation=v[0],
        occlusion=int(v[1]),
        alpha=v[2],
        bbox2d=(v[3], v[4], v[5], v[6]),
        dims_cam=(v[7], v[8], v[9]),
        loc_cam=(v[10], v[11], v[12]),
        ry=v[13],
        score=v[14] if len(v) == 15 else None,
    )


def parse_label_file(path: PathLike) -> list[KittiLabel]:
    labels = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                labels.append(parse_label_line(line, f"{path}:{lineno}"))
    return labels


def parse_calib_file(path: PathLike) -> CalibBundle:
    raw = {}
    with open(path) as fh:
        for line in fh:
            if ":" not in line:
                continue
            key, value = line.split(":", 1)
            raw[key.strip()] = np.array([float(x) for x in value.split()])
    try:
        r0 = raw.get("R0_rect", raw.get("R_rect"))
        tr = raw.get("Tr_velo_to_cam", raw.get("Tr_velo_cam"))
        return CalibBundle(raw["P2"].reshape(3, 4), r0.reshape(3, 3), tr.reshape(3, 4))
    except (KeyError, AttributeError) as exc:
        raise ValueError(f"{path}: missing calibration entry") from exc


def write_calib_file(calib: CalibBundle, path: PathLike) -> None:
    rows = {
        "P0": calib.P2, "P1": calib.P2, "P2": calib.P2, "P3": calib.P2,
        "R0_rect": calib.R0_rect, "Tr_velo_to_cam": calib.Tr_velo_to_cam,
        "Tr_imu_to_velo": np.hstack([np.eye(3), np.zeros((3, 1))]),
    }
    with open(path, "w") as fh:
        for k, m in rows.items():
            fh.write(k + ": " + " ".join(f"{x:.12e}" for x in np.ravel(m)) + "\n")


# --- frame conversion ------------------------------------------------------


def camera_box_to_lidar(label: KittiLabel, calib: CalibBundle) -> Box3D:
    """Convert a camera-frame label (bottom center, h/w/l, ry) to a LiDAR Box3D."""
    h, w, l = label.dims_cam
    x, y, z = label.loc_cam
    # camera Y points down: the geometric center sits h/2 above the bottom
    center_rect = np.array([x, y - h / 2.0, z, 1.0])
    c = calib.rect_to_velo() @ center_rect
    yaw = wrap_angle(-label.ry - math.pi / 2.0)
    return Box3D(c[0], c[1], c[2], l, w, h, yaw)


def lidar_box_to_camera(
    box: Box3D,
    calib: CalibBundle,
    class_name: str = "Car",
    score: Optional[float] = None,
    truncation: float = -1.0,
    occlusion: int = -1,
) -> KittiLabel:
    """Inverse of :func:`camera_box_to_lidar`; 2D box from projecting the corners with P2."""
    c = calib.velo_to_rect() @ np.array([box.cx, box.cy, box.cz, 1.0])
    bottom = (c[0], c[1] + box.h / 2.0, c[2])
    ry = wrap_angle(-box.yaw - math.pi / 2.0)
    alpha = wrap_angle(ry - math.atan2(c[0], c[2]))
    return KittiLabel(
        class_name=class_name,
        truncation=truncation,
        occlusion=occlusion,
        alpha=alpha,
        bbox2d=_project_bbox(box, calib),
        dims_cam=(box.h, box.w, box.l),
        loc_cam=bottom,
        ry=ry,
        score=score,
    )


def _project_bbox(box: Box3D, calib: CalibBundle) -> tuple[float, float, float, float]:
    corners = np.hstack([box.corners(), np.ones((8, 1))])
    cam = corners @ calib.velo_to_rect().T
    if np.any(cam[:, 2] <= 0.1):
        return (0.0, 0.0, 0.0, 0.0)
    img = cam @ calib.P2.T
    uv = img[:, :2] / img[:, 2:3]
    lo, hi = uv.min(axis=0), uv.max(axis=0)
    return (float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


def difficulty_of(label: KittiLabel) -> Difficulty:
    """KITTI devkit difficulty from 2D height, occlusion and truncation."""
    if label.class_name == "DontCare":
        return Difficulty.IGNORED
    height = label.bbox2d[3] - label.bbox2d[1]
    for level, (min_h, max_occ, max_trunc) in DIFFICULTY_RULES.items():
        if height >= min_h and label.occlusion <= max_occ and label.truncation <= max_trunc:
            return level
    return Difficulty.IGNORED


# --- detection result files -----------------------------------------------


def frame_filename(frame_id: str) -> str:
    return f"{int(frame_id):06d}.txt" if frame_id.isdigit() else f"{frame_id}.txt"


CalibSource = Union[CalibBundle, Mapping[str, CalibBundle]]


def _calib_for(calib: CalibSource, frame_id: str) -> CalibBundle:
    return calib if isinstance(calib, CalibBundle) else calib[frame_id]


def write_detections(
    records: Sequence[DetectionRecord],
    calib: CalibSource,
    out_dir: PathLike,
    frame_ids: Iterable[str] = (),
) -> list[Path]:
    """Write one devkit result file per frame (16 fields, score last).

    Every id in ``frame_ids`` gets a file even when it has no detections.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_frame: dict[str, list[DetectionRecord]] = {f: [] for f in frame_ids}
    for r in records:
        by_frame.setdefault(r.frame_id, []).append(r)
    written = []
    for fid, recs in by_frame.items():
        path = out / frame_filename(fid)
        lines = [lidar_box_to_camera(r.box, _calib_for(calib, fid), r.class_name, r.score).to_line() for r in recs]
        try:
            path.write_text("".join(line + "\n" for line in lines))
        except OSError as exc:
            raise OSError(f"{path}: {exc}") from exc
        written.append(path)
    return written


def read_result_labels(result_dir: PathLike) -> dict[str, list[KittiLabel]]:
    """Raw camera-frame labels keyed by frame id (file stem)."""
    d = Path(result_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"{d}: not a directory")
    return {p.stem: parse_label_file(p) for p in sorted(d.glob("*.txt"))}


def read_detections(result_dir: PathLike, calib: CalibSource) -> list[DetectionRecord]:
    """Read a devkit result directory back into LiDAR-frame detection records."""
    out = []
    for fid, labels in read_result_labels(result_dir).items():
        cb = _calib_for(calib, fid)
        for lab in labels:
            score = 1.0 if lab.score is None else lab.score
            out.append(DetectionRecord(fid, camera_box_to_lidar(lab, cb), lab.class_name, score))
    return out


# --- Waymo pre-exported frames --------------------------------------------


@dataclass(frozen=True)
class WaymoObject:
    frame_id: str
    class_name: str
    box: Box3D
    num_points: int = 0
    score: Optional[float] = None


def read_waymo_jsonl(path: PathLike) -> list[WaymoObject]:
    """Parse ``{frame, class, cx, cy, cz, l, w, h, yaw, num_points[, score]}`` lines."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                box = Box3D(*(float(d[k]) for k in ("cx", "cy", "cz", "l", "w", "h", "yaw")))
                out.append(
                    WaymoObject(
                        str(d["frame"]), d["class"], box, int(d.get("num_points", 0)),
                        None if d.get("score") is None else float(d["score"]),
                    )
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out


def write_waymo_jsonl(objects: Iterable[WaymoObject], path: PathLike) -> None:
    with open(path, "w") as fh:
        for o in objects:
            b = o.box
            d = {"frame": o.frame_id, "class": o.class_name, "cx": b.cx, "cy": b.cy, "cz": b.cz,
                 "l": b.l, "w": b.w, "h": b.h, "yaw": b.yaw, "num_points": o.num_points}
            if o.score is not None:
                d["score"] = o.score
            fh.write(json.dumps(d) + "\n")


# --- dataset layout helpers -----------------------------------------------


@dataclass(frozen=True)
class KittiLayout:
    """Locates ``velodyne/``, ``label_2/`` and ``calib/`` under a KITTI root."""

    root: Path

    @classmethod
    def find(cls, root: PathLike) -> "KittiLayout":
        root = Path(root)
        if (root / "training" / "label_2").is_dir():
            return cls(root / "training")
        return cls(root)

    def velodyne(self, fid: str) -> Path:
        return self.root / "velodyne" / f"{fid}.bin"

    def label(self, fid: str) -> Path:
        return self.root / "label_2" / f"{fid}.txt"

    def calib(self, fid: str) -> Path:
        return self.root / "calib" / f"{fid}.txt"

    def frame_ids(self, split: Optional[PathLike] = None) -> list[str]:
        if split is not None:
            return [ln.strip() for ln in Path(split).read_text().splitlines() if ln.strip()]
        d = self.root / "label_2"
        if not d.is_dir():
            d = self.root / "velodyne"
        if not d.is_dir():
            return []
        return sorted(p.stem for p in d.iterdir() if p.suffix in (".txt", ".bin"))


@dataclass(frozen=True)
class WaymoLayout:
    """``points/<frame>.bin`` clouds and one ``labels.jsonl`` under the root."""

    root: Path

    def points(self, fid: str) -> Path:
        return self.root / "points" / f"{fid}.bin"

    @property
    def labels(self) -> Path:
        return self.root / "labels.jsonl"

    def objects_by_frame(self) -> dict[str, list[WaymoObject]]:
        out: dict[str, list[WaymoObject]] = {}
        if self.labels.exists():
            for o in read_waymo_jsonl(self.labels):
                out.setdefault(o.frame_id, []).append(o)
        pdir = self.root / "points"
        if pdir.is_dir():
            for p in pdir.glob("*.bin"):
                out.setdefault(p.stem, [])
        return dict(sorted(out.items()))
