"""Oriented-box and point geometry.

Boxes rotate about the world Z axis only, so every 3D overlap reduces to a
2D convex-polygon intersection in the XY plane times a 1D overlap along Z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence, Union

import numpy as np

CLIP_EPS = 1e-9
AREA_EPS = 1e-12
CONTAIN_EPS = 1e-9


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]."""
    a = math.fmod(a, 2.0 * math.pi)
    if a <= -math.pi:
        a += 2.0 * math.pi
    elif a > math.pi:
        a -= 2.0 * math.pi
    return a


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box: geometric center, extents along local X/Y/Z, yaw about Z."""

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float = 0.0

    def __post_init__(self):
        if min(self.l, self.w, self.h) < 0:
            raise ValueError(f"negative box extent: {(self.l, self.w, self.h)}")

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])

    @property
    def extents(self) -> np.ndarray:
        return np.array([self.l, self.w, self.h])

    @property
    def is_degenerate(self) -> bool:
        return min(self.l, self.w, self.h) == 0.0

    def volume(self) -> float:
        return self.l * self.w * self.h

    def bev_area(self) -> float:
        return self.l * self.w

    def canonical(self) -> "Box3D":
        return replace(self, yaw=wrap_angle(self.yaw))

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw])

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "Box3D":
        return cls(*(float(v) for v in a[:7]))

    def bev_corners(self) -> list[tuple[float, float]]:
        """Footprint corners, counter-clockwise."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.l / 2.0, self.w / 2.0
        out = []
        for dx, dy in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)):
            out.append((self.cx + c * dx - s * dy, self.cy + s * dx + c * dy))
        return out

    def corners(self) -> np.ndarray:
        """The 8 corners as an (8, 3) array."""
        signs = np.array([[sx, sy, sz] for sx in (1, -1) for sy in (1, -1) for sz in (1, -1)], float)
        local = signs * self.extents / 2.0
        return local @ _rot_z(self.yaw).T + self.center


@dataclass
class PointCloud:
    """Columnar point set in the sensor frame.

    ``xyz`` has shape (n, 3); ``intensity`` has shape (n,).
    """

    xyz: np.ndarray
    intensity: np.ndarray = field(default=None)

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        if self.intensity is None:
            self.intensity = np.zeros(len(self.xyz))
        else:
            self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        if len(self.intensity) != len(self.xyz):
            raise ValueError("intensity length does not match point count")

    def __len__(self) -> int:
        return len(self.xyz)

    @property
    def n(self) -> int:
        return len(self.xyz)

    @property
    def x(self) -> np.ndarray:
        return self.xyz[:, 0]

    @property
    def y(self) -> np.ndarray:
        return self.xyz[:, 1]

    @property
    def z(self) -> np.ndarray:
        return self.xyz[:, 2]

    def subset(self, idx) -> "PointCloud":
        return PointCloud(self.xyz[idx], self.intensity[idx])

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 3)))


def _rot_z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def to_local_frame(box: Box3D, points: PointCloud) -> PointCloud:
    """Express points in the box frame: p' = R_z(-yaw) (p - center)."""
    local = (points.xyz - box.center) @ _rot_z(-box.yaw).T
    return PointCloud(local, points.intensity.copy())


def _inside_local(local: np.ndarray, extents: np.ndarray, eps: float = CONTAIN_EPS) -> np.ndarray:
    return np.all(np.abs(local) <= extents / 2.0 + eps, axis=1)


def points_in_box(box: Box3D, points: PointCloud) -> np.ndarray:
    """Ascending indices of the points inside ``box``; faces count as inside."""
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    local = to_local_frame(box, points).xyz
    return np.flatnonzero(_inside_local(local, box.extents))


def smallest_enclosing_aligned_box(box: Box3D, points: PointCloud) -> Box3D:
    """Tightest box sharing ``box``'s orientation that encloses ``points``.

    Points are expected to lie inside ``box``; coordinates within the
    containment tolerance are clamped onto its faces so the result never
    exceeds ``box``. With no points, a zero-extent box at ``box``'s center
    is returned.
    """
    if len(points) == 0:
        return replace(box, l=0.0, w=0.0, h=0.0)
    half = box.extents / 2.0
    local = np.clip(to_local_frame(box, points).xyz, -half, half)
    lo, hi = local.min(axis=0), local.max(axis=0)
    mid_local = (lo + hi) / 2.0
    mid = _rot_z(box.yaw) @ mid_local + box.center
    ext = hi - lo
    return Box3D(mid[0], mid[1], mid[2], ext[0], ext[1], ext[2], box.yaw)


# --- BEV polygon clipping -------------------------------------------------

Polygon = list[tuple[float, float]]


def polygon_area(poly: Polygon) -> float:
    """Signed shoelace area; positive for counter-clockwise vertex order."""
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        acc += x1 * y2 - x2 * y1
    return 0.5 * acc


def clip_convex(subject: Polygon, clip: Polygon) -> Polygon:
    """Sutherland-Hodgman clip of ``subject`` by the convex CCW polygon ``clip``."""
    output = list(subject)
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        norm = math.hypot(ex, ey)
        if norm == 0.0:
            continue
        inp = output
        output = []

        def side(p):
            # signed distance to the edge line, positive on the inner side
            return (ex * (p[1] - ay) - ey * (p[0] - ax)) / norm

        s = inp[-1]
        ds = side(s)
        for e in inp:
            de = side(e)
            if de >= -CLIP_EPS:
                if ds < -CLIP_EPS:
                    output.append(_lerp(s, e, ds, de))
                output.append(e)
            elif ds >= -CLIP_EPS:
                output.append(_lerp(s, e, ds, de))
            s, ds = e, de
    return output


def _lerp(s, e, ds, de):
    t = ds / (ds - de)
    return (s[0] + t * (e[0] - s[0]), s[1] + t * (e[1] - s[1]))


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    if a.bev_area() <= 0.0 or b.bev_area() <= 0.0:
        return 0.0
    # cheap reject on circumscribed circles
    ra = math.hypot(a.l, a.w) / 2.0
    rb = math.hypot(b.l, b.w) / 2.0
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > ra + rb:
        return 0.0
    area = polygon_area(clip_convex(a.bev_corners(), b.bev_corners()))
    if area < AREA_EPS:
        return 0.0
    return min(area, a.bev_area(), b.bev_area())


def iou_bev(a: Box3D, b: Box3D) -> float:
    """Intersection-over-union of the two rotated footprints."""
    inter = bev_intersection_area(a, b)
    union = a.bev_area() + b.bev_area() - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volumetric IoU of two Z-rotated boxes."""
    zo = min(a.cz + a.h / 2, b.cz + b.h / 2) - max(a.cz - a.h / 2, b.cz - b.h / 2)
    inter = 0.0
    if zo > 0.0:
        inter = bev_intersection_area(a, b) * zo
    union = a.volume() + b.volume() - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


# --- global augmentation transforms --------------------------------------


@dataclass(frozen=True)
class Flip:
    """Mirror across the XZ plane (y -> -y, yaw -> -yaw)."""


@dataclass(frozen=True)
class Scale:
    s: float


@dataclass(frozen=True)
class RotateZ:
    theta: float


Transform = Union[Flip, Scale, RotateZ]


def apply_global_transform(
    points: PointCloud, boxes: Sequence[Box3D], transform: Transform
) -> tuple[PointCloud, list[Box3D]]:
    """Apply one scene-level augmentation jointly to a cloud and its boxes."""
    if isinstance(transform, Flip):
        xyz = points.xyz * np.array([1.0, -1.0, 1.0])
        out = [replace(b, cy=-b.cy, yaw=-b.yaw) for b in boxes]
    elif isinstance(transform, Scale):
        s = transform.s
        if not s > 0:
            raise ValueError(f"scale factor must be positive, got {s}")
        xyz = points.xyz * s
        out = [
            Box3D(b.cx * s, b.cy * s, b.cz * s, b.l * s, b.w * s, b.h * s, b.yaw)
            for b in boxes
        ]
    elif isinstance(transform, RotateZ):
        rot = _rot_z(transform.theta)
        xyz = points.xyz @ rot.T
        out = []
        for b in boxes:
            c = rot @ b.center
            out.append(replace(b, cx=c[0], cy=c[1], cz=c[2], yaw=b.yaw + transform.theta))
    else:
        raise TypeError(f"unknown transform {transform!r}")
    return PointCloud(xyz, points.intensity.copy()), out


def random_augmentation(
    rng: np.random.Generator,
    flip_prob: float = 0.5,
    scale_range: tuple[float, float] = (0.95, 1.05),
    rot_range: tuple[float, float] = (-math.pi / 4, math.pi / 4),
) -> list[Transform]:
    """Draw the usual flip / scale / rotate chain for one training scene."""
    chain: list[Transform] = []
    if rng.random() < flip_prob:
        chain.append(Flip())
    chain.append(Scale(float(rng.uniform(*scale_range))))
    chain.append(RotateZ(float(rng.uniform(*rot_range))))
    return chain
