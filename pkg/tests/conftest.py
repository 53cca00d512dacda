from pathlib import Path

import numpy as np
import pytest

from cascade3d.dataset_io import CalibBundle, KittiLabel, write_calib_file, write_velodyne_bin
from cascade3d.geometry import PointCloud

# LiDAR (x fwd, y left, z up) -> camera (x right, y down, z fwd), no rectification
PERMUTATION_CALIB = CalibBundle(
    P2=np.array([[700.0, 0, 600, 0], [0, 700.0, 180, 0], [0, 0, 1.0, 0]]),
    R0_rect=np.eye(3),
    Tr_velo_to_cam=np.array([[0.0, -1, 0, 0], [0, 0, -1, 0], [1.0, 0, 0, 0]]),
)


def car_label(x, y, z, h=1.5, w=1.5, l=4.0, ry=0.0, cls="Car", height_px=50.0, occ=0, trunc=0.0, score=None):
    return KittiLabel(cls, trunc, occ, 0.0, (100.0, 100.0, 200.0, 100.0 + height_px), (h, w, l), (x, y, z), ry, score)


# With ry = 0 the box heading is LiDAR -y, so local x spans world y.
# Frame 000000: car centered at LiDAR (10, 0, -0.75), footprint x 9.25..10.75, y -2..2, z -1.5..0
# Frame 000001: car A at (20, -3, -0.75) with points over half its length -> Q = 0.5
#               car B at (15, 5, -0.75) with one interior point -> Q = 0
FIXTURE_Q = {("000000", 0): 1.0, ("000001", 0): 0.5, ("000001", 1): 0.0}


def _corners(cx, cy, cz, hx, hy, hz):
    return [(cx + sx * hx, cy + sy * hy, cz + sz * hz) for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]


def build_kitti(root: Path) -> Path:
    base = root / "training"
    for d in ("velodyne", "label_2", "calib"):
        (base / d).mkdir(parents=True, exist_ok=True)
    far = [(60.0, 30.0, -1.0), (5.0, -35.0, 0.5)]

    labels0 = [car_label(0.0, 1.5, 10.0), KittiLabel("DontCare", -1, -1, -10, (0, 0, 10, 10), (-1, -1, -1), (-1000, -1000, -1000), -10)]
    pts0 = _corners(10.0, 0.0, -0.75, 0.75, 2.0, 0.75) + far

    labels1 = [car_label(3.0, 1.5, 20.0), car_label(-5.0, 1.5, 15.0, height_px=30.0, occ=1, trunc=0.2)]
    half = [(x, y, z) for x in (19.25, 20.75) for y in (-4.0, -2.0) for z in (-1.5, 0.0)]
    pts1 = half + [(15.0, 5.0, -0.75)] + far

    for fid, labels, pts in (("000000", labels0, pts0), ("000001", labels1, pts1)):
        (base / "label_2" / f"{fid}.txt").write_text("".join(lab.to_line() + "\n" for lab in labels))
        write_calib_file(PERMUTATION_CALIB, base / "calib" / f"{fid}.txt")
        write_velodyne_bin(PointCloud(np.array(pts), np.full(len(pts), 0.5)), base / "velodyne" / f"{fid}.bin")
    return root


@pytest.fixture
def kitti_root(tmp_path):
    return build_kitti(tmp_path / "kitti")


@pytest.fixture
def calib():
    return PERMUTATION_CALIB


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
