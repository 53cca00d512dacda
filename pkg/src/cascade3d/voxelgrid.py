"""Sparse voxelization of point clouds."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TextIO

import numpy as np

from .geometry import PointCloud


@dataclass(frozen=True)
class VoxelConfig:
    range_min: tuple[float, float, float]
    range_max: tuple[float, float, float]
    voxel_size: tuple[float, float, float]

    def __post_init__(self):
        span = np.subtract(self.range_max, self.range_min)
        if np.any(span <= 0):
            raise ValueError(f"non-positive range span {span.tolist()}")
        if np.any(np.asarray(self.voxel_size) <= 0):
            raise ValueError(f"non-positive voxel size {self.voxel_size}")


KITTI_VOXELS = VoxelConfig((0.0, -40.0, -3.0), (70.4, 40.0, 1.0), (0.05, 0.05, 0.1))
WAYMO_VOXELS = VoxelConfig((-75.2, -75.2, -2.0), (75.2, 75.2, 4.0), (0.1, 0.1, 0.15))
PRESETS = {"kitti": KITTI_VOXELS, "waymo": WAYMO_VOXELS}


def grid_dims(config: VoxelConfig) -> tuple[int, int, int]:
    span = np.subtract(config.range_max, config.range_min)
    # 70.4 / 0.05 and friends are not exact in binary floating point
    ratio = np.round(span / np.asarray(config.voxel_size), 6)
    dims = np.floor(ratio).astype(np.int64)
    if np.any(dims < 1):
        raise ValueError(f"range span smaller than one voxel: {span.tolist()}")
    return tuple(int(d) for d in dims)


@dataclass(frozen=True)
class SparseVoxelGrid:
    """Occupied cells only, stored CSR-style in x-major linear order.

    Cell ``k`` sits at ``coords[k]`` and holds point indices
    ``point_indices[offsets[k]:offsets[k + 1]]`` (ascending).
    """

    config: VoxelConfig
    dims: tuple[int, int, int]
    coords: np.ndarray
    offsets: np.ndarray
    point_indices: np.ndarray

    @property
    def num_cells(self) -> int:
        return len(self.coords)

    @property
    def num_points(self) -> int:
        return len(self.point_indices)

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def members(self, k: int) -> np.ndarray:
        return self.point_indices[self.offsets[k] : self.offsets[k + 1]]

    @property
    def cells(self) -> dict[tuple[int, int, int], np.ndarray]:
        return {tuple(int(v) for v in c): self.members(k) for k, c in enumerate(self.coords)}

    def cell_center(self, ix: int, iy: int, iz: int) -> np.ndarray:
        size = np.asarray(self.config.voxel_size)
        return np.asarray(self.config.range_min) + (np.array([ix, iy, iz]) + 0.5) * size


def voxel_coords(xyz: np.ndarray, config: VoxelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Cell coordinates for in-range points and the in-range mask.

    A point is in range when it lies in ``[min, max)`` and inside a whole
    voxel; a partial slab left over when the span is not a multiple of the
    voxel size is outside the grid.
    """
    lo = np.asarray(config.range_min)
    hi = np.asarray(config.range_max)
    idx = np.floor((xyz - lo) / np.asarray(config.voxel_size))
    mask = np.all((xyz >= lo) & (xyz < hi) & (idx < np.asarray(grid_dims(config))), axis=1)
    return idx[mask].astype(np.int64), mask


def voxelize(cloud: PointCloud, config: VoxelConfig) -> SparseVoxelGrid:
    """Bucket points into cells ``floor((p - min) / size)`` over ``[min, max)``."""
    dims = grid_dims(config)
    coords, mask = voxel_coords(cloud.xyz, config)
    src = np.flatnonzero(mask)
    nx, ny, nz = dims
    lin = (coords[:, 0] * ny + coords[:, 1]) * nz + coords[:, 2]
    order = np.argsort(lin, kind="stable")
    lin_sorted = lin[order]
    uniq, starts = np.unique(lin_sorted, return_index=True)
    offsets = np.append(starts, len(lin_sorted)).astype(np.int64)
    cell_xyz = np.stack([uniq // (ny * nz), (uniq // nz) % ny, uniq % nz], axis=1)
    return SparseVoxelGrid(config, dims, cell_xyz.astype(np.int64), offsets, src[order])


def occupancy_stats(grid: SparseVoxelGrid) -> tuple[int, int, float]:
    """(non-empty cells, total cells, empty fraction)."""
    total = int(np.prod(grid.dims))
    nonempty = grid.num_cells
    return nonempty, total, 1.0 - nonempty / total


def bev_collapse(grid: SparseVoxelGrid) -> np.ndarray:
    """Dense (nx, ny) map of points per vertical column."""
    nx, ny, _ = grid.dims
    bev = np.zeros((nx, ny), dtype=np.int64)
    if grid.num_cells:
        np.add.at(bev, (grid.coords[:, 0], grid.coords[:, 1]), grid.counts())
    return bev


def dump_grid(grid: SparseVoxelGrid, fh: TextIO) -> None:
    """Write a text dump: config header, then ``ix iy iz count`` per occupied cell."""
    c = grid.config
    fh.write(f"# dims {grid.dims[0]} {grid.dims[1]} {grid.dims[2]}\n")
    fh.write("# range_min {} {} {}\n".format(*c.range_min))
    fh.write("# range_max {} {} {}\n".format(*c.range_max))
    fh.write("# voxel_size {} {} {}\n".format(*c.voxel_size))
    for (ix, iy, iz), n in zip(grid.coords, grid.counts()):
        fh.write(f"{ix} {iy} {iz} {n}\n")
