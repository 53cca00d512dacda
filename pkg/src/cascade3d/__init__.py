"""Completeness-aware cascade 3D detection toolkit (non-neural parts)."""

from .completeness import CompletenessResult, SparsityLevel, Strategy, TaskWeights, pc_score, task_weights
from .geometry import Box3D, PointCloud, iou_3d, iou_bev, points_in_box

__all__ = [
    "Box3D",
    "CompletenessResult",
    "PointCloud",
    "SparsityLevel",
    "Strategy",
    "TaskWeights",
    "iou_3d",
    "iou_bev",
    "pc_score",
    "points_in_box",
    "task_weights",
]
