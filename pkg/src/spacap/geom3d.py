"""Axis-aligned 3D box geometry and relative spatial relations.

Boxes are parameterised by center and size (meters). A relation triplet
``(lx, ly, lz)`` with entries in ``{-1, 0, +1}`` tells on which half axis
object ``i`` sits relative to object ``j``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

AXES = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True)
class Aabb:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    class_id: int = 0
    color_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))
        if len(self.center) != 3 or len(self.size) != 3:
            raise ValueError("center and size must be 3-vectors")
        if not all(s > 0 for s in self.size):
            raise ValueError(f"box size must be strictly positive, got {self.size}")

    @property
    def min_corner(self) -> np.ndarray:
        return np.asarray(self.center) - np.asarray(self.size) / 2

    @property
    def max_corner(self) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.size) / 2

    def extent(self, axis: int) -> tuple[float, float, float]:
        """(min, max, side length) along one axis."""
        half = self.size[axis] / 2
        return self.center[axis] - half, self.center[axis] + half, self.size[axis]

    def volume(self) -> float:
        return self.size[0] * self.size[1] * self.size[2]

    def to_json(self) -> dict:
        return {"center": list(self.center), "size": list(self.size),
                "class": self.class_id, "color": self.color_id}

    @classmethod
    def from_json(cls, d: dict) -> "Aabb":
        return cls(tuple(d["center"]), tuple(d["size"]), int(d.get("class", 0)),
                   int(d.get("color", 0)))

    @classmethod
    def from_corners(cls, lo, hi, class_id=0, color_id=0) -> "Aabb":
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        return cls(tuple((lo + hi) / 2), tuple(hi - lo), class_id, color_id)


@dataclass(frozen=True)
class RelationParams:
    alpha: float = 0.3
    beta: float = 0.7
    eps_ratio: float = 0.1

    def __post_init__(self):
        if not (0 < self.alpha < self.beta < 1):
            raise ValueError("need 0 < alpha < beta < 1")
        if not (0 < self.eps_ratio < 1):
            raise ValueError("eps_ratio must lie in (0, 1)")


DEFAULT_PARAMS = RelationParams()


@dataclass
class RelationMap:
    """M x M x 3 relation labels; ``labels[i, j]`` is the triplet of i w.r.t. j."""

    labels: np.ndarray

    @property
    def m(self) -> int:
        return self.labels.shape[0]

    def is_antisymmetric(self) -> bool:
        return bool(np.array_equal(self.labels, -self.labels.transpose(1, 0, 2)))

    def to_json(self) -> dict:
        return {"m": self.m, "labels": self.labels.astype(int).tolist()}


def iou_aabb(a: Aabb, b: Aabb) -> float:
    lo = np.maximum(a.min_corner, b.min_corner)
    hi = np.minimum(a.max_corner, b.max_corner)
    inter = float(np.prod(np.clip(hi - lo, 0.0, None)))
    if inter <= 0.0:
        return 0.0
    return inter / (a.volume() + b.volume() - inter)


def pairwise_iou(boxes_a: Sequence[Aabb], boxes_b: Sequence[Aabb]) -> np.ndarray:
    """Vectorised IoU matrix of shape (len(a), len(b))."""
    if not boxes_a or not boxes_b:
        return np.zeros((len(boxes_a), len(boxes_b)))
    lo_a = np.array([b.min_corner for b in boxes_a])
    hi_a = np.array([b.max_corner for b in boxes_a])
    lo_b = np.array([b.min_corner for b in boxes_b])
    hi_b = np.array([b.max_corner for b in boxes_b])
    lo = np.maximum(lo_a[:, None], lo_b[None])
    hi = np.minimum(hi_a[:, None], hi_b[None])
    inter = np.prod(np.clip(hi - lo, 0.0, None), axis=-1)
    vol_a = np.prod(hi_a - lo_a, axis=-1)
    vol_b = np.prod(hi_b - lo_b, axis=-1)
    union = vol_a[:, None] + vol_b[None] - inter
    return np.where(inter > 0, inter / union, 0.0)


def _floor_positive(i_min, i_max, i_len, j_min, j_max, j_len, p: RelationParams) -> bool:
    # absolute
    if i_min >= j_min and i_max > j_max:
        return True
    # covered: i inside j and in j's upper area
    if i_min > j_min + p.alpha * j_len and j_min + p.beta * j_len < i_max <= j_max:
        return True
    # covering: j inside i and in i's lower area
    if i_min < j_min < i_min + p.alpha * i_len and j_max < i_min + p.beta * i_len:
        return True
    return False


def axis_relation_floor(i: Aabb, j: Aabb, axis: str | int, p: RelationParams = DEFAULT_PARAMS) -> int:
    """Relation of ``i`` to ``j`` along a floor axis (x or y)."""
    k = AXES[axis] if isinstance(axis, str) else axis
    if k not in (0, 1):
        raise ValueError("floor relations are defined for the x and y axes only")
    i_min, i_max, i_len = i.extent(k)
    j_min, j_max, j_len = j.extent(k)
    eps = p.eps_ratio * j_len
    if abs(i_max - j_max) <= eps and abs(i_min - j_min) <= eps:
        return 0
    if _floor_positive(i_min, i_max, i_len, j_min, j_max, j_len, p):
        return 1
    if _floor_positive(j_min, j_max, j_len, i_min, i_max, i_len, p):
        return -1
    return 0


def axis_relation_height(i: Aabb, j: Aabb, p: RelationParams = DEFAULT_PARAMS) -> int:
    i_min, _, i_len = i.extent(2)
    j_min, _, j_len = j.extent(2)
    if i_min >= j_min + p.alpha * j_len:
        return 1
    if j_min >= i_min + p.alpha * i_len:
        return -1
    return 0


def classify_relation(i: Aabb, j: Aabb, p: RelationParams = DEFAULT_PARAMS) -> tuple[int, int, int]:
    return (axis_relation_floor(i, j, 0, p), axis_relation_floor(i, j, 1, p),
            axis_relation_height(i, j, p))


def relation_maps(boxes: Sequence[Aabb], p: RelationParams = DEFAULT_PARAMS) -> RelationMap:
    """Label every ordered pair; the (j, i) slot mirrors the (i, j) result."""
    m = len(boxes)
    if m < 1:
        raise ValueError("relation_maps needs at least one box")
    labels = np.zeros((m, m, 3), dtype=np.int64)
    for a in range(m):
        for b in range(a + 1, m):
            t = classify_relation(boxes[a], boxes[b], p)
            labels[a, b] = t
            labels[b, a] = [-v for v in t]
    return RelationMap(labels)


def assign_nearest_gt(pred_centers, gt: Sequence[Aabb]) -> np.ndarray:
    """Index of the GT box with the nearest center for every prediction."""
    if len(gt) == 0:
        raise ValueError("scene has no ground-truth boxes; cannot assign proposals")
    pc = np.asarray(pred_centers, dtype=float).reshape(-1, 3)
    gc = np.array([g.center for g in gt])
    d2 = ((pc[:, None, :] - gc[None, :, :]) ** 2).sum(-1)
    # argmin returns the first minimum, i.e. the lowest GT index on ties
    return np.argmin(d2, axis=1)


def nms(boxes: Sequence[Aabb], scores, iou_thresh: float) -> list[int]:
    scores = np.asarray(scores, dtype=float)
    if len(boxes) != len(scores):
        raise ValueError("boxes and scores must have equal length")
    # stable sort keeps index order among equal scores
    order = np.argsort(-scores, kind="stable")
    ious = pairwise_iou(boxes, boxes)
    kept: list[int] = []
    for idx in order:
        if all(ious[idx, k] <= iou_thresh for k in kept):
            kept.append(int(idx))
    return kept
