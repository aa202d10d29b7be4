"""Gravity-aligned oriented boxes: canonical-frame transforms, rotated IoU, NMS.

The canonical (local) frame of a box is the cube [-1, 1]^3.  A pose maps a
canonical point q to world coordinates via ``diag(scale) @ R_y(alpha) @ q +
center``, so a box spans ``2 * scale`` meters per axis.  The only rotational
degree of freedom is the heading angle about the gravity (y) axis.

All functions here are pure and safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * np.pi

# Edge-side tolerance for polygon clipping; collinear points count as inside.
_CLIP_EPS = 1e-12


def normalize_angle(alpha: float) -> float:
    """Wrap a heading angle into [0, 2*pi)."""
    a = float(alpha) % TWO_PI
    # Python's % keeps the divisor's sign, but rounding can land exactly on
    # 2*pi for tiny negative inputs; fold that back to zero.
    if a >= TWO_PI or a < 0.0:
        a = 0.0
    return a


def rotation_y(alpha: float) -> np.ndarray:
    """3x3 rotation about the y axis; note the -sin in the (0, 2) entry."""
    c = float(np.cos(alpha))
    s = float(np.sin(alpha))
    return np.array(
        [
            [c, 0.0, -s],
            [0.0, 1.0, 0.0],
            [s, 0.0, c],
        ],
        dtype=np.float64,
    )


def _as_vec3(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != (3,):
        raise ValueError(f"{name} must be a 3-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite, got {arr}")
    return arr


@dataclass(frozen=True, eq=False)
class BoxPose:
    """Scale, heading and center of a gravity-aligned box.

    ``scale`` is the multiplicative per-axis scale applied to canonical
    coordinates, i.e. the box extent is ``2 * scale`` meters per axis (half
    extents equal ``scale``).  ``alpha`` is stored normalized to [0, 2*pi).
    """

    scale: np.ndarray
    alpha: float
    center: np.ndarray

    def __post_init__(self):
        scale = _as_vec3(self.scale, "scale")
        if np.any(scale <= 0.0):
            raise ValueError(f"scale components must be > 0, got {scale}")
        center = _as_vec3(self.center, "center")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "alpha", normalize_angle(self.alpha))

    def __eq__(self, other):
        if not isinstance(other, BoxPose):
            return NotImplemented
        return (
            self.alpha == other.alpha
            and np.array_equal(self.scale, other.scale)
            and np.array_equal(self.center, other.center)
        )

    @property
    def volume(self) -> float:
        """World-space box volume, (2 sx)(2 sy)(2 sz)."""
        return float(8.0 * np.prod(self.scale))


@dataclass(frozen=True)
class OrientedBox:
    """A detected or ground-truth box: pose plus class label and confidence."""

    pose: BoxPose
    class_id: int = 0
    score: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.score) or self.score < 0.0:
            raise ValueError(f"score must be finite and >= 0, got {self.score}")
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "score", float(self.score))


@dataclass
class PointCloud:
    """Scene points in world coordinates (meters), with optional RGB colors."""

    positions: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise ValueError(f"positions must have shape (N, 3), got {pos.shape}")
        self.positions = pos
        if self.colors is not None:
            col = np.asarray(self.colors, dtype=np.uint8)
            if col.shape != (pos.shape[0], 3):
                raise ValueError(
                    f"colors must have shape {(pos.shape[0], 3)}, got {col.shape}"
                )
            self.colors = col

    @property
    def n(self) -> int:
        return self.positions.shape[0]


def canonical_to_world(pose: BoxPose, canonical: np.ndarray) -> np.ndarray:
    """Map canonical coordinates to world coordinates under ``pose``.

    Accepts a single 3-vector or an (..., 3) array.
    """
    q = np.asarray(canonical, dtype=np.float64)
    rotated = q @ rotation_y(pose.alpha).T
    return rotated * pose.scale + pose.center


def world_to_canonical(pose: BoxPose, points: np.ndarray) -> np.ndarray:
    """Map world coordinates to canonical coordinates; inverse of canonical_to_world."""
    if np.any(pose.scale <= 0.0):
        raise ValueError("pose scale must be positive")
    p = np.asarray(points, dtype=np.float64)
    rel = (p - pose.center) / pose.scale
    # x @ R applies R^T to column vectors.
    return rel @ rotation_y(pose.alpha)


def points_in_box(pose: BoxPose, points: np.ndarray, strict: bool = True) -> np.ndarray:
    """Boolean mask of points inside the box (strict: open unit cube)."""
    q = world_to_canonical(pose, points)
    if strict:
        return np.all(np.abs(q) < 1.0, axis=-1)
    return np.all(np.abs(q) <= 1.0, axis=-1)


def footprint_corners(pose: BoxPose) -> np.ndarray:
    """Corners (4, 2) of the box footprint in the xz-plane, counterclockwise."""
    sx, _, sz = pose.scale
    base = np.array([[-sx, -sz], [sx, -sz], [sx, sz], [-sx, sz]], dtype=np.float64)
    c = np.cos(pose.alpha)
    s = np.sin(pose.alpha)
    rot = np.array([[c, -s], [s, c]])
    return base @ rot.T + np.array([pose.center[0], pose.center[2]])


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x = poly[:, 0]
    z = poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(z, -1)) - np.dot(z, np.roll(x, -1))))


def _clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Clip one convex polygon against another (both counterclockwise)."""
    output = [tuple(p) for p in subject]
    k = len(clip)
    for e in range(k):
        if not output:
            break
        ax, az = clip[e]
        bx, bz = clip[(e + 1) % k]
        ex, ez = bx - ax, bz - az
        inp = output
        output = []
        px, pz = inp[-1]
        p_side = ex * (pz - az) - ez * (px - ax)
        for qx, qz in inp:
            q_side = ex * (qz - az) - ez * (qx - ax)
            q_in = q_side >= -_CLIP_EPS
            p_in = p_side >= -_CLIP_EPS
            if q_in != p_in:
                # Edge crossing: interpolate along the subject segment.
                t = p_side / (p_side - q_side)
                output.append((px + t * (qx - px), pz + t * (qz - pz)))
            if q_in:
                output.append((qx, qz))
            px, pz, p_side = qx, qz, q_side
    return np.array(output, dtype=np.float64) if output else np.empty((0, 2))


def box_iou_3d(a: OrientedBox, b: OrientedBox) -> float:
    """Exact IoU of two gravity-aligned boxes.

    Intersects the rotated footprints in the xz-plane by convex polygon
    clipping and multiplies by the y-interval overlap.
    """
    pa, pb = a.pose, b.pose
    vol_a, vol_b = pa.volume, pb.volume
    if vol_a <= 0.0 or vol_b <= 0.0:
        return 0.0
    y_lo = max(pa.center[1] - pa.scale[1], pb.center[1] - pb.scale[1])
    y_hi = min(pa.center[1] + pa.scale[1], pb.center[1] + pb.scale[1])
    y_overlap = y_hi - y_lo
    if y_overlap <= 0.0:
        return 0.0
    inter_poly = _clip_convex(footprint_corners(pa), footprint_corners(pb))
    inter = _polygon_area(inter_poly) * y_overlap
    if inter <= 0.0:
        return 0.0
    union = vol_a + vol_b - inter
    return float(min(max(inter / union, 0.0), 1.0))


def nms(boxes: list[OrientedBox], iou_threshold: float) -> list[OrientedBox]:
    """Greedy per-class non-maximum suppression.

    Boxes are visited in descending score order (ties broken by lower input
    index); a box is dropped iff its IoU with an already kept box of the same
    class exceeds ``iou_threshold``.  Output preserves descending score order.
    """
    for box in boxes:
        if not np.isfinite(box.score):
            raise ValueError("all box scores must be finite")
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    kept: list[OrientedBox] = []
    for i in order:
        candidate = boxes[i]
        suppressed = any(
            k.class_id == candidate.class_id
            and box_iou_3d(candidate, k) > iou_threshold
            for k in kept
        )
        if not suppressed:
            kept.append(candidate)
    return kept


def symmetry_angles(order: int) -> np.ndarray:
    """Heading offsets under which an object of the given symmetry order maps
    onto itself (order 1 means no symmetry)."""
    if order < 1:
        raise ValueError(f"symmetry order must be >= 1, got {order}")
    return np.arange(order, dtype=np.float64) * (TWO_PI / order)


def symmetric_min_distances(
    predicted: np.ndarray, projected: np.ndarray, order: int = 1
) -> np.ndarray:
    """Per-point distance ||R_y(theta) @ predicted - projected|| minimized over
    the symmetry offsets theta of the given order."""
    predicted = np.asarray(predicted, dtype=np.float64)
    projected = np.asarray(projected, dtype=np.float64)
    if order <= 1:
        return np.linalg.norm(predicted - projected, axis=-1)
    best = None
    for theta in symmetry_angles(order):
        rotated = predicted @ rotation_y(theta).T
        d = np.linalg.norm(rotated - projected, axis=-1)
        best = d if best is None else np.minimum(best, d)
    return best


def heading_error(alpha_a: float, alpha_b: float, symmetry_order: int = 1) -> float:
    """Smallest absolute heading difference modulo the class symmetry."""
    best = np.inf
    for theta in symmetry_angles(symmetry_order):
        d = abs((alpha_a - alpha_b + theta + np.pi) % TWO_PI - np.pi)
        best = min(best, d)
    return float(best)
