"""Greedy box extraction from vote grids with back-projection validation.

Peaks of the objectness grid are consumed in descending order.  Each peak
proposes a box (position, voted heading and scale read from the peak's
neighborhood); all scene points are back-projected into the candidate's
canonical frame, points strictly inside the unit cube consume their
containing cells, and the candidate is accepted only if enough inside
points are objectness-positive and their predicted canonical coordinates
agree with the back-projection.  Accepted poses are then re-fit from their
supporting points to undo grid quantization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError
from .geometry import (
    BoxPose,
    OrientedBox,
    PointCloud,
    rotation_y,
    symmetric_min_distances,
    world_to_canonical,
)
from .gridvote import PredictionField, VoteGrid, read_cell

# Normalized scale channels below this are treated as degenerate candidates.
_MIN_CANDIDATE_SCALE = 1e-9


@dataclass(frozen=True)
class BoxGenConfig:
    """Thresholds for greedy peak extraction and candidate validation.

    ``delta`` is a raw vote-mass threshold: it scales with point density and
    the orientation count, so it should be recalibrated when those change
    (the default suits roughly 500+ points per object at k = 120).
    """

    delta: float = 60.0           # minimum peak vote mass
    beta: float = 0.2             # minimum positive fraction among inside points
    gamma: float = 0.3            # maximum mean weighted back-projection error
    objectness_cut: float = 0.3   # per-point positivity threshold
    max_boxes: int = 256          # safety cap on emitted boxes
    backprojection_check: bool = True  # disable to accept on beta alone
    peak_refine_radius: int = 1   # candidate pose from the (2r+1)^3 peak stencil
    refine_pose: bool = True      # re-fit accepted poses from inside points

    def __post_init__(self):
        if self.delta <= 0.0:
            raise ValueError(f"delta must be > 0, got {self.delta}")
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if self.gamma <= 0.0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if not 0.0 < self.objectness_cut < 1.0:
            raise ValueError(f"objectness_cut must lie in (0, 1), got {self.objectness_cut}")
        if self.max_boxes < 1:
            raise ValueError("max_boxes must be >= 1")
        if self.peak_refine_radius < 0:
            raise ValueError("peak_refine_radius must be >= 0")


@dataclass
class BoxGenStats:
    """Bookkeeping from one generation run (for tests and diagnostics)."""

    candidates: int = 0
    accepted: int = 0
    rejected_beta: int = 0
    rejected_gamma: int = 0
    rejected_degenerate: int = 0
    residual_obj: np.ndarray | None = field(default=None, repr=False)


def candidate_pose(grid: VoteGrid, index, radius: int = 1):
    """Candidate (center, alpha, scale) read from the peak's neighborhood.

    A vote stack from a single point (canonical coordinates near the vertical
    axis make all orientations target one spot) can win the cell-level argmax
    while carrying a washed-out direction.  Aggregating the raw accumulators
    over the (2*radius+1)^3 stencil around the peak, weighted by objectness
    mass, restores the pose that the surrounding vote blob agrees on; the
    smeared stack cancels its own direction contributions by symmetry.

    Returns (center, alpha, scale, ok); ok is False for degenerate scale or
    vanishing direction.
    """
    h, d, w = (int(v) for v in index)
    dims = grid.dims
    lo = (max(h - radius, 0), max(d - radius, 0), max(w - radius, 0))
    hi = (min(h + radius + 1, dims[0]), min(d + radius + 1, dims[1]),
          min(w + radius + 1, dims[2]))
    block = grid.acc[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    mass = block[..., 0]
    total = mass.sum()
    if total <= 0.0:
        return None, 0.0, None, False
    # Channels were normalized per cell; scaling by cell mass recovers the
    # raw sums, making the stencil aggregate exactly the vote-weighted mean.
    raw = block[..., 1:] * mass[..., None]
    direction = raw[..., 0:2].sum(axis=(0, 1, 2)) / total
    scale = raw[..., 2:5].sum(axis=(0, 1, 2)) / total
    idx = np.moveaxis(np.mgrid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]], 0, -1)
    centroid = (grid.cell_center(idx) * mass[..., None]).sum(axis=(0, 1, 2)) / total
    if np.hypot(direction[0], direction[1]) < 1e-9:
        return centroid, 0.0, scale, False
    alpha = float(np.arctan2(direction[1], direction[0]))
    return centroid, alpha, scale, True


def refine_pose(
    pose: BoxPose,
    field_: PredictionField,
    positions: np.ndarray,
    indices: np.ndarray,
) -> BoxPose | None:
    """Objectness-weighted least-squares re-fit of an accepted candidate.

    Each supporting point asserts ``p = diag(s) @ R_y(alpha) @ q + t``; with
    the heading direction parametrized as (cos, sin) the model is linear,
    so the optimal heading solves a 2x2 system over mean-centered
    coordinates and the center follows as a weighted mean.  Grid candidates
    are quantized to cell resolution; this re-fit removes the quantization
    using only quantities the validation pass already touched.  Returns
    None when the fit degenerates.
    """
    o = field_.objectness[indices]
    total = o.sum()
    if total <= 0.0:
        return None
    w = o / total
    q = field_.p_tilde[indices]
    s = field_.scale[indices]
    p = positions[indices]
    q_mean = (q * w[:, None]).sum(axis=0)
    p_mean = (p * w[:, None]).sum(axis=0)
    qc = q - q_mean
    pc = p - p_mean
    # Heading: minimize sum w ||pc - diag(s) R_y(alpha) qc||^2.  The model is
    # linear in u = (cos a, sin a): per point the xz part is A @ u with
    # A = [[sx qx, -sx qz], [sz qz, sz qx]]; solve the 2x2 normal equations
    # and renormalize u onto the unit circle.
    ax0 = s[:, 0] * qc[:, 0]
    ax1 = -s[:, 0] * qc[:, 2]
    az0 = s[:, 2] * qc[:, 2]
    az1 = s[:, 2] * qc[:, 0]
    m00 = float((w * (ax0 * ax0 + az0 * az0)).sum())
    m01 = float((w * (ax0 * ax1 + az0 * az1)).sum())
    m11 = float((w * (ax1 * ax1 + az1 * az1)).sum())
    b0 = float((w * (ax0 * pc[:, 0] + az0 * pc[:, 2])).sum())
    b1 = float((w * (ax1 * pc[:, 0] + az1 * pc[:, 2])).sum())
    det = m00 * m11 - m01 * m01
    if abs(det) < 1e-12:
        alpha = pose.alpha  # no in-plane spread; keep the voted heading
    else:
        u0 = (m11 * b0 - m01 * b1) / det
        u1 = (m00 * b1 - m01 * b0) / det
        norm = np.hypot(u0, u1)
        if norm < 1e-12:
            alpha = pose.alpha
        else:
            alpha = float(np.arctan2(u1, u0))
    rotated = q @ rotation_y(alpha).T
    center = ((p - s * rotated) * w[:, None]).sum(axis=0)
    scale = (s * w[:, None]).sum(axis=0)
    if np.any(scale <= _MIN_CANDIDATE_SCALE) or not np.all(np.isfinite(center)):
        return None
    return BoxPose(scale=scale, alpha=alpha, center=center)


def assign_class(field_: PredictionField, indices: np.ndarray) -> int:
    """Majority class over the given points (argmax scores per point); ties
    break toward the smaller class id."""
    indices = np.asarray(indices)
    if indices.size == 0:
        raise ValueError("assign_class requires at least one point")
    votes = np.argmax(field_.class_scores[indices], axis=1)
    counts = np.bincount(votes, minlength=field_.num_classes)
    return int(np.argmax(counts))


def generate_boxes_detailed(
    grid: VoteGrid,
    cloud: PointCloud,
    field_: PredictionField,
    cfg: BoxGenConfig,
    class_symmetry: list[int] | None = None,
) -> tuple[list[OrientedBox], BoxGenStats]:
    """Run greedy extraction and also return run statistics.

    The grid itself is left untouched: peak consumption operates on a
    private copy of the objectness channel, honoring the immutability of a
    filled grid.  ``class_symmetry`` maps class id to rotational symmetry
    order; symmetric classes evaluate the back-projection error as the
    minimum over their symmetry transforms.
    """
    if not grid.normalized:
        raise ValueError("generate_boxes requires a normalized grid")
    if field_.n != cloud.n:
        raise ValueError("field length does not match cloud length")

    g = grid.g_obj.copy()
    dims = grid.dims
    stride_d = dims[2]
    stride_h = dims[1] * dims[2]

    # Cells only ever transition to zero, so enumerating the initial values
    # in descending order visits exactly the argmax sequence of the greedy
    # loop; consumed cells are skipped when their value has dropped below
    # delta.  Flat-index order breaks value ties deterministically.
    flat = g.ravel()
    candidates = np.flatnonzero(flat >= cfg.delta)
    candidates = candidates[np.argsort(-flat[candidates], kind="stable")]

    positions = cloud.positions
    objectness = field_.objectness
    positive = objectness > cfg.objectness_cut

    # Flat cell index per point for vote consumption; -1 marks points whose
    # containing cell lies outside the grid.
    cell_idx = grid.containing_cell(positions)
    in_grid = np.all((cell_idx >= 0) & (cell_idx < np.array(dims)), axis=1)
    point_flat = np.where(
        in_grid,
        cell_idx[:, 0] * stride_h + cell_idx[:, 1] * stride_d + cell_idx[:, 2],
        -1,
    )

    stats = BoxGenStats()
    boxes: list[OrientedBox] = []
    for ci in candidates:
        peak_value = flat[ci]
        if peak_value < cfg.delta:
            continue  # consumed by an earlier candidate
        stats.candidates += 1
        h, rem = divmod(int(ci), stride_h)
        d, w = divmod(rem, stride_d)
        index = (h, d, w)

        # Guarantee progress: the candidate's own trilinear support is
        # consumed even when no point falls inside the proposed box.
        flat[ci] = 0.0
        g[h:h + 2, d:d + 2, w:w + 2] = 0.0

        if cfg.peak_refine_radius == 0:
            reading = read_cell(grid, index)
            center = grid.cell_center(np.array(index))
            alpha, scale = reading.alpha, reading.scale
            ok = not reading.low_confidence
        else:
            center, alpha, scale, ok = candidate_pose(
                grid, index, cfg.peak_refine_radius
            )
        if not ok or np.any(scale <= _MIN_CANDIDATE_SCALE):
            stats.rejected_degenerate += 1
            continue
        pose = BoxPose(scale=scale, alpha=alpha, center=center)

        projected = world_to_canonical(pose, positions)
        inside = np.all(np.abs(projected) < 1.0, axis=1)
        consumed = point_flat[inside]
        flat[consumed[consumed >= 0]] = 0.0

        cnt = int(inside.sum())
        pos_mask = inside & positive
        pos = int(pos_mask.sum())
        if pos == 0 or pos <= cfg.beta * cnt:
            stats.rejected_beta += 1
            continue

        indices = np.flatnonzero(pos_mask)
        class_id = assign_class(field_, indices)
        if cfg.backprojection_check:
            order = 1
            if class_symmetry is not None and class_id < len(class_symmetry):
                order = class_symmetry[class_id]
            distances = symmetric_min_distances(
                field_.p_tilde[indices], projected[indices], order
            )
            weights = objectness[indices]
            err = float((weights * distances).sum())
            o_sum = float(weights.sum())
            if not err < cfg.gamma * o_sum:
                stats.rejected_gamma += 1
                continue

        if cfg.refine_pose:
            refined = refine_pose(pose, field_, positions, indices)
            if refined is not None:
                pose = refined
        boxes.append(OrientedBox(pose=pose, class_id=class_id, score=float(peak_value)))
        stats.accepted += 1
        if len(boxes) >= cfg.max_boxes:
            break

    stats.residual_obj = g
    return boxes, stats


def generate_boxes(
    grid: VoteGrid,
    cloud: PointCloud,
    field_: PredictionField,
    cfg: BoxGenConfig,
    class_symmetry: list[int] | None = None,
) -> list[OrientedBox]:
    """Greedy peak extraction with back-projection checking; see the module
    docstring.  Returns accepted boxes scored by their peak vote mass."""
    boxes, _ = generate_boxes_detailed(grid, cloud, field_, cfg, class_symmetry)
    return boxes


# ---------------------------------------------------------------------------
# Detection serialization: one JSON array per scene.

def detections_to_list(boxes: list[OrientedBox]) -> list[dict]:
    return [
        {
            "center": [float(v) for v in b.pose.center],
            "scale": [float(v) for v in b.pose.scale],
            "alpha": float(b.pose.alpha),
            "class_id": b.class_id,
            "score": b.score,
        }
        for b in boxes
    ]


def save_detections(path, boxes: list[OrientedBox]) -> None:
    Path(path).write_text(json.dumps(detections_to_list(boxes), indent=2) + "\n")


def load_detections(path) -> list[OrientedBox]:
    try:
        data = json.loads(Path(path).read_text())
        return [
            OrientedBox(
                pose=BoxPose(
                    scale=np.asarray(d["scale"], dtype=np.float64),
                    alpha=float(d["alpha"]),
                    center=np.asarray(d["center"], dtype=np.float64),
                ),
                class_id=int(d["class_id"]),
                score=float(d["score"]),
            )
            for d in data
        ]
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: malformed detection record: {exc}") from None
