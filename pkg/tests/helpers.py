"""Independent reference implementations used as test oracles.

These deliberately avoid the code paths they check: the pose oracle composes
explicit matrices, the IoU oracle integrates by Monte Carlo, the NMS oracle
re-scans the full kept set, and the vote oracle is a plain Python loop.
"""

import numpy as np

from canonvote import BoxPose, OrientedBox, PointCloud
from canonvote.gridvote import PredictionField, VoteGrid


def pose_matrix(pose: BoxPose) -> np.ndarray:
    """4x4 canonical-to-world matrix composed from explicit factors."""
    scale = np.diag([pose.scale[0], pose.scale[1], pose.scale[2], 1.0])
    c, s = np.cos(pose.alpha), np.sin(pose.alpha)
    rot = np.array([
        [c, 0.0, -s, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [s, 0.0, c, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ])
    trans = np.eye(4)
    trans[:3, 3] = pose.center
    return trans @ scale @ rot


def apply_pose_matrix(pose: BoxPose, canonical: np.ndarray) -> np.ndarray:
    m = pose_matrix(pose)
    q = np.atleast_2d(canonical)
    homogeneous = np.concatenate([q, np.ones((len(q), 1))], axis=1)
    out = homogeneous @ m.T
    return out[:, :3].reshape(np.shape(canonical))


def _inside(box: OrientedBox, points: np.ndarray) -> np.ndarray:
    rel = points - box.pose.center
    c, s = np.cos(box.pose.alpha), np.sin(box.pose.alpha)
    # Inverse heading rotation applied to column vectors.
    x = c * rel[:, 0] + s * rel[:, 2]
    z = -s * rel[:, 0] + c * rel[:, 2]
    y = rel[:, 1]
    sx, sy, sz = box.pose.scale
    return (np.abs(x) <= sx) & (np.abs(y) <= sy) & (np.abs(z) <= sz)


def monte_carlo_iou(a: OrientedBox, b: OrientedBox, n_samples: int = 10_000_000,
                    seed: int = 0, chunk: int = 2_000_000) -> float:
    """IoU estimated by uniform sampling over the joint bounding volume."""
    corners = []
    for box in (a, b):
        signs = np.array([[i, j, k] for i in (-1, 1) for j in (-1, 1) for k in (-1, 1)],
                         dtype=np.float64)
        c, s = np.cos(box.pose.alpha), np.sin(box.pose.alpha)
        rot = np.array([[c, 0, -s], [0, 1, 0], [s, 0, c]])
        corners.append((signs * box.pose.scale) @ rot.T + box.pose.center)
    corners = np.concatenate(corners)
    lo = corners.min(axis=0)
    hi = corners.max(axis=0)
    volume = float(np.prod(hi - lo))
    rng = np.random.default_rng(seed)
    in_a = in_b = in_both = 0
    remaining = n_samples
    while remaining > 0:
        m = min(chunk, remaining)
        pts = rng.uniform(lo, hi, (m, 3))
        fa = _inside(a, pts)
        fb = _inside(b, pts)
        in_a += int(fa.sum())
        in_b += int(fb.sum())
        in_both += int((fa & fb).sum())
        remaining -= m
    union = in_a + in_b - in_both
    if union == 0:
        return 0.0
    return in_both / union


def brute_force_nms(boxes, iou_threshold, iou_fn):
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    kept = []
    for i in order:
        ok = True
        for k in kept:
            if k.class_id != boxes[i].class_id:
                continue
            if iou_fn(boxes[i], k) > iou_threshold:
                ok = False
                break
        if ok:
            kept.append(boxes[i])
    return kept


def reference_vote(cloud: PointCloud, field: PredictionField, grid: VoteGrid,
                   k: int) -> np.ndarray:
    """Scalar-loop accumulator mirroring the vote definition; returns the raw
    (unnormalized) (H, D, W, 6) array."""
    acc = np.zeros_like(grid.acc)
    dims = grid.dims
    for i in range(cloud.n):
        o = field.objectness[i]
        if o == 0.0:
            continue
        p = cloud.positions[i]
        q = field.p_tilde[i]
        s = field.scale[i]
        for j in range(k):
            r = 2.0 * np.pi * j / k
            c, sn = np.cos(r), np.sin(r)
            # Center implied by inverting p = diag(s) R_y(r) q + t.
            target = np.array([
                p[0] - s[0] * (c * q[0] - sn * q[2]),
                p[1] - s[1] * q[1],
                p[2] - s[2] * (sn * q[0] + c * q[2]),
            ])
            u = (target - grid.origin) / grid.tau
            u = u[[1, 2, 0]]  # world (y, z, x) -> grid (h, d, w)
            base = np.floor(u).astype(int)
            frac = u - base
            for axis in range(3):
                if base[axis] == dims[axis] - 1 and frac[axis] == 0.0:
                    base[axis] -= 1
                    frac[axis] = 1.0
            if np.any(base < 0) or np.any(base + 1 > np.array(dims) - 1):
                continue
            payload = np.array([o, o * c, o * sn, o * s[0], o * s[1], o * s[2]])
            for dh in (0, 1):
                for dd in (0, 1):
                    for dw in (0, 1):
                        w = (
                            (frac[0] if dh else 1 - frac[0])
                            * (frac[1] if dd else 1 - frac[1])
                            * (frac[2] if dw else 1 - frac[2])
                        )
                        acc[base[0] + dh, base[1] + dd, base[2] + dw] += w * payload
    return acc


def enumerate_ap(scored_flags, n_gt) -> float:
    """Pointwise PR-curve AP: walk detections in score order, tracking the
    precision envelope explicitly."""
    flags = [flag for _, flag in sorted(scored_flags, key=lambda t: -t[0])]
    points = []
    tp = 0
    for i, flag in enumerate(flags, start=1):
        tp += bool(flag)
        points.append((tp / n_gt, tp / i))
    ap = 0.0
    prev_recall = 0.0
    for recall, _ in points:
        best = max((p for r, p in points if r >= recall), default=0.0)
        ap += (recall - prev_recall) * best
        prev_recall = recall
    return ap
