"""Detection metrics (AP over IoU thresholds, recall vs partial index), the
direct-offset voting baseline, and the ablation runner."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .boxgen import BoxGenConfig, generate_boxes
from .geometry import OrientedBox, PointCloud, box_iou_3d, nms
from .gridvote import PredictionField, canonical_vote, grid_from_extent
from .oracle import (
    DIRECT_OFFSET_MAE,
    DirectOffsetField,
    NoiseModel,
    direct_offset_field,
    offset_sigma_for_mae,
    oracle_field,
)
from .pipeline import RunConfig, run_detection
from .scenegen import Scene, SceneRecipe, make_scene, partial_index

Detections = dict[str, list[OrientedBox]]

ABLATION_VARIANTS = (
    "full",
    "direct_voting",
    "no_backprojection",
    "no_objectness",
)


def _match_class(
    dets: list[tuple[str, int, OrientedBox]],
    gts: Detections,
    class_id: int,
    iou_threshold: float,
):
    """Greedy matching for one class: detections in descending score order
    claim the unmatched same-scene ground-truth box with highest IoU."""
    gt_boxes = {
        scene: [b for b in boxes if b.class_id == class_id]
        for scene, boxes in gts.items()
    }
    matched: dict[str, np.ndarray] = {
        scene: np.zeros(len(boxes), dtype=bool) for scene, boxes in gt_boxes.items()
    }
    order = sorted(dets, key=lambda rec: (-rec[2].score, rec[0], rec[1]))
    tp = np.zeros(len(order), dtype=bool)
    matches: dict[str, dict[int, int]] = {}
    for rank, (scene, det_idx, det) in enumerate(order):
        candidates = gt_boxes.get(scene, [])
        best_iou = 0.0
        best = -1
        for gi, gt in enumerate(candidates):
            if matched[scene][gi]:
                continue
            iou = box_iou_3d(det, gt)
            if iou >= iou_threshold and iou > best_iou:
                best_iou = iou
                best = gi
        if best >= 0:
            matched[scene][best] = True
            tp[rank] = True
            matches.setdefault(scene, {})[best] = det_idx
    n_gt = sum(len(boxes) for boxes in gt_boxes.values())
    return tp, n_gt, matched, matches


def _ap_from_flags(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP from ordered true-positive flags."""
    if n_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.arange(1, len(tp) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = 0.0
    ap = 0.0
    for r, p in zip(recall, envelope):
        ap += (r - prev) * p
        prev = r
    return float(ap)


def _class_ids(detections: Detections, ground_truth: Detections) -> list[int]:
    ids = {b.class_id for boxes in ground_truth.values() for b in boxes}
    ids |= {b.class_id for boxes in detections.values() for b in boxes}
    return sorted(ids)


def average_precision(
    detections: Detections, ground_truth: Detections, iou_threshold: float
) -> dict[int, float]:
    """Per-class AP at one IoU threshold; classes without ground truth are
    omitted (they cannot contribute to mAP)."""
    out: dict[int, float] = {}
    for class_id in _class_ids(detections, ground_truth):
        dets = [
            (scene, i, b)
            for scene, boxes in detections.items()
            for i, b in enumerate(boxes)
            if b.class_id == class_id
        ]
        tp, n_gt, _, _ = _match_class(dets, ground_truth, class_id, iou_threshold)
        if n_gt == 0:
            continue
        out[class_id] = _ap_from_flags(tp, n_gt)
    return out


def match_counts(
    detections: Detections, ground_truth: Detections, iou_threshold: float
) -> dict[int, tuple[int, int, int]]:
    """(TP, FP, FN) per class at one threshold."""
    out = {}
    for class_id in _class_ids(detections, ground_truth):
        dets = [
            (scene, i, b)
            for scene, boxes in detections.items()
            for i, b in enumerate(boxes)
            if b.class_id == class_id
        ]
        tp, n_gt, _, _ = _match_class(dets, ground_truth, class_id, iou_threshold)
        n_tp = int(tp.sum())
        out[class_id] = (n_tp, len(dets) - n_tp, n_gt - n_tp)
    return out


def mean_ap(per_class: dict[int, float]) -> float:
    if not per_class:
        return 0.0
    return float(np.mean(list(per_class.values())))


@dataclass
class BinRecall:
    lo: float
    hi: float
    n_boxes: int
    n_matched: int

    @property
    def recall(self) -> float:
        return self.n_matched / self.n_boxes


def recall_by_partial_index(
    detections: Detections,
    ground_truth: Detections,
    partial_indexes: dict[str, np.ndarray],
    iou_threshold: float,
    bin_edges: np.ndarray,
) -> list[BinRecall]:
    """Recall per partial-index bin; empty bins are omitted from the output."""
    bin_edges = np.asarray(bin_edges, dtype=np.float64)
    matched_flags: dict[str, np.ndarray] = {
        scene: np.zeros(len(boxes), dtype=bool)
        for scene, boxes in ground_truth.items()
    }
    for class_id in _class_ids(detections, ground_truth):
        dets = [
            (scene, i, b)
            for scene, boxes in detections.items()
            for i, b in enumerate(boxes)
            if b.class_id == class_id
        ]
        _, _, matched, _ = _match_class(dets, ground_truth, class_id, iou_threshold)
        for scene, flags in matched.items():
            class_positions = [
                gi for gi, b in enumerate(ground_truth[scene]) if b.class_id == class_id
            ]
            for local, gi in enumerate(class_positions):
                if flags[local]:
                    matched_flags[scene][gi] = True

    n_bins = len(bin_edges) - 1
    counts = np.zeros(n_bins, dtype=np.int64)
    hits = np.zeros(n_bins, dtype=np.int64)
    for scene, boxes in ground_truth.items():
        pis = np.asarray(partial_indexes[scene], dtype=np.float64)
        if pis.shape != (len(boxes),):
            raise ValueError(f"scene '{scene}': one partial index per box required")
        bins = np.clip(np.searchsorted(bin_edges, pis, side="right") - 1, 0, n_bins - 1)
        for gi, b in enumerate(bins):
            counts[b] += 1
            hits[b] += bool(matched_flags[scene][gi])
    return [
        BinRecall(float(bin_edges[b]), float(bin_edges[b + 1]), int(counts[b]), int(hits[b]))
        for b in range(n_bins)
        if counts[b] > 0
    ]


def decile_bin_edges(values: np.ndarray, n_bins: int = 10) -> np.ndarray:
    """Quantile bin edges over the observed partial-index distribution."""
    values = np.asarray(values, dtype=np.float64)
    edges = np.quantile(values, np.linspace(0.0, 1.0, n_bins + 1))
    edges[0] = min(edges[0], 0.0)
    edges[-1] = edges[-1] + 1e-9
    return np.unique(edges)


@dataclass
class EvalReport:
    """Detection quality summary across scenes."""

    ap: dict[float, dict[int, float]]
    map_by_threshold: dict[float, float]
    counts: dict[float, dict[int, tuple[int, int, int]]]
    recall_bins: list[BinRecall] | None
    config: dict

    @property
    def map_25(self) -> float:
        return self.map_by_threshold.get(0.25, float("nan"))

    @property
    def map_50(self) -> float:
        return self.map_by_threshold.get(0.5, float("nan"))

    def to_dict(self) -> dict:
        out = {
            "ap": {
                str(t): {str(c): v for c, v in per.items()}
                for t, per in self.ap.items()
            },
            "map": {str(t): v for t, v in self.map_by_threshold.items()},
            "counts": {
                str(t): {
                    str(c): {"tp": tp, "fp": fp, "fn": fn}
                    for c, (tp, fp, fn) in per.items()
                }
                for t, per in self.counts.items()
            },
            "config": self.config,
        }
        if self.recall_bins is not None:
            out["recall_by_partial_index"] = [
                {
                    "lo": b.lo, "hi": b.hi,
                    "n_boxes": b.n_boxes, "n_matched": b.n_matched,
                    "recall": b.recall,
                }
                for b in self.recall_bins
            ]
        return out

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def format_table(self) -> str:
        lines = []
        header = f"{'class':>8}" + "".join(f"  AP@{t:g}" for t in sorted(self.ap))
        lines.append(header)
        class_ids = sorted({c for per in self.ap.values() for c in per})
        for c in class_ids:
            row = f"{c:>8}"
            for t in sorted(self.ap):
                v = self.ap[t].get(c)
                row += f"  {v:5.3f}" if v is not None else "      -"
            lines.append(row)
        row = f"{'mAP':>8}"
        for t in sorted(self.ap):
            row += f"  {self.map_by_threshold[t]:5.3f}"
        lines.append(row)
        if self.recall_bins is not None:
            lines.append("recall by partial-index bin:")
            for b in self.recall_bins:
                lines.append(
                    f"  [{b.lo:8.2f}, {b.hi:8.2f})  n={b.n_boxes:<4d} recall={b.recall:.3f}"
                )
        return "\n".join(lines)


def evaluate(
    detections: Detections,
    ground_truth: Detections,
    iou_thresholds=(0.25, 0.5),
    partial_indexes: dict[str, np.ndarray] | None = None,
    recall_threshold: float = 0.5,
    bin_edges: np.ndarray | None = None,
) -> EvalReport:
    ap = {}
    maps = {}
    counts = {}
    for t in iou_thresholds:
        per = average_precision(detections, ground_truth, t)
        ap[t] = per
        maps[t] = mean_ap(per)
        counts[t] = match_counts(detections, ground_truth, t)
    bins = None
    config = {"iou_thresholds": [float(t) for t in iou_thresholds]}
    if partial_indexes is not None:
        if bin_edges is None:
            values = np.concatenate([np.asarray(v) for v in partial_indexes.values()])
            bin_edges = decile_bin_edges(values)
        bins = recall_by_partial_index(
            detections, ground_truth, partial_indexes, recall_threshold, bin_edges
        )
        config["recall_threshold"] = float(recall_threshold)
        config["bin_edges"] = [float(e) for e in bin_edges]
    return EvalReport(ap=ap, map_by_threshold=maps, counts=counts,
                      recall_bins=bins, config=config)


# ---------------------------------------------------------------------------
# Direct-offset voting baseline: one vote per point at p + offset, no
# orientation search, no canonical coordinates, hence no back-projection
# check is possible.  Extracted boxes are axis-aligned with voted mean scale.

def direct_vote_detect(
    cloud: PointCloud,
    offsets: DirectOffsetField,
    tau: float,
    cfg: BoxGenConfig,
    *,
    max_cells: int | None = None,
    jobs: int = 1,
) -> list[OrientedBox]:
    if offsets.n != cloud.n:
        raise ValueError("offset field length does not match cloud length")
    scale = np.where(np.abs(offsets.scale) > 1e-12, offsets.scale, 1e-12)
    # Reuse the canonical accumulator with a single zero heading: the vote
    # vector s * q equals -offset, so the lone vote lands at p + offset.
    pseudo = PredictionField(
        p_tilde=-offsets.offsets / scale,
        scale=offsets.scale,
        objectness=offsets.objectness,
        class_scores=offsets.class_scores,
    )
    reach = np.full(3, max(np.abs(offsets.offsets).max(initial=0.0), tau))
    kwargs = {} if max_cells is None else {"max_cells": max_cells}
    grid = grid_from_extent(cloud, tau, reach, **kwargs)
    canonical_vote(cloud, pseudo, grid, k=1, jobs=jobs)
    # No canonical predictions: neither the back-projection check nor the
    # pose re-fit applies; boxes stay axis-aligned at their grid peak.
    baseline_cfg = replace(cfg, backprojection_check=False, refine_pose=False)
    return generate_boxes(grid, cloud, pseudo, baseline_cfg)


# ---------------------------------------------------------------------------
# Ablation runner.

@dataclass
class AblationResult:
    """mAP at IoU 0.5 for each pipeline variant over a seeded suite."""

    map50: dict[str, list[float]]  # variant -> per-seed values
    seeds: list[int]
    scenes_per_seed: int

    def mean(self, variant: str) -> float:
        return float(np.mean(self.map50[variant]))

    def std(self, variant: str) -> float:
        return float(np.std(self.map50[variant], ddof=1)) if len(self.seeds) > 1 else 0.0

    def to_rows(self) -> list[dict]:
        return [
            {
                "variant": variant,
                "map50_mean": self.mean(variant),
                "map50_std": self.std(variant),
                "n_seeds": len(self.seeds),
            }
            for variant in ABLATION_VARIANTS
        ]

    def to_csv(self, path) -> None:
        rows = self.to_rows()
        with Path(path).open("w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)

    def format_table(self) -> str:
        lines = [f"{'variant':<20} {'mAP50':>8} {'std':>8}"]
        for row in self.to_rows():
            lines.append(
                f"{row['variant']:<20} {row['map50_mean']:8.3f} {row['map50_std']:8.3f}"
            )
        return "\n".join(lines)


def _detect_scene_set(scenes, clouds, fields, cfg, symmetry, backprojection=True):
    dets = {}
    for sid in scenes:
        result = run_detection(
            clouds[sid], fields[sid], cfg,
            class_symmetry=symmetry, backprojection_check=backprojection,
        )
        dets[sid] = result.boxes
    return dets


def run_ablations(
    recipe: SceneRecipe,
    noise: NoiseModel,
    cfg: RunConfig,
    seeds,
    scenes_per_seed: int = 4,
    offset_mae: float = DIRECT_OFFSET_MAE,
) -> AblationResult:
    """Run the four pipeline variants over a seeded scene suite.

    Variants: the full pipeline; direct-offset voting with the offset noise
    calibrated to the given mean absolute error; the full pipeline with the
    back-projection check disabled; and voting with all objectness forced
    to 1.
    """
    seeds = [int(s) for s in seeds]
    results: dict[str, list[float]] = {v: [] for v in ABLATION_VARIANTS}
    direct_noise_sigma = offset_sigma_for_mae(offset_mae)
    for seed in seeds:
        scenes: dict[str, Scene] = {}
        clouds = {}
        fields = {}
        forced = {}
        direct = {}
        symmetry = None
        for i in range(scenes_per_seed):
            sid = f"seed{seed}_scene{i}"
            scene_seed = seed * 10_000 + i
            scene, cloud = make_scene(recipe, scene_seed)
            scenes[sid] = scene
            clouds[sid] = cloud
            symmetry = scene.symmetry_orders
            fields[sid] = oracle_field(
                scene, cloud, replace(noise, seed=scene_seed + 1)
            )
            forced[sid] = PredictionField(
                p_tilde=fields[sid].p_tilde,
                scale=fields[sid].scale,
                objectness=np.ones(cloud.n),
                class_scores=fields[sid].class_scores,
            )
            direct[sid] = direct_offset_field(
                scene, cloud,
                replace(noise, offset_sigma=direct_noise_sigma, seed=scene_seed + 2),
            )
        gts = {sid: scene.boxes for sid, scene in scenes.items()}

        variant_dets = {
            "full": _detect_scene_set(scenes, clouds, fields, cfg, symmetry),
            "no_backprojection": _detect_scene_set(
                scenes, clouds, fields, cfg, symmetry, backprojection=False
            ),
            "no_objectness": _detect_scene_set(scenes, clouds, forced, cfg, symmetry),
            "direct_voting": {
                sid: nms(
                    direct_vote_detect(
                        clouds[sid], direct[sid], cfg.tau, cfg.boxgen_config(),
                        max_cells=cfg.max_grid_cells, jobs=cfg.jobs,
                    ),
                    cfg.nms_iou,
                )
                for sid in scenes
            },
        }
        for variant in ABLATION_VARIANTS:
            per_class = average_precision(variant_dets[variant], gts, 0.5)
            results[variant].append(mean_ap(per_class))
    return AblationResult(map50=results, seeds=seeds, scenes_per_seed=scenes_per_seed)


def scene_partial_indexes(scene: Scene, cloud: PointCloud) -> np.ndarray:
    """Partial index of every ground-truth box against the scene cloud."""
    return np.array([partial_index(box, cloud) for box in scene.boxes])
