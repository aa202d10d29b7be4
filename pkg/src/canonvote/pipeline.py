"""End-to-end detection pipeline and its runtime configuration."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .boxgen import BoxGenConfig, generate_boxes
from .errors import ConfigError, ParseError
from .geometry import OrientedBox, PointCloud, nms
from .gridvote import (
    DEFAULT_K,
    DEFAULT_MAX_CELLS,
    PredictionField,
    VoteGrid,
    canonical_vote,
    grid_from_extent,
)
from .oracle import NoiseModel


@dataclass(frozen=True)
class RunConfig:
    """Single source of pipeline defaults; a JSON config file plus CLI flag
    overrides populate it.  The effective values are echoed into output
    artifacts for provenance."""

    tau: float = 0.05
    k: int = DEFAULT_K
    delta: float = 60.0
    beta: float = 0.2
    gamma: float = 0.3
    objectness_cut: float = 0.3
    nms_iou: float = 0.3
    canonical_sigma: float = 0.0
    scale_sigma: float = 0.0
    objectness_flip: float = 0.0
    offset_sigma: float = 0.0
    seed: int = 0
    jobs: int = 1
    max_grid_cells: int = DEFAULT_MAX_CELLS

    def __post_init__(self):
        if self.tau <= 0.0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.delta <= 0.0:
            raise ConfigError(f"delta must be > 0, got {self.delta}")
        if not 0.0 < self.beta < 1.0:
            raise ConfigError(f"beta must lie in (0, 1), got {self.beta}")
        if self.gamma <= 0.0:
            raise ConfigError(f"gamma must be > 0, got {self.gamma}")
        if not 0.0 < self.objectness_cut < 1.0:
            raise ConfigError(
                f"objectness_cut must lie in (0, 1), got {self.objectness_cut}"
            )
        if not 0.0 <= self.nms_iou <= 1.0:
            raise ConfigError(f"nms_iou must lie in [0, 1], got {self.nms_iou}")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")
        if self.max_grid_cells < 8:
            raise ConfigError("max_grid_cells is unusably small")

    @classmethod
    def from_file(cls, path, **overrides) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        if not isinstance(data, dict):
            raise ParseError(f"{path}: config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)

    def with_overrides(self, **overrides) -> "RunConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_dict(self) -> dict:
        return asdict(self)

    def boxgen_config(self, backprojection_check: bool = True) -> BoxGenConfig:
        return BoxGenConfig(
            delta=self.delta,
            beta=self.beta,
            gamma=self.gamma,
            objectness_cut=self.objectness_cut,
            backprojection_check=backprojection_check,
        )

    def noise_model(self) -> NoiseModel:
        return NoiseModel(
            canonical_sigma=self.canonical_sigma,
            scale_sigma=self.scale_sigma,
            objectness_flip=self.objectness_flip,
            offset_sigma=self.offset_sigma,
            seed=self.seed,
        )


@dataclass
class DetectionResult:
    boxes: list[OrientedBox]
    grid: VoteGrid
    timings: dict[str, float]


def run_detection(
    cloud: PointCloud,
    field: PredictionField,
    cfg: RunConfig,
    *,
    class_symmetry: list[int] | None = None,
    backprojection_check: bool = True,
    keep_grid: bool = False,
) -> DetectionResult:
    """Grid allocation, canonical voting, box generation and NMS in sequence.

    The grid is padded using the field's own maximum absolute scale so every
    reachable vote target lands inside.
    """
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    max_scale = np.abs(field.scale).max(axis=0) if field.n else np.zeros(3)
    grid = grid_from_extent(cloud, cfg.tau, max_scale, max_cells=cfg.max_grid_cells)
    timings["grid"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    canonical_vote(cloud, field, grid, k=cfg.k, jobs=cfg.jobs)
    timings["vote"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    boxes = generate_boxes(
        grid, cloud, field,
        cfg.boxgen_config(backprojection_check=backprojection_check),
        class_symmetry=class_symmetry,
    )
    timings["generate"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    boxes = nms(boxes, cfg.nms_iou)
    timings["nms"] = time.perf_counter() - t0

    if not keep_grid:
        # Free the accumulators eagerly; batch callers run many scenes.
        grid = VoteGrid(origin=grid.origin, tau=grid.tau,
                        acc=np.empty((0, 0, 0, 6)), normalized=True)
    return DetectionResult(boxes=boxes, grid=grid, timings=timings)
