"""Canonical voting for oriented 3D bounding-box detection on point clouds.

The pipeline regresses per-point canonical coordinates, box scales and
objectness (here supplied by a ground-truth oracle with a configurable noise
model), accumulates objectness-weighted votes for every candidate heading on
a dense grid, and extracts boxes greedily from the vote peaks with a
back-projection consistency check.
"""

from .boxgen import (
    BoxGenConfig,
    assign_class,
    generate_boxes,
    generate_boxes_detailed,
    load_detections,
    save_detections,
)
from .errors import CanonvoteError, ConfigError, ParseError, PlacementError
from .evaluation import (
    AblationResult,
    EvalReport,
    average_precision,
    direct_vote_detect,
    evaluate,
    mean_ap,
    recall_by_partial_index,
    run_ablations,
)
from .geometry import (
    BoxPose,
    OrientedBox,
    PointCloud,
    box_iou_3d,
    heading_error,
    canonical_to_world,
    nms,
    normalize_angle,
    points_in_box,
    rotation_y,
    symmetric_min_distances,
    symmetry_angles,
    world_to_canonical,
)
from .gridvote import (
    CellReading,
    PredictionField,
    VoteGrid,
    canonical_vote,
    export_grid,
    grid_from_extent,
    read_cell,
)
from .oracle import (
    DirectOffsetField,
    NoiseModel,
    direct_offset_field,
    canonical_errors,
    load_field,
    offset_sigma_for_mae,
    oracle_field,
    save_field_binary,
    save_field_jsonl,
)
from .pipeline import DetectionResult, RunConfig, run_detection
from .scenegen import (
    BACKGROUND,
    ClassRecipe,
    Scene,
    SceneClass,
    SceneRecipe,
    load_scene,
    make_scene,
    occlude,
    partial_index,
    save_scene,
)

__version__ = "0.1.0"
