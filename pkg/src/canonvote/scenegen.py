"""Synthetic scene synthesis: oriented boxes with surface-sampled points,
background clutter, and occlusion control via the partial index.

Scenes are the test substrate for the voting pipeline: every generated
object point back-projects strictly inside the canonical unit cube under its
own box pose, so a zero-noise oracle field is self-consistent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, PlacementError
from .geometry import BoxPose, OrientedBox, PointCloud, canonical_to_world, world_to_canonical
from .ply import read_point_cloud, write_point_cloud

BACKGROUND = -1


@dataclass(frozen=True)
class SceneClass:
    """Category metadata: display name and rotational symmetry order.

    Symmetry orders follow the usual conventions: 1 none, 2 for 180-degree
    symmetric shapes, 4 for square footprints, 36 approximates round objects.
    """

    name: str
    symmetry_order: int = 1


@dataclass(frozen=True)
class ClassRecipe:
    """Per-class generation parameters for make_scene."""

    name: str
    symmetry_order: int = 1
    count: tuple[int, int] = (1, 1)                 # boxes per scene, inclusive
    scale_range: tuple[tuple[float, float], ...] = (
        (0.2, 0.5), (0.2, 0.5), (0.2, 0.5),
    )                                               # per-axis scale bounds
    points: tuple[int, int] = (500, 800)            # surface samples per box
    tie_xz: bool = False                            # square footprint (symmetric shapes)
    halo_points: tuple[int, int] = (0, 0)           # background clutter hugging the box


@dataclass(frozen=True)
class SceneRecipe:
    classes: tuple[ClassRecipe, ...]
    floor_extent: tuple[float, float] = (8.0, 8.0)  # room size in x, z
    clearance: float = 0.5                          # min gap between footprints
    background_points: int = 1000                   # floor + wall clutter
    scatter_points: int = 0                         # uniform volumetric clutter
    wall_fraction: float = 0.3                      # share of background on walls
    wall_height: float = 2.0
    surface_inset: float = 0.01                     # faces sampled at 1 - inset
    plane_fraction: float = 0.7                     # occlusion: cut vs thinning
    max_placement_attempts: int = 200


@dataclass
class Scene:
    """Ground truth: boxes, per-point instance membership, class table."""

    boxes: list[OrientedBox]
    point_instance: np.ndarray  # (N,) int64; BACKGROUND marks clutter
    classes: list[SceneClass]

    def __post_init__(self):
        self.point_instance = np.asarray(self.point_instance, dtype=np.int64)

    @property
    def symmetry_orders(self) -> list[int]:
        return [c.symmetry_order for c in self.classes]

    def validate(self, cloud: PointCloud) -> None:
        """Check instance references and strict canonical containment."""
        if self.point_instance.shape != (cloud.n,):
            raise ValueError("point_instance length does not match the cloud")
        ids = self.point_instance
        if ids.size and ids.max() >= len(self.boxes):
            raise ValueError("point_instance references a nonexistent box")
        if ids.size and ids[ids != BACKGROUND].size and ids[ids != BACKGROUND].min() < 0:
            raise ValueError("negative instance id other than the background marker")
        for j, box in enumerate(self.boxes):
            pts = cloud.positions[ids == j]
            if pts.size:
                q = world_to_canonical(box.pose, pts)
                if not np.all(np.abs(q) < 1.0):
                    raise ValueError(f"points of box {j} are not strictly inside its cube")


def _sample_box_surface(rng: np.random.Generator, pose: BoxPose, n: int, inset: float) -> np.ndarray:
    """Uniform samples over the 6 box faces (area-weighted in world space)."""
    sx, sy, sz = pose.scale
    areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    hi = 1.0 - inset
    q = rng.uniform(-hi, hi, size=(n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, hi, -hi)
    q[np.arange(n), axis] = sign
    return canonical_to_world(pose, q)


def _sample_halo(rng: np.random.Generator, pose: BoxPose, n: int) -> np.ndarray:
    """Background clutter hugging a box: canonical shell 0.7 < |q|_inf < 1.5
    (objects resting on or leaning against the furniture)."""
    out = np.empty((n, 3))
    filled = 0
    while filled < n:
        q = rng.uniform(-1.5, 1.5, (2 * (n - filled) + 8, 3))
        q = q[np.abs(q).max(axis=1) > 0.7][: n - filled]
        out[filled:filled + len(q)] = canonical_to_world(pose, q)
        filled += len(q)
    return out


def _footprint_radius(scale: np.ndarray) -> float:
    return float(np.hypot(scale[0], scale[2]))


def make_scene(recipe: SceneRecipe, seed: int) -> tuple[Scene, PointCloud]:
    """Generate a scene and its point cloud deterministically from a seed.

    Boxes rest on the floor plane (y = 0) and are placed by rejection
    sampling so that footprints keep at least ``clearance`` meters apart
    (which also forces pairwise IoU 0).  Object points are sampled on box
    faces; background points cover the floor and wall strips, plus optional
    uniform volumetric scatter.
    """
    rng = np.random.default_rng(seed)
    fx, fz = recipe.floor_extent
    classes = [SceneClass(c.name, c.symmetry_order) for c in recipe.classes]

    boxes: list[OrientedBox] = []
    radii: list[float] = []
    point_counts: list[int] = []
    for class_id, cls in enumerate(recipe.classes):
        n_boxes = int(rng.integers(cls.count[0], cls.count[1] + 1))
        for _ in range(n_boxes):
            placed = False
            for _ in range(recipe.max_placement_attempts):
                scale = np.array([rng.uniform(lo, hi) for lo, hi in cls.scale_range])
                if cls.tie_xz:
                    scale[2] = scale[0]
                radius = _footprint_radius(scale)
                if fx / 2 <= radius or fz / 2 <= radius:
                    raise PlacementError(
                        f"class '{cls.name}': footprint radius {radius:.2f} m does not "
                        f"fit the floor extent {recipe.floor_extent}"
                    )
                alpha = rng.uniform(0.0, 2.0 * np.pi)
                tx = rng.uniform(-fx / 2 + radius, fx / 2 - radius)
                tz = rng.uniform(-fz / 2 + radius, fz / 2 - radius)
                center = np.array([tx, scale[1], tz])
                ok = all(
                    np.hypot(tx - b.pose.center[0], tz - b.pose.center[2])
                    >= radius + r + recipe.clearance
                    for b, r in zip(boxes, radii)
                )
                if ok:
                    pose = BoxPose(scale=scale, alpha=alpha, center=center)
                    boxes.append(OrientedBox(pose=pose, class_id=class_id, score=1.0))
                    radii.append(radius)
                    point_counts.append(int(rng.integers(cls.points[0], cls.points[1] + 1)))
                    placed = True
                    break
            if not placed:
                raise PlacementError(
                    f"could not place a '{cls.name}' box after "
                    f"{recipe.max_placement_attempts} attempts; relax clearance "
                    f"({recipe.clearance} m) or shrink scale_range"
                )

    chunks: list[np.ndarray] = []
    instance: list[np.ndarray] = []
    for j, box in enumerate(boxes):
        pts = _sample_box_surface(rng, box.pose, point_counts[j], recipe.surface_inset)
        chunks.append(pts)
        instance.append(np.full(len(pts), j, dtype=np.int64))
        halo_lo, halo_hi = recipe.classes[box.class_id].halo_points
        if halo_hi > 0:
            n_halo = int(rng.integers(halo_lo, halo_hi + 1))
            halo = _sample_halo(rng, box.pose, n_halo)
            chunks.append(halo)
            instance.append(np.full(len(halo), BACKGROUND, dtype=np.int64))

    n_wall = int(round(recipe.background_points * recipe.wall_fraction))
    n_floor = recipe.background_points - n_wall
    if n_floor > 0:
        floor = np.column_stack([
            rng.uniform(-fx / 2, fx / 2, n_floor),
            np.zeros(n_floor),
            rng.uniform(-fz / 2, fz / 2, n_floor),
        ])
        chunks.append(floor)
        instance.append(np.full(n_floor, BACKGROUND, dtype=np.int64))
    if n_wall > 0:
        side = rng.integers(0, 4, n_wall)
        along = rng.uniform(-0.5, 0.5, n_wall)
        height = rng.uniform(0.0, recipe.wall_height, n_wall)
        x = np.where(side < 2, np.where(side == 0, -fx / 2, fx / 2), along * fx)
        z = np.where(side < 2, along * fz, np.where(side == 2, -fz / 2, fz / 2))
        chunks.append(np.column_stack([x, height, z]))
        instance.append(np.full(n_wall, BACKGROUND, dtype=np.int64))
    if recipe.scatter_points > 0:
        n = recipe.scatter_points
        scatter = np.column_stack([
            rng.uniform(-fx / 2, fx / 2, n),
            rng.uniform(0.0, recipe.wall_height, n),
            rng.uniform(-fz / 2, fz / 2, n),
        ])
        chunks.append(scatter)
        instance.append(np.full(n, BACKGROUND, dtype=np.int64))

    positions = np.concatenate(chunks) if chunks else np.empty((0, 3))
    ids = np.concatenate(instance) if instance else np.empty(0, dtype=np.int64)
    scene = Scene(boxes=boxes, point_instance=ids, classes=classes)
    return scene, PointCloud(positions=positions)


def partial_index(box: OrientedBox, cloud: PointCloud) -> float:
    """Points inside the box divided by its volume (occlusion proxy)."""
    volume = box.pose.volume
    if volume <= 0.0:
        raise ValueError("partial_index requires a box with positive volume")
    q = world_to_canonical(box.pose, cloud.positions)
    inside = int(np.all(np.abs(q) < 1.0, axis=1).sum())
    return inside / volume


def occlude(
    scene: Scene,
    cloud: PointCloud,
    target_partial_index,
    seed: int,
    plane_fraction: float = 0.7,
) -> tuple[Scene, PointCloud]:
    """Subsample object points until each box reaches its target partial index.

    Removal imitates view-dependent occlusion: ``plane_fraction`` of the
    points to drop are removed contiguously on one side of a random cutting
    plane, the rest by random thinning.  Each box keeps at least one point;
    background points are untouched.  Targets above a box's current index
    are rejected.
    """
    targets = np.broadcast_to(
        np.asarray(target_partial_index, dtype=np.float64), (len(scene.boxes),)
    )
    rng = np.random.default_rng(seed)
    keep = np.ones(cloud.n, dtype=bool)
    for j, box in enumerate(scene.boxes):
        idx = np.flatnonzero(scene.point_instance == j)
        volume = box.pose.volume
        current = len(idx) / volume
        if targets[j] > current * (1.0 + 1e-9):
            raise ValueError(
                f"box {j}: target partial index {targets[j]:.3f} exceeds the "
                f"current value {current:.3f}"
            )
        n_keep = max(1, int(round(targets[j] * volume)))
        n_remove = len(idx) - n_keep
        if n_remove <= 0:
            continue
        n_plane = int(round(plane_fraction * n_remove))
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        projection = cloud.positions[idx] @ direction
        order = np.argsort(-projection, kind="stable")
        drop = set(idx[order[:n_plane]].tolist())
        remaining = idx[order[n_plane:]]
        n_thin = n_remove - n_plane
        if n_thin > 0:
            thin = rng.choice(len(remaining), size=n_thin, replace=False)
            drop.update(remaining[thin].tolist())
        keep[list(drop)] = False

    new_cloud = PointCloud(
        positions=cloud.positions[keep],
        colors=None if cloud.colors is None else cloud.colors[keep],
    )
    new_scene = Scene(
        boxes=scene.boxes,
        point_instance=scene.point_instance[keep],
        classes=scene.classes,
    )
    return new_scene, new_cloud


def recipe_from_dict(data: dict) -> tuple[SceneRecipe, int]:
    """Build a SceneRecipe from a parsed recipe file; returns (recipe, n_scenes)."""
    if not isinstance(data, dict):
        raise ParseError("recipe must be a JSON object")
    if "classes" not in data or not data["classes"]:
        raise ParseError("recipe field 'classes' is required and must be non-empty")
    classes = []
    for i, c in enumerate(data["classes"]):
        try:
            scale_range = tuple(
                (float(lo), float(hi)) for lo, hi in c["scale_range"]
            )
            if len(scale_range) != 3:
                raise ValueError("scale_range needs one (lo, hi) pair per axis")
            classes.append(
                ClassRecipe(
                    name=str(c["name"]),
                    symmetry_order=int(c.get("symmetry_order", 1)),
                    count=(int(c["count"][0]), int(c["count"][1])),
                    scale_range=scale_range,
                    points=(int(c["points"][0]), int(c["points"][1])),
                    tie_xz=bool(c.get("tie_xz", False)),
                    halo_points=tuple(c.get("halo_points", (0, 0))),
                )
            )
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise ParseError(f"recipe classes[{i}]: {exc}") from None
    known = {
        "floor_extent", "clearance", "background_points", "scatter_points",
        "wall_fraction", "wall_height", "surface_inset", "plane_fraction",
        "max_placement_attempts",
    }
    kwargs = {}
    for key, value in data.items():
        if key in ("classes", "scenes"):
            continue
        if key not in known:
            raise ParseError(f"recipe field '{key}' is not recognized")
        kwargs[key] = tuple(value) if key == "floor_extent" else value
    try:
        recipe = SceneRecipe(classes=tuple(classes), **kwargs)
    except TypeError as exc:
        raise ParseError(f"recipe: {exc}") from None
    return recipe, int(data.get("scenes", 1))


def load_recipe(path) -> tuple[SceneRecipe, int]:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    try:
        return recipe_from_dict(data)
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# Serialization: scene ground truth as JSON, point cloud as PLY with an
# "instance" property.

def scene_to_dict(scene: Scene, seed: int | None = None) -> dict:
    out = {
        "classes": [
            {"id": i, "name": c.name, "symmetry_order": c.symmetry_order}
            for i, c in enumerate(scene.classes)
        ],
        "boxes": [
            {
                "center": [float(v) for v in b.pose.center],
                "scale": [float(v) for v in b.pose.scale],
                "alpha": float(b.pose.alpha),
                "class_id": b.class_id,
            }
            for b in scene.boxes
        ],
    }
    if seed is not None:
        out["seed"] = int(seed)
    return out


def scene_from_dict(data: dict) -> tuple[list[OrientedBox], list[SceneClass]]:
    try:
        classes = [
            SceneClass(c["name"], int(c.get("symmetry_order", 1)))
            for c in sorted(data["classes"], key=lambda c: c["id"])
        ]
        boxes = [
            OrientedBox(
                pose=BoxPose(
                    scale=np.asarray(b["scale"], dtype=np.float64),
                    alpha=float(b["alpha"]),
                    center=np.asarray(b["center"], dtype=np.float64),
                ),
                class_id=int(b["class_id"]),
                score=1.0,
            )
            for b in data["boxes"]
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed scene record: {exc}") from None
    return boxes, classes


def save_scene(json_path, ply_path, scene: Scene, cloud: PointCloud,
               seed: int | None = None, *, binary: bool = True) -> None:
    Path(json_path).write_text(
        json.dumps(scene_to_dict(scene, seed), indent=2, sort_keys=True) + "\n"
    )
    props = {"instance": scene.point_instance.astype(np.int32)}
    if cloud.colors is not None:
        props = {
            "red": cloud.colors[:, 0],
            "green": cloud.colors[:, 1],
            "blue": cloud.colors[:, 2],
            **props,
        }
    write_point_cloud(ply_path, cloud.positions, props, binary=binary)


def load_scene(json_path, ply_path) -> tuple[Scene, PointCloud]:
    try:
        data = json.loads(Path(json_path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{json_path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    boxes, classes = scene_from_dict(data)
    positions, extras = read_point_cloud(ply_path)
    if "instance" not in extras:
        raise ParseError(f"{ply_path}: missing per-point 'instance' property")
    colors = None
    if all(c in extras for c in ("red", "green", "blue")):
        colors = np.column_stack([extras["red"], extras["green"], extras["blue"]])
    cloud = PointCloud(positions=positions, colors=colors)
    scene = Scene(
        boxes=boxes,
        point_instance=extras["instance"].astype(np.int64),
        classes=classes,
    )
    return scene, cloud
