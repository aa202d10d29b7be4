"""Command-line entry point: scene generation, oracle prediction, detection,
evaluation, ablation and benchmarking.

Exit codes: 0 success, 2 input/parse error, 3 config violation.
"""

from __future__ import annotations

import functools
import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from .boxgen import load_detections, save_detections
from .errors import ConfigError, ParseError, PlacementError
from .evaluation import (
    evaluate,
    run_ablations,
    scene_partial_indexes,
)
from .geometry import PointCloud
from .gridvote import canonical_vote, export_grid, grid_from_extent
from .oracle import (
    NoiseModel,
    load_field,
    oracle_field,
    save_field_binary,
    save_field_jsonl,
)
from .pipeline import RunConfig, run_detection
from .ply import read_point_cloud
from .scenegen import load_recipe, load_scene, make_scene, save_scene


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ParseError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except (ConfigError, PlacementError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(3)

    return wrapper


def _config_options(fn):
    options = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                     default=None, help="JSON config file with RunConfig fields."),
        click.option("--tau", type=float, default=None, help="Vote grid cell size (m)."),
        click.option("--k", type=int, default=None, help="Orientation count."),
        click.option("--delta", type=float, default=None, help="Peak vote-mass threshold."),
        click.option("--beta", type=float, default=None, help="Minimum positive fraction."),
        click.option("--gamma", type=float, default=None, help="Back-projection error bound."),
        click.option("--objectness-cut", type=float, default=None),
        click.option("--nms-iou", type=float, default=None),
        click.option("--max-grid-cells", type=int, default=None),
        click.option("--jobs", type=int, default=None, envvar="CANONVOTE_JOBS",
                     help="Worker threads (falls back to CANONVOTE_JOBS)."),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _build_config(config_path, **overrides) -> RunConfig:
    if config_path:
        return RunConfig.from_file(config_path, **overrides)
    return RunConfig().with_overrides(**overrides)


def _load_cloud(path) -> tuple[PointCloud, dict]:
    positions, extras = read_point_cloud(path)
    if positions.shape[0] == 0:
        raise ParseError(f"{path}: point cloud is empty")
    colors = None
    if all(c in extras for c in ("red", "green", "blue")):
        colors = np.column_stack([extras["red"], extras["green"], extras["blue"]])
    return PointCloud(positions=positions, colors=colors), extras


def _echo_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


@click.group()
@click.version_option(package_name="canonvote")
def main():
    """Canonical-voting oriented box detection toolkit."""


@main.command("scene-gen")
@click.option("--recipe", "recipe_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--ascii", "ascii_ply", is_flag=True, help="Write ascii PLY instead of binary.")
@_handle_errors
def cmd_scene_gen(recipe_path, out_dir, seed, ascii_ply):
    """Generate synthetic scenes (PLY cloud + JSON ground truth per scene)."""
    recipe, n_scenes = load_recipe(recipe_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n_scenes):
        scene_seed = seed + i
        scene, cloud = make_scene(recipe, scene_seed)
        stem = f"scene_{i:04d}"
        save_scene(out / f"{stem}.json", out / f"{stem}.ply", scene, cloud,
                   seed=scene_seed, binary=not ascii_ply)
        entries.append({
            "scene": f"{stem}.json",
            "cloud": f"{stem}.ply",
            "seed": scene_seed,
            "boxes": len(scene.boxes),
            "points": cloud.n,
        })
    manifest = {
        "recipe": json.loads(Path(recipe_path).read_text()),
        "base_seed": seed,
        "scenes": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    click.echo(f"wrote {n_scenes} scene(s) to {out}")


@main.command("predict-oracle")
@click.argument("scene_json", type=click.Path(exists=True, dir_okay=False))
@click.argument("cloud_ply", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--format", "fmt", type=click.Choice(["jsonl", "binary"]),
              default="jsonl", show_default=True)
@click.option("--canonical-sigma", type=float, default=0.0, show_default=True)
@click.option("--scale-sigma", type=float, default=0.0, show_default=True)
@click.option("--objectness-flip", type=float, default=0.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@_handle_errors
def cmd_predict_oracle(scene_json, cloud_ply, out_path, fmt,
                       canonical_sigma, scale_sigma, objectness_flip, seed):
    """Produce an oracle prediction field for a scene."""
    scene, cloud = load_scene(scene_json, cloud_ply)
    try:
        noise = NoiseModel(canonical_sigma=canonical_sigma, scale_sigma=scale_sigma,
                           objectness_flip=objectness_flip, seed=seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    field = oracle_field(scene, cloud, noise)
    if fmt == "binary":
        save_field_binary(out_path, field, classes=scene.classes)
    else:
        save_field_jsonl(out_path, field)
    click.echo(f"wrote field for {cloud.n} points to {out_path}")


@main.command("detect")
@click.argument("cloud_ply", type=click.Path(exists=True, dir_okay=False))
@click.argument("field_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--scene", "scene_json", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Scene JSON supplying class symmetry orders.")
@click.option("--export-grid", "grid_path", type=click.Path(dir_okay=False), default=None,
              help="Also write the vote map as a PLY point set.")
@_config_options
@_handle_errors
def cmd_detect(cloud_ply, field_path, out_path, scene_json, grid_path,
               config_path, **overrides):
    """Run the detection pipeline on one scene."""
    jobs = overrides.pop("jobs", None)
    cfg = _build_config(config_path, jobs=jobs, **overrides)
    t0 = time.perf_counter()
    cloud, _ = _load_cloud(cloud_ply)
    field, field_classes = load_field(field_path)
    if field.n != cloud.n:
        raise ParseError(
            f"{field_path}: field has {field.n} records but the cloud has {cloud.n} points"
        )
    parse_time = time.perf_counter() - t0

    symmetry = None
    if scene_json is not None:
        scene, _ = load_scene(scene_json, cloud_ply)
        symmetry = scene.symmetry_orders
    elif field_classes is not None:
        symmetry = [c.symmetry_order for c in field_classes]

    result = run_detection(
        cloud, field, cfg, class_symmetry=symmetry, keep_grid=grid_path is not None
    )
    save_detections(out_path, result.boxes)
    _echo_config(str(out_path) + ".config.json", cfg)
    if grid_path is not None:
        export_grid(result.grid, grid_path)

    click.echo(f"stage parse    {parse_time:8.3f} s", err=True)
    for stage in ("grid", "vote", "generate", "nms"):
        click.echo(f"stage {stage:<8} {result.timings[stage]:8.3f} s", err=True)
    click.echo(f"{len(result.boxes)} detection(s) -> {out_path}")


@main.command("export-grid")
@click.argument("cloud_ply", type=click.Path(exists=True, dir_okay=False))
@click.argument("field_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@_config_options
@_handle_errors
def cmd_export_grid(cloud_ply, field_path, out_path, config_path, **overrides):
    """Accumulate votes and export the objectness grid as PLY."""
    jobs = overrides.pop("jobs", None)
    cfg = _build_config(config_path, jobs=jobs, **overrides)
    cloud, _ = _load_cloud(cloud_ply)
    field, _ = load_field(field_path)
    if field.n != cloud.n:
        raise ParseError(f"{field_path}: field/cloud length mismatch")
    max_scale = np.abs(field.scale).max(axis=0)
    grid = grid_from_extent(cloud, cfg.tau, max_scale, max_cells=cfg.max_grid_cells)
    canonical_vote(cloud, field, grid, k=cfg.k, jobs=cfg.jobs)
    export_grid(grid, out_path)
    click.echo(f"wrote vote map ({int((grid.g_obj > 0).sum())} cells) to {out_path}")


@main.command("eval")
@click.option("--scenes", "scenes_dir", required=True, type=click.Path(file_okay=False, exists=True))
@click.option("--detections", "det_dir", required=True, type=click.Path(file_okay=False, exists=True))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None)
@click.option("--iou", "thresholds", type=float, multiple=True, default=(0.25, 0.5),
              show_default=True)
@click.option("--recall-threshold", type=float, default=0.5, show_default=True)
@_handle_errors
def cmd_eval(scenes_dir, det_dir, out_path, thresholds, recall_threshold):
    """Score detection files against scene ground truth.

    Pairs every scene_XXXX.json in the scenes directory with
    scene_XXXX.detections.json in the detections directory.
    """
    scenes_dir = Path(scenes_dir)
    det_dir = Path(det_dir)
    gts = {}
    dets = {}
    indexes = {}
    scene_files = sorted(scenes_dir.glob("scene_*.json"))
    if not scene_files:
        raise ParseError(f"{scenes_dir}: no scene_*.json files found")
    for scene_file in scene_files:
        stem = scene_file.stem
        scene, cloud = load_scene(scene_file, scenes_dir / f"{stem}.ply")
        det_file = det_dir / f"{stem}.detections.json"
        if not det_file.exists():
            raise ParseError(f"missing detections file {det_file}")
        gts[stem] = scene.boxes
        dets[stem] = load_detections(det_file)
        indexes[stem] = scene_partial_indexes(scene, cloud)
    report = evaluate(dets, gts, iou_thresholds=tuple(thresholds),
                      partial_indexes=indexes, recall_threshold=recall_threshold)
    click.echo(report.format_table())
    if out_path:
        report.to_json(out_path)
        click.echo(f"report -> {out_path}")


@main.command("ablate")
@click.option("--recipe", "recipe_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--seeds", type=int, default=5, show_default=True,
              help="Number of suite seeds.")
@click.option("--scenes-per-seed", type=int, default=4, show_default=True)
@click.option("--canonical-sigma", type=float, default=0.05, show_default=True)
@click.option("--scale-sigma", type=float, default=0.02, show_default=True)
@click.option("--objectness-flip", type=float, default=0.05, show_default=True)
@_config_options
@_handle_errors
def cmd_ablate(recipe_path, out_path, seeds, scenes_per_seed,
               canonical_sigma, scale_sigma, objectness_flip, config_path, **overrides):
    """Compare pipeline variants (full / direct voting / no back-projection /
    no objectness) over a seeded suite and write a CSV row per variant."""
    jobs = overrides.pop("jobs", None)
    cfg = _build_config(config_path, jobs=jobs, **overrides)
    recipe, _ = load_recipe(recipe_path)
    noise = NoiseModel(canonical_sigma=canonical_sigma, scale_sigma=scale_sigma,
                       objectness_flip=objectness_flip)
    result = run_ablations(recipe, noise, cfg, seeds=range(seeds),
                           scenes_per_seed=scenes_per_seed)
    result.to_csv(out_path)
    click.echo(result.format_table())
    click.echo(f"csv -> {out_path}")


@main.command("bench")
@click.option("--n", "n_points", type=int, default=100_000, show_default=True)
@click.option("--sizes", type=str, default=None,
              help="Comma-separated extra point counts to time (e.g. 10000,100000,1000000).")
@click.option("--repeats", type=int, default=3, show_default=True,
              help="Timing repetitions per size (best-of, interleaved).")
@_config_options
@_handle_errors
def cmd_bench(n_points, sizes, repeats, config_path, **overrides):
    """Time canonical voting at N and 2N points and report throughput.

    The linearity ratio t(2N)/t(N) should sit near 2 for a linear-in-points
    accumulator.
    """
    jobs = overrides.pop("jobs", None)
    cfg = _build_config(config_path, jobs=jobs, **overrides)

    def build(n):
        rng = np.random.default_rng(1234)
        positions = rng.uniform([-3.0, 0.0, -3.0], [3.0, 2.5, 3.0], (n, 3))
        from .gridvote import PredictionField
        field = PredictionField(
            p_tilde=rng.uniform(-1.0, 1.0, (n, 3)),
            scale=rng.uniform(0.2, 0.8, (n, 3)),
            objectness=rng.uniform(0.0, 1.0, n),
            class_scores=np.ones((n, 1)),
        )
        return PointCloud(positions=positions), field

    def time_once(n):
        cloud, field = build(n)
        grid = grid_from_extent(cloud, cfg.tau, np.full(3, 0.8),
                                max_cells=cfg.max_grid_cells)
        t0 = time.perf_counter()
        canonical_vote(cloud, field, grid, k=cfg.k, jobs=cfg.jobs)
        return time.perf_counter() - t0

    time_once(min(n_points, 20_000))  # jit compile and cpu warm-up
    for n in ([int(s) for s in sizes.split(",")] if sizes else []):
        t = min(time_once(n) for _ in range(max(repeats, 1)))
        click.echo(f"N={n:>9d}  k={cfg.k}  t={t:8.3f} s  {n / t:12.0f} points/s")
    # Interleave the two sizes so load drift hits both measurements alike.
    t1 = float("inf")
    t2 = float("inf")
    for _ in range(max(repeats, 1)):
        t1 = min(t1, time_once(n_points))
        t2 = min(t2, time_once(2 * n_points))
    ratio = t2 / t1
    click.echo(f"N={n_points:>9d}  k={cfg.k}  t={t1:8.3f} s  {n_points / t1:12.0f} points/s")
    click.echo(f"N={2 * n_points:>9d}  k={cfg.k}  t={t2:8.3f} s  {2 * n_points / t2:12.0f} points/s")
    click.echo(f"linearity ratio t(2N)/t(N) = {ratio:.3f}")


if __name__ == "__main__":
    main()
