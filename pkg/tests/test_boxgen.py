import numpy as np
import pytest

from canonvote import (
    BoxGenConfig,
    ClassRecipe,
    NoiseModel,
    PointCloud,
    SceneRecipe,
    assign_class,
    canonical_vote,
    generate_boxes,
    generate_boxes_detailed,
    grid_from_extent,
    heading_error,
    load_detections,
    make_scene,
    oracle_field,
    save_detections,
    symmetric_min_distances,
    world_to_canonical,
)
from canonvote.gridvote import PredictionField, VoteGrid


def single_box_setup(seed=3, points=900, noise=None):
    recipe = SceneRecipe(
        classes=(ClassRecipe(name="crate", count=(1, 1),
                             scale_range=((0.3, 0.45), (0.3, 0.5), (0.3, 0.45)),
                             points=(points, points)),),
        floor_extent=(6.0, 6.0),
        background_points=0,
    )
    scene, cloud = make_scene(recipe, seed=seed)
    field = oracle_field(scene, cloud, noise or NoiseModel(seed=seed))
    grid = grid_from_extent(cloud, 0.05, np.abs(field.scale).max(axis=0))
    canonical_vote(cloud, field, grid, k=120)
    return scene, cloud, field, grid


def test_all_cells_below_delta_yields_empty():
    scene, cloud, field, grid = single_box_setup()
    peak = grid.g_obj.max()
    cfg = BoxGenConfig(delta=peak * 2)
    boxes, stats = generate_boxes_detailed(grid, cloud, field, cfg)
    assert boxes == []
    assert stats.candidates == 0


def test_single_box_recovered_exactly_once():
    scene, cloud, field, grid = single_box_setup()
    gt = scene.boxes[0]
    flat = np.sort(grid.g_obj.ravel())
    peak, runner_up = flat[-1], flat[-2]
    # Calibrate delta just below the peak so only the strongest cell qualifies.
    cfg = BoxGenConfig(delta=(peak + runner_up) / 2)
    boxes = generate_boxes(grid, cloud, field, cfg)
    assert len(boxes) == 1
    box = boxes[0]
    tau = grid.tau
    assert np.linalg.norm(box.pose.center - gt.pose.center) < tau
    extent = 2 * min(gt.pose.scale[0], gt.pose.scale[2])
    slack = 2 * np.pi / 120 + np.arctan(tau / extent)
    assert heading_error(box.pose.alpha, gt.pose.alpha) <= slack
    np.testing.assert_allclose(box.pose.scale, gt.pose.scale, rtol=0.05)
    assert box.score == pytest.approx(peak)
    assert box.class_id == 0


def test_acceptance_soundness_recheck():
    # Every returned box must still satisfy the acceptance tests when they
    # are recomputed post hoc from the frozen field.
    scene, cloud, field, grid = single_box_setup(points=700)
    cfg = BoxGenConfig(delta=60.0)
    boxes = generate_boxes(grid, cloud, field, cfg)
    assert boxes
    for box in boxes:
        projected = world_to_canonical(box.pose, cloud.positions)
        inside = np.all(np.abs(projected) < 1.0, axis=1)
        cnt = int(inside.sum())
        positive = inside & (field.objectness > cfg.objectness_cut)
        pos = int(positive.sum())
        assert pos > cfg.beta * cnt
        weights = field.objectness[positive]
        distances = symmetric_min_distances(
            field.p_tilde[positive], projected[positive], 1
        )
        assert (weights * distances).sum() < cfg.gamma * weights.sum()


def _ring_cluster(center, stored_p_tilde, scale, n):
    """Points on the orientation-sweep locus around ``center``: each point
    sits at ``center + diag(scale) R_y(theta) q`` for some theta, so its own
    vote ring passes exactly through ``center``, piling up a coherent but
    geometrically inconsistent peak there."""
    from canonvote import rotation_y
    theta = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    return np.stack([
        center + scale * (rotation_y(t) @ stored_p_tilde) for t in theta
    ])


def test_spurious_peak_rejected_by_backprojection():
    scene, cloud, field, grid0 = single_box_setup(points=800)
    gt = scene.boxes[0]

    fake_center = gt.pose.center + np.array([1.8, 0.0, -1.2])
    fake_scale = np.array([0.35, 0.35, 0.35])
    stored = np.array([0.8, 0.0, 0.6])
    ring = _ring_cluster(fake_center, stored, fake_scale, n=500)

    positions = np.concatenate([cloud.positions, ring])
    n_ring = len(ring)
    field2 = PredictionField(
        p_tilde=np.concatenate([field.p_tilde, np.tile(stored, (n_ring, 1))]),
        scale=np.concatenate([field.scale, np.tile(fake_scale, (n_ring, 1))]),
        objectness=np.concatenate([field.objectness, np.ones(n_ring)]),
        class_scores=np.concatenate([field.class_scores, np.ones((n_ring, 1))]),
    )
    cloud2 = PointCloud(positions=positions)
    grid = grid_from_extent(cloud2, 0.05, np.abs(field2.scale).max(axis=0))
    canonical_vote(cloud2, field2, grid, k=120)

    # The ring must actually produce a candidate-strength peak near its center.
    fake_cell = tuple(grid.containing_cell(fake_center[None])[0])
    neighborhood = grid.g_obj[
        fake_cell[0] - 2:fake_cell[0] + 3,
        fake_cell[1] - 2:fake_cell[1] + 3,
        fake_cell[2] - 2:fake_cell[2] + 3,
    ]
    assert neighborhood.max() > 60.0

    cfg = BoxGenConfig(delta=60.0)
    boxes, stats = generate_boxes_detailed(grid, cloud2, field2, cfg)
    assert stats.rejected_gamma > 0
    for box in boxes:
        assert np.linalg.norm(box.pose.center - fake_center) > 0.5

    # Without the back-projection check the fake peak slips through (pose
    # re-fit disabled too: it would drag the box off the raw peak).
    loose = BoxGenConfig(delta=60.0, backprojection_check=False, refine_pose=False)
    grid2 = grid_from_extent(cloud2, 0.05, np.abs(field2.scale).max(axis=0))
    canonical_vote(cloud2, field2, grid2, k=120)
    boxes2 = generate_boxes(grid2, cloud2, field2, loose)
    assert any(np.linalg.norm(b.pose.center - fake_center) < 0.2 for b in boxes2)


def test_termination_on_adversarial_grid():
    rng = np.random.default_rng(0)
    dims = (12, 12, 12)
    acc = np.zeros((*dims, 6))
    hot = rng.random(dims) < 0.4
    acc[..., 0] = np.where(hot, rng.uniform(60.0, 200.0, dims), 0.0)
    acc[..., 1] = 1.0  # unit direction, heading 0
    acc[..., 3:6] = 0.3
    grid = VoteGrid(origin=np.zeros(3), tau=0.05, acc=acc, filled=True, normalized=True)

    n = 300
    cloud = PointCloud(positions=rng.uniform(0.0, 0.6, (n, 3)))
    field = PredictionField(
        p_tilde=rng.uniform(-1, 1, (n, 3)),
        scale=np.full((n, 3), 0.3),
        objectness=np.ones(n),
        class_scores=np.ones((n, 1)),
    )
    cfg = BoxGenConfig(delta=60.0, gamma=1e-6)  # reject everything
    boxes, stats = generate_boxes_detailed(grid, cloud, field, cfg)
    assert boxes == []
    assert stats.candidates <= int(hot.sum())
    assert not np.any(grid.acc[..., 0] != acc[..., 0])  # input grid untouched


def test_peak_cells_consumed():
    scene, cloud, field, grid = single_box_setup(points=600)
    cfg = BoxGenConfig(delta=60.0)
    boxes, stats = generate_boxes_detailed(grid, cloud, field, cfg)
    assert boxes
    residual = stats.residual_obj
    for box in boxes:
        cell = tuple(grid.containing_cell(box.pose.center[None])[0])
        assert residual[cell] == 0.0
    assert residual.max() < cfg.delta or stats.accepted == cfg.max_boxes


def test_max_boxes_cap():
    scene, cloud, field, grid = single_box_setup(points=900)
    cfg = BoxGenConfig(delta=60.0, max_boxes=2)
    boxes = generate_boxes(grid, cloud, field, cfg)
    assert len(boxes) == 2


def test_config_validation():
    with pytest.raises(ValueError):
        BoxGenConfig(delta=0.0)
    with pytest.raises(ValueError):
        BoxGenConfig(beta=1.0)
    with pytest.raises(ValueError):
        BoxGenConfig(gamma=-0.1)
    with pytest.raises(ValueError):
        BoxGenConfig(objectness_cut=0.0)


class TestAssignClass:
    def _field(self, votes, num_classes=4):
        n = len(votes)
        scores = np.full((n, num_classes), 0.0)
        scores[np.arange(n), votes] = 1.0
        return PredictionField(
            p_tilde=np.zeros((n, 3)),
            scale=np.ones((n, 3)),
            objectness=np.ones(n),
            class_scores=scores,
        )

    def test_unanimous(self):
        field = self._field([3, 3, 3, 3])
        assert assign_class(field, np.arange(4)) == 3

    def test_majority(self):
        field = self._field([1] * 5 + [2] * 3)
        assert assign_class(field, np.arange(8)) == 1

    def test_tie_breaks_to_lower_id(self):
        field = self._field([2] * 4 + [0] * 4)
        assert assign_class(field, np.arange(8)) == 0

    def test_requires_points(self):
        field = self._field([0])
        with pytest.raises(ValueError):
            assign_class(field, np.array([], dtype=int))


def test_detection_roundtrip(tmp_path):
    scene, cloud, field, grid = single_box_setup()
    cfg = BoxGenConfig(delta=grid.g_obj.max() * 0.9)
    boxes = generate_boxes(grid, cloud, field, cfg)
    path = tmp_path / "dets.json"
    save_detections(path, boxes)
    loaded = load_detections(path)
    assert loaded == boxes
