"""Dense vote grids and exhaustive-orientation canonical vote accumulation.

Every point casts one objectness-weighted vote per candidate heading at the
box center implied by its predicted canonical coordinates and scale.  Votes
are splatted with trilinear weights into three co-located accumulators:
objectness mass, heading direction as (cos, sin) channels, and per-axis
scale.  After accumulation the direction and scale channels are divided
cell-wise by the objectness mass.

Grid layout: accumulator axes are (h, d, w) = world (y, z, x); cell
(h, d, w) is the tau-sized cube *centered* at ``origin + (w, h, d) * tau``,
so ``origin`` is the center of cell (0, 0, 0) and splat support covers the
full padded extent without boundary loss.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numba
import numpy as np

from .errors import ConfigError
from .geometry import TWO_PI, PointCloud
from .ply import write_point_cloud

DEFAULT_K = 120
DEFAULT_MAX_CELLS = 80_000_000

# Fixed point-partition size for the deterministic accumulation path.  The
# shard layout must not depend on the worker count, otherwise the float
# summation order (and therefore the result bytes) would change with --jobs.
VOTE_SHARD_SIZE = 65536

# Accumulator channels: objectness mass, cos, sin, scale x, scale y, scale z.
_N_CHANNELS = 6

# Axis permutations between world (x, y, z) and grid (h, d, w) component order.
_GRID_FROM_WORLD = (1, 2, 0)
_WORLD_FROM_GRID = (2, 0, 1)


@dataclass
class PredictionField:
    """Per-point predictions: canonical coordinates, scale, objectness, class scores.

    This is the output contract of any predictor feeding the voting stage;
    in this package the fields are produced by the oracle module.
    """

    p_tilde: np.ndarray       # (N, 3) canonical coordinates, dimensionless
    scale: np.ndarray         # (N, 3) per-axis scale, meters
    objectness: np.ndarray    # (N,) in [0, 1]
    class_scores: np.ndarray  # (N, NC) non-negative, rows sum to 1

    def __post_init__(self):
        self.p_tilde = np.asarray(self.p_tilde, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.objectness = np.asarray(self.objectness, dtype=np.float64)
        self.class_scores = np.asarray(self.class_scores, dtype=np.float64)
        n = self.p_tilde.shape[0]
        if self.p_tilde.shape != (n, 3) or self.scale.shape != (n, 3):
            raise ValueError("p_tilde and scale must have shape (N, 3)")
        if self.objectness.shape != (n,):
            raise ValueError(f"objectness must have shape ({n},)")
        if self.class_scores.ndim != 2 or self.class_scores.shape[0] != n:
            raise ValueError(f"class_scores must have shape ({n}, NC)")
        if n and (self.objectness.min() < 0.0 or self.objectness.max() > 1.0):
            raise ValueError("objectness values must lie in [0, 1]")
        if n:
            sums = self.class_scores.sum(axis=1)
            if np.any(np.abs(sums - 1.0) > 1e-6) or self.class_scores.min() < 0.0:
                raise ValueError("class_scores rows must be non-negative and sum to 1")

    @property
    def n(self) -> int:
        return self.p_tilde.shape[0]

    @property
    def num_classes(self) -> int:
        return self.class_scores.shape[1]


@dataclass
class VoteGrid:
    """Dense accumulator grid over the scene volume."""

    origin: np.ndarray  # world position of the center of cell (0, 0, 0)
    tau: float          # cell edge length, meters
    acc: np.ndarray     # (H, D, W, 6) float64
    filled: bool = False
    normalized: bool = False

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.acc.shape[:3]

    @property
    def n_cells(self) -> int:
        h, d, w = self.dims
        return h * d * w

    @property
    def g_obj(self) -> np.ndarray:
        return self.acc[..., 0]

    @property
    def g_rot(self) -> np.ndarray:
        return self.acc[..., 1:3]

    @property
    def g_scale(self) -> np.ndarray:
        return self.acc[..., 3:6]

    def grid_coords(self, points: np.ndarray) -> np.ndarray:
        """Fractional grid coordinates (h, d, w) of world points."""
        rel = (np.asarray(points, dtype=np.float64) - self.origin) / self.tau
        return rel[..., _GRID_FROM_WORLD]

    def containing_cell(self, points: np.ndarray) -> np.ndarray:
        """Integer (h, d, w) index of the cell containing each point."""
        return np.floor(self.grid_coords(points) + 0.5).astype(np.int64)

    def cell_center(self, index: np.ndarray) -> np.ndarray:
        """World position of the center of the cell(s) at (h, d, w) index."""
        idx = np.asarray(index, dtype=np.float64)
        return self.origin + idx[..., _WORLD_FROM_GRID] * self.tau


class CellReading(NamedTuple):
    objectness: float
    alpha: float
    scale: np.ndarray
    low_confidence: bool


def grid_from_extent(
    cloud: PointCloud,
    tau: float,
    max_scale,
    max_cells: int = DEFAULT_MAX_CELLS,
) -> VoteGrid:
    """Allocate an empty grid covering the cloud plus vote reach.

    The cloud's axis-aligned bounding box is padded on every side by
    ``sqrt(3) * max(|max_scale|)``, the farthest distance a vote can travel
    from its point when canonical coordinates stay within the unit cube.
    Cell counts are ``ceil(extent / tau) + 1`` per axis (minimum one cell
    plus the fencepost).
    """
    if cloud.n == 0:
        raise ValueError("cannot build a vote grid from an empty point cloud")
    if tau <= 0.0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    max_scale = np.abs(np.asarray(max_scale, dtype=np.float64)).reshape(3)
    pad = math.sqrt(3.0) * float(max_scale.max())
    lo = cloud.positions.min(axis=0) - pad
    hi = cloud.positions.max(axis=0) + pad
    cells_xyz = np.maximum(np.ceil((hi - lo) / tau).astype(np.int64), 1) + 1
    dims = tuple(int(cells_xyz[a]) for a in _GRID_FROM_WORLD)
    n_cells = int(np.prod(cells_xyz))
    if n_cells > max_cells:
        raise ConfigError(
            f"vote grid of {dims} = {n_cells} cells exceeds the budget of "
            f"{max_cells}; increase tau or raise max_cells"
        )
    acc = np.zeros((*dims, _N_CHANNELS), dtype=np.float64)
    return VoteGrid(origin=lo, tau=float(tau), acc=acc)


@numba.njit(cache=True, nogil=True)
def _splat_votes(rel, p_tilde, obj, svals, cos_r, sin_r, inv_tau, acc):
    """Accumulate all orientations of all points into ``acc`` (serial)."""
    h_max = acc.shape[0] - 1
    d_max = acc.shape[1] - 1
    w_max = acc.shape[2] - 1
    n = rel.shape[0]
    k = cos_r.shape[0]
    for i in range(n):
        oi = obj[i]
        if oi == 0.0:
            continue
        px = rel[i, 0]
        py = rel[i, 1]
        pz = rel[i, 2]
        qx = p_tilde[i, 0]
        qy = p_tilde[i, 1]
        qz = p_tilde[i, 2]
        sx = svals[i, 0]
        sy = svals[i, 1]
        sz = svals[i, 2]
        # The vote's y target is orientation-independent; hoist it.
        uh = (py - sy * qy) * inv_tau
        h0 = int(math.floor(uh))
        fh = uh - h0
        if h0 == h_max and fh == 0.0:
            h0 -= 1
            fh = 1.0
        if h0 < 0 or h0 >= h_max:
            continue
        gh = 1.0 - fh
        for j in range(k):
            cj = cos_r[j]
            sj = sin_r[j]
            # Scale applies after the heading rotation, matching the
            # canonical-to-world composition diag(s) @ R_y @ q.
            uw = (px - sx * (cj * qx - sj * qz)) * inv_tau
            ud = (pz - sz * (sj * qx + cj * qz)) * inv_tau
            w0 = int(math.floor(uw))
            fw = uw - w0
            d0 = int(math.floor(ud))
            fd = ud - d0
            # Exact hits on the last cell center keep their full support.
            if w0 == w_max and fw == 0.0:
                w0 -= 1
                fw = 1.0
            if d0 == d_max and fd == 0.0:
                d0 -= 1
                fd = 1.0
            if w0 < 0 or w0 >= w_max or d0 < 0 or d0 >= d_max:
                continue
            oc = oi * cj
            os = oi * sj
            ox = oi * sx
            oy = oi * sy
            oz = oi * sz
            gw = 1.0 - fw
            gd = 1.0 - fd
            for dh in range(2):
                wh = fh if dh == 1 else gh
                hh = h0 + dh
                for dd in range(2):
                    whd = wh * (fd if dd == 1 else gd)
                    ddi = d0 + dd
                    for dw in range(2):
                        wt = whd * (fw if dw == 1 else gw)
                        wwi = w0 + dw
                        acc[hh, ddi, wwi, 0] += wt * oi
                        acc[hh, ddi, wwi, 1] += wt * oc
                        acc[hh, ddi, wwi, 2] += wt * os
                        acc[hh, ddi, wwi, 3] += wt * ox
                        acc[hh, ddi, wwi, 4] += wt * oy
                        acc[hh, ddi, wwi, 5] += wt * oz


def _shard_bounds(n: int) -> list[tuple[int, int]]:
    return [(s, min(s + VOTE_SHARD_SIZE, n)) for s in range(0, n, VOTE_SHARD_SIZE)]


def canonical_vote(
    cloud: PointCloud,
    field: PredictionField,
    grid: VoteGrid,
    k: int = DEFAULT_K,
    *,
    jobs: int = 1,
    deterministic: bool = True,
    normalize: bool = True,
) -> VoteGrid:
    """Fill an empty grid with objectness-weighted canonical votes.

    For each point i with canonical prediction q_i, scale s_i and objectness
    o_i, and each of k headings r_j = 2*pi*j/k, a vote of weight o_i lands at
    ``p_i - diag(s_i) @ R_y(r_j) @ q_i`` (the center implied by inverting the
    canonical-to-world map at heading r_j), splatted over the 8 surrounding
    cells.
    The direction channels receive o_i * (cos r_j, sin r_j) and the scale
    channels o_i * s_i with the same weights.  Votes whose target falls
    outside the grid are dropped.  Finally the direction and scale channels
    are divided by the accumulated mass (cells with zero mass stay zero).

    In deterministic mode points are processed in fixed-size shards whose
    partial grids are merged in shard order, so the result is bit-identical
    for any ``jobs`` value.  With ``deterministic=False`` the votes are
    accumulated in a single pass (lower memory, result may differ in the
    last bits from the sharded path).

    Runtime is O(N * k) plus O(cells) for allocation and normalization.
    """
    if grid.filled or grid.normalized:
        raise ValueError("canonical_vote requires an empty grid")
    if field.n != cloud.n:
        raise ValueError(
            f"field length {field.n} does not match cloud length {cloud.n}"
        )
    if k < 1:
        raise ConfigError(f"orientation count k must be >= 1, got {k}")
    jobs = max(int(jobs), 1)

    r = np.arange(k, dtype=np.float64) * (TWO_PI / k)
    cos_r = np.cos(r)
    sin_r = np.sin(r)
    rel = np.ascontiguousarray(cloud.positions - grid.origin)
    p_tilde = np.ascontiguousarray(field.p_tilde)
    obj = np.ascontiguousarray(field.objectness)
    svals = np.ascontiguousarray(field.scale)
    inv_tau = 1.0 / grid.tau

    shards = _shard_bounds(cloud.n)
    if not deterministic or len(shards) <= 1:
        # A single shard merged into an all-zero grid is bit-identical to
        # accumulating in place, so small inputs can skip the partial buffer.
        _splat_votes(rel, p_tilde, obj, svals, cos_r, sin_r, inv_tau, grid.acc)
    elif jobs == 1:
        partial = np.empty_like(grid.acc)
        for a, b in shards:
            partial[...] = 0.0
            _splat_votes(
                rel[a:b], p_tilde[a:b], obj[a:b], svals[a:b],
                cos_r, sin_r, inv_tau, partial,
            )
            grid.acc += partial
    else:
        def run_shard(bounds):
            a, b = bounds
            partial = np.zeros_like(grid.acc)
            _splat_votes(
                rel[a:b], p_tilde[a:b], obj[a:b], svals[a:b],
                cos_r, sin_r, inv_tau, partial,
            )
            return partial

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            # Submit in waves to bound live partial grids; merge in shard order.
            for wave_start in range(0, len(shards), jobs):
                wave = shards[wave_start:wave_start + jobs]
                for future in [pool.submit(run_shard, s) for s in wave]:
                    grid.acc += future.result()

    grid.filled = True
    if normalize:
        normalize_grid(grid)
    return grid


def normalize_grid(grid: VoteGrid) -> VoteGrid:
    """Divide direction and scale channels by objectness mass, cell-wise."""
    if grid.normalized:
        raise ValueError("grid is already normalized")
    flat = grid.acc.reshape(-1, _N_CHANNELS)
    nonzero = np.flatnonzero(flat[:, 0] > 0.0)
    cells = flat[nonzero]
    cells[:, 1:] /= cells[:, :1]
    flat[nonzero] = cells
    grid.filled = True
    grid.normalized = True
    return grid


def read_cell(grid: VoteGrid, index) -> CellReading:
    """Objectness mass, heading and scale stored at one cell of a normalized grid.

    The heading is recovered as atan2 over the direction channels.  Cells
    with zero mass, or whose direction vector nearly cancels (magnitude
    below 1e-9, e.g. antipodal votes), report alpha 0 with the
    low-confidence flag set.
    """
    if not grid.normalized:
        raise ValueError("read_cell requires a normalized grid")
    h, d, w = (int(v) for v in index)
    dims = grid.dims
    if not (0 <= h < dims[0] and 0 <= d < dims[1] and 0 <= w < dims[2]):
        raise IndexError(f"cell index {(h, d, w)} out of range for dims {dims}")
    cell = grid.acc[h, d, w]
    obj = float(cell[0])
    if obj <= 0.0:
        return CellReading(0.0, 0.0, np.zeros(3), True)
    scale = cell[3:6].copy()
    direction = math.hypot(cell[1], cell[2])
    if direction < 1e-9:
        return CellReading(obj, 0.0, scale, True)
    alpha = math.atan2(cell[2], cell[1]) % TWO_PI
    if alpha >= TWO_PI:
        alpha = 0.0
    return CellReading(obj, alpha, scale, False)


def export_grid(grid: VoteGrid, path, *, binary: bool = True) -> None:
    """Write the nonzero objectness cells as a PLY point set with a 'vote' property."""
    mask = grid.g_obj > 0.0
    indices = np.argwhere(mask)
    positions = grid.cell_center(indices)
    votes = grid.g_obj[mask].astype(np.float32)
    write_point_cloud(path, positions, {"vote": votes}, binary=binary)
