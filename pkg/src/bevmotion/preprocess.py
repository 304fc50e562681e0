"""Ground-plane removal and BEV voxelization."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import GridSpec, PointFrame

#: RANSAC defaults for the plane remover.
GROUND_ITERATIONS = 100
GROUND_DIST_TOL = 0.15
#: A candidate plane is accepted only if its normal is within 30 degrees of
#: vertical.
MAX_TILT_COS = np.cos(np.radians(30.0))
#: A plane must explain at least this fraction of the points; otherwise the
#: frame is treated as having no ground (a near-horizontal slice through an
#: object would otherwise pass as ground in ground-free scenes).
GROUND_MIN_SUPPORT = 0.35


@dataclass(frozen=True)
class BevGrid:
    """Binary occupancy over a GridSpec: (H, W, C) bool, 1 iff >= 1 point."""

    grid: GridSpec
    occupancy: np.ndarray
    timestamp: float


@dataclass(frozen=True)
class CellSet:
    """Non-empty BEV cells: (N, 2) integer (row, col) indices in row-major
    order and their metric (x, y) centers."""

    coords: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        indices = np.asarray(self.indices, dtype=np.int64).reshape(-1, 2)
        if coords.shape[0] != indices.shape[0]:
            raise ValueError("coords and indices must have matching lengths")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "indices", indices)

    @property
    def count(self) -> int:
        return self.indices.shape[0]

    def with_coords(self, coords: np.ndarray) -> "CellSet":
        """Same cells, different metric coordinates (used by pre-warping)."""
        return CellSet(coords=coords, indices=self.indices)


@dataclass(frozen=True)
class GroundLabel:
    """Per-point ground flag plus the fitted plane (a, b, c, d) with
    ax + by + cz + d = 0 and unit normal, or None if no plane was found."""

    is_ground: np.ndarray
    plane: Optional[tuple[float, float, float, float]]


def _plane_from_points(p0, p1, p2):
    n = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(n)
    if norm < 1e-12:
        return None
    n = n / norm
    return n[0], n[1], n[2], -float(np.dot(n, p0))


def remove_ground(frame: PointFrame,
                  iterations: int = GROUND_ITERATIONS,
                  dist_tol: float = GROUND_DIST_TOL,
                  seed: int = 0) -> tuple[PointFrame, GroundLabel]:
    """Split a frame into non-ground points and a ground label.

    Fits a near-horizontal plane by RANSAC (normal within 30 degrees of
    vertical), refines it with a least-squares fit over the consensus set,
    and labels every point within `dist_tol` of the plane as ground. Returns
    the surviving subset as a new frame. Degenerate inputs (fewer than three
    points, or no acceptable plane) keep all points and report no plane.
    """
    pts = frame.points
    n = pts.shape[0]
    no_plane = GroundLabel(is_ground=np.zeros(n, dtype=bool), plane=None)
    if n < 3:
        return frame, no_plane

    rng = np.random.default_rng(seed)
    best_plane = None
    best_count = 0
    for _ in range(iterations):
        i, j, k = rng.choice(n, size=3, replace=False)
        plane = _plane_from_points(pts[i], pts[j], pts[k])
        if plane is None or abs(plane[2]) < MAX_TILT_COS:
            continue
        dist = np.abs(pts @ np.array(plane[:3]) + plane[3])
        count = int((dist <= dist_tol).sum())
        if count > best_count:
            best_count = count
            best_plane = plane

    if best_plane is None or best_count < GROUND_MIN_SUPPORT * n:
        return frame, no_plane

    # Least-squares refinement on the consensus set, then relabel once.
    dist = np.abs(pts @ np.array(best_plane[:3]) + best_plane[3])
    inliers = pts[dist <= dist_tol]
    if inliers.shape[0] >= 3:
        centroid = inliers.mean(axis=0)
        _, _, vh = np.linalg.svd(inliers - centroid, full_matrices=False)
        normal = vh[2]
        if abs(normal[2]) >= MAX_TILT_COS:
            if normal[2] < 0:
                normal = -normal
            best_plane = (normal[0], normal[1], normal[2],
                          -float(np.dot(normal, centroid)))

    dist = np.abs(pts @ np.array(best_plane[:3]) + best_plane[3])
    is_ground = dist <= dist_tol
    kept = PointFrame(timestamp=frame.timestamp, points=pts[~is_ground])
    return kept, GroundLabel(is_ground=is_ground, plane=tuple(map(float, best_plane)))


def _bin_points(points: np.ndarray, grid: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Half-open binning; returns (in_range mask, (M, 3) integer bins)."""
    lo = np.array([grid.x_range[0], grid.y_range[0], grid.z_range[0]])
    hi = np.array([grid.x_range[1], grid.y_range[1], grid.z_range[1]])
    size = np.array([grid.voxel_xy, grid.voxel_xy, grid.voxel_z])
    ok = ((points >= lo) & (points < hi)).all(axis=1)
    bins = np.floor((points[ok] - lo) / size).astype(np.int64)
    np.clip(bins, 0, np.array([grid.H, grid.W, grid.C]) - 1, out=bins)
    return ok, bins


def voxelize(frame: PointFrame, grid: GridSpec) -> BevGrid:
    """Binary-occupancy voxelization; points outside the crop are dropped."""
    occ = np.zeros((grid.H, grid.W, grid.C), dtype=bool)
    if frame.count:
        _, bins = _bin_points(frame.points, grid)
        occ[bins[:, 0], bins[:, 1], bins[:, 2]] = True
    return BevGrid(grid=grid, occupancy=occ, timestamp=frame.timestamp)


def extract_cells(bev: BevGrid) -> CellSet:
    """Collapse z-channels: a (row, col) cell is kept iff any channel is
    occupied. Cells come out in row-major order with metric centers."""
    flat = bev.occupancy.any(axis=2)
    rows, cols = np.nonzero(flat)
    indices = np.stack([rows, cols], axis=1).astype(np.int64)
    return CellSet(coords=bev.grid.cell_centers(indices), indices=indices)


def occupancy_mask(frame: PointFrame, grid: GridSpec) -> np.ndarray:
    """(H, W) bool mask of cells holding at least one point of the frame."""
    return voxelize(frame, grid).occupancy.any(axis=2)
