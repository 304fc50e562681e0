import numpy as np
import pytest

from bevmotion.core import GridSpec, PointFrame
from bevmotion.preprocess import (extract_cells, occupancy_mask, remove_ground,
                                  voxelize)
from bevmotion.synth import GroundSpec, ObjectSpec, SceneRecipe, generate


def frame(points):
    return PointFrame(timestamp=0.0, points=np.asarray(points, dtype=np.float64))


class TestVoxelize:
    def test_single_point_bin(self):
        g = GridSpec()
        bev = voxelize(frame([[0.1, 0.1, 0.0]]), g)
        occupied = np.argwhere(bev.occupancy)
        assert occupied.shape[0] == 1
        r, c, z = occupied[0]
        assert (r, c) == (128, 128)
        assert z == int((0.0 - g.z_range[0]) / g.voxel_z)

    def test_empty_frame(self):
        bev = voxelize(frame(np.zeros((0, 3))), GridSpec())
        assert not bev.occupancy.any()

    def test_binarization(self):
        bev = voxelize(frame([[0.1, 0.1, 0.0], [0.11, 0.12, 0.01]]), GridSpec())
        assert bev.occupancy.sum() == 1

    def test_out_of_range_dropped(self):
        bev = voxelize(frame([[100.0, 0.0, 0.0], [0.0, 0.0, 50.0]]), GridSpec())
        assert not bev.occupancy.any()

    def test_half_open_bins(self):
        g = GridSpec()
        # exactly at the upper edge: dropped; at the lower edge: kept
        bev = voxelize(frame([[32.0, 0.0, 0.0], [-32.0, 0.0, 0.0]]), g)
        occupied = np.argwhere(bev.occupancy)
        assert occupied.shape[0] == 1
        assert occupied[0][0] == 0

    def test_idempotent_under_duplication(self):
        pts = np.random.default_rng(0).uniform(-5, 5, (40, 3))
        g = GridSpec()
        once = voxelize(frame(pts), g)
        twice = voxelize(frame(np.vstack([pts, pts])), g)
        assert np.array_equal(once.occupancy, twice.occupancy)


class TestExtractCells:
    def test_empty(self):
        cells = extract_cells(voxelize(frame(np.zeros((0, 3))), GridSpec()))
        assert cells.count == 0

    def test_metric_center(self):
        cells = extract_cells(voxelize(frame([[0.1, 0.1, 0.0]]), GridSpec()))
        assert cells.count == 1
        assert np.allclose(cells.coords[0], [0.125, 0.125])

    def test_z_collapse(self):
        g = GridSpec()
        pts = [[0.1, 0.1, -1.0], [0.1, 0.1, 0.0], [0.1, 0.1, 1.0]]
        cells = extract_cells(voxelize(frame(pts), g))
        assert cells.count == 1

    def test_row_major_order(self):
        pts = [[1.0, -1.0, 0.0], [-1.0, 1.0, 0.0], [-1.0, -1.0, 0.0]]
        cells = extract_cells(voxelize(frame(pts), GridSpec()))
        keys = cells.indices[:, 0] * 256 + cells.indices[:, 1]
        assert np.array_equal(keys, np.sort(keys))

    def test_cell_count_bounded_by_points(self):
        pts = np.random.default_rng(1).uniform(-10, 10, (100, 3))
        cells = extract_cells(voxelize(frame(pts), GridSpec()))
        assert cells.count <= 100


class TestRemoveGround:
    def test_perfect_plane(self):
        rng = np.random.default_rng(2)
        ground = np.column_stack([rng.uniform(-5, 5, 200),
                                  rng.uniform(-5, 5, 200),
                                  np.zeros(200)])
        target = np.array([[1.0, 1.0, 1.0]])
        kept, label = remove_ground(frame(np.vstack([ground, target])),
                                    dist_tol=0.15)
        assert kept.count == 1
        assert np.allclose(kept.points[0], target[0])
        assert label.plane is not None
        assert label.is_ground.sum() == 200

    def test_precision_recall_on_synthetic(self, cfg):
        recipe = SceneRecipe(
            objects=(ObjectSpec(footprint=(4.0, 2.0), height=1.5,
                                pose=(2.0, 0.0, 0.2), velocity=(0.0, 0.0),
                                density=15.0),),
            ground=GroundSpec(extent=(-10.0, 10.0, -10.0, 10.0), density=2.0,
                              z_noise=0.03),
            rng_seed=11,
        )
        seq = generate(recipe, cfg)
        i = seq.current_index
        pts = seq.frames[i].points
        sources = seq.point_sources[i]
        _, label = remove_ground(seq.frames[i], dist_tol=0.15)
        is_ground_true = sources < 0
        removed = label.is_ground
        ground_removed = removed[is_ground_true].mean()
        object_kept = (~removed[~is_ground_true]).mean()
        assert ground_removed >= 0.90
        assert object_kept >= 0.95

    def test_partition(self):
        rng = np.random.default_rng(3)
        pts = np.column_stack([rng.uniform(-5, 5, 300),
                               rng.uniform(-5, 5, 300),
                               rng.normal(0, 0.02, 300)])
        kept, label = remove_ground(frame(pts))
        assert kept.count + int(label.is_ground.sum()) == 300

    def test_too_few_points(self):
        kept, label = remove_ground(frame([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]))
        assert kept.count == 2
        assert label.plane is None

    def test_collinear_degenerate(self):
        pts = np.column_stack([np.linspace(0, 1, 10), np.zeros(10), np.zeros(10)])
        kept, label = remove_ground(frame(pts))
        # no acceptable plane from collinear samples; everything survives
        if label.plane is None:
            assert kept.count == 10

    def test_steep_plane_ignored(self):
        # a vertical wall is not ground
        rng = np.random.default_rng(4)
        wall = np.column_stack([np.zeros(100), rng.uniform(-5, 5, 100),
                                rng.uniform(0, 3, 100)])
        kept, label = remove_ground(frame(wall))
        assert label.plane is None or abs(label.plane[2]) >= np.cos(np.radians(30))

    def test_empty_after_removal_ok(self):
        rng = np.random.default_rng(5)
        ground = np.column_stack([rng.uniform(-5, 5, 100),
                                  rng.uniform(-5, 5, 100), np.zeros(100)])
        kept, _ = remove_ground(frame(ground), dist_tol=0.2)
        assert kept.count == 0


class TestOccupancyMask:
    def test_matches_voxelize(self):
        pts = np.random.default_rng(6).uniform(-10, 10, (50, 3))
        g = GridSpec()
        mask = occupancy_mask(frame(pts), g)
        assert np.array_equal(mask, voxelize(frame(pts), g).occupancy.any(axis=2))
