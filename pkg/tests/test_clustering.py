import numpy as np
import pytest

from bevmotion.clustering import bfs_cluster
from bevmotion.core import GridSpec
from bevmotion.preprocess import CellSet


def cells_from_indices(indices, grid=None):
    indices = np.asarray(indices, dtype=np.int64)
    grid = grid or GridSpec()
    return CellSet(coords=grid.cell_centers(indices), indices=indices)


def union_find_partition(indices, d_c):
    """Transitive closure over the pairwise index-distance relation."""
    n = len(indices)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            d2 = ((indices[i] - indices[j]) ** 2).sum()
            if d2 <= d_c * d_c:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[ri] = rj
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), set()).add(i)
    return {frozenset(g) for g in groups.values()}


def partition_of(clusters):
    return {frozenset(c.tolist()) for c in clusters.clusters}


class TestBfsCluster:
    def test_within_radius_merged(self):
        cells = cells_from_indices([[10, 10], [10, 12]])
        assert bfs_cluster(cells, 3).count == 1

    def test_beyond_radius_split(self):
        cells = cells_from_indices([[10, 10], [10, 15]])
        assert bfs_cluster(cells, 3).count == 2

    def test_chain_transitivity(self):
        idx = [[0, 3 * k] for k in range(11)]  # spans 30 columns
        cells = cells_from_indices(idx)
        clusters = bfs_cluster(cells, 3)
        assert clusters.count == 1
        assert partition_of(clusters) == union_find_partition(
            np.asarray(idx), 3)

    def test_empty(self):
        clusters = bfs_cluster(cells_from_indices(np.zeros((0, 2))), 3)
        assert clusters.count == 0
        assert clusters.assignments.size == 0

    def test_invalid_radius(self):
        with pytest.raises(ValueError):
            bfs_cluster(cells_from_indices([[0, 0]]), 0)

    def test_euclidean_not_chebyshev(self):
        # (0,0) to (2,2) has euclidean distance 2.83 > 2 but chebyshev 2
        cells = cells_from_indices([[0, 0], [2, 2]])
        assert bfs_cluster(cells, 2).count == 2

    def test_assignments_match_clusters(self):
        rng = np.random.default_rng(0)
        idx = rng.integers(0, 40, size=(60, 2))
        idx = np.unique(idx, axis=0)
        clusters = bfs_cluster(cells_from_indices(idx), 3)
        for cid, members in enumerate(clusters.clusters):
            assert (clusters.assignments[members] == cid).all()
        assert (clusters.assignments >= 0).all()

    def test_union_find_equivalence_random(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            n = int(rng.integers(2, 120))
            idx = np.unique(rng.integers(0, 30, size=(n, 2)), axis=0)
            cells = cells_from_indices(idx)
            for d_c in (2, 3, 4):
                assert partition_of(bfs_cluster(cells, d_c)) == \
                    union_find_partition(idx, d_c)

    def test_permutation_changes_only_ids(self):
        rng = np.random.default_rng(7)
        idx = np.unique(rng.integers(0, 25, size=(50, 2)), axis=0)
        cells = cells_from_indices(idx)
        perm = rng.permutation(idx.shape[0])
        shuffled = cells_from_indices(idx[perm])
        a = partition_of(bfs_cluster(cells, 3))
        # map shuffled positions back to original positions
        b_raw = bfs_cluster(shuffled, 3).clusters
        b = {frozenset(perm[list(c)].tolist()) for c in b_raw}
        assert a == b

    def test_flat_members_layout(self):
        rng = np.random.default_rng(3)
        idx = np.unique(rng.integers(0, 30, size=(40, 2)), axis=0)
        clusters = bfs_cluster(cells_from_indices(idx), 3)
        members, starts = clusters.flat_members()
        assert members.size == idx.shape[0]
        assert starts[0] == 0 and starts[-1] == members.size
        for k, c in enumerate(clusters.clusters):
            assert np.array_equal(members[starts[k]:starts[k + 1]], c)


class TestClusterQualityReport:
    def test_instance_agreement_rates(self, cfg):
        """Qualitative under-/over-clustering rates against generator labels;
        objects closer than d_c cells merge legitimately, so no threshold."""
        from bevmotion.preprocess import remove_ground, voxelize, extract_cells
        from bevmotion.synth import generate, recipe_suite

        under = over = scenes = 0
        for recipe in recipe_suite("ablation")[:6]:
            seq = generate(recipe, cfg)
            grid = seq.ground_truth.grid
            kept, label = remove_ground(seq.current)
            cells = extract_cells(voxelize(kept, grid))
            clusters = bfs_cluster(cells, cfg.d_c)
            scenes += 1
            # an object is under-clustered if its cells span several clusters
            gt = seq.ground_truth
            speeds = np.linalg.norm(gt.steps[-1], axis=2)
            object_cells = {tuple(rc) for rc in np.argwhere(gt.valid & (speeds > 0))}
            cell_keys = [tuple(rc) for rc in cells.indices.tolist()]
            ids = {}
            for pos, key in enumerate(cell_keys):
                if key in object_cells:
                    ids.setdefault("obj", set()).add(clusters.assignments[pos])
            if ids.get("obj") and len(ids["obj"]) > 1:
                under += 1
            # over-clustered if one cluster mixes object and far background
            for members in clusters.clusters:
                keys = {cell_keys[m] for m in members.tolist()}
                if keys & object_cells and keys - object_cells:
                    over += 1
                    break
        assert 0 <= under <= scenes and 0 <= over <= scenes
