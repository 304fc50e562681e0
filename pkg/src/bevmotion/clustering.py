"""Breadth-first clustering of non-empty BEV cells."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .preprocess import CellSet


@dataclass(frozen=True)
class ClusterSet:
    """Partition of a cell set into connected clusters.

    assignments[i] is the cluster id of cell i (in the cell set's order);
    clusters[k] lists the member cell positions of cluster k. Ids are dense
    and assigned in order of first discovery, so they are deterministic for
    row-major cell ordering. The clustered cell set rides along so loss
    evaluation knows which grid cells the positions refer to.
    """

    assignments: np.ndarray
    clusters: list[np.ndarray]
    cells: CellSet

    @property
    def count(self) -> int:
        return len(self.clusters)

    def flat_members(self) -> tuple[np.ndarray, np.ndarray]:
        """(members, starts) arrays for the kernel: members concatenates the
        clusters, starts[k]:starts[k+1] delimits cluster k."""
        if not self.clusters:
            return np.zeros(0, dtype=np.int64), np.zeros(1, dtype=np.int64)
        members = np.concatenate(self.clusters)
        sizes = np.array([c.size for c in self.clusters], dtype=np.int64)
        starts = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        return members, starts


def bfs_cluster(cells: CellSet, d_c: int) -> ClusterSet:
    """Group cells whose Euclidean index distance is at most d_c, closing the
    relation transitively.

    Expansion is breadth-first from the lowest-ordered unvisited cell, so a
    chain of cells each within d_c of the next forms a single cluster even
    when its ends are far apart. Empty input yields an empty ClusterSet.
    """
    if d_c < 1:
        raise ValueError(f"d_c must be >= 1, got {d_c}")
    n = cells.count
    assignments = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return ClusterSet(assignments=assignments, clusters=[], cells=cells)

    idx = cells.indices
    occupied: dict[tuple[int, int], int] = {
        (int(r), int(c)): i for i, (r, c) in enumerate(idx)
    }
    # Integer offsets within the d_c disk, excluding the origin.
    rad = int(d_c)
    offsets = [
        (dr, dc)
        for dr in range(-rad, rad + 1)
        for dc in range(-rad, rad + 1)
        if (dr or dc) and dr * dr + dc * dc <= d_c * d_c
    ]

    clusters: list[np.ndarray] = []
    for seed in range(n):
        if assignments[seed] >= 0:
            continue
        cid = len(clusters)
        members = [seed]
        assignments[seed] = cid
        queue = deque([seed])
        while queue:
            i = queue.popleft()
            r, c = int(idx[i, 0]), int(idx[i, 1])
            for dr, dc in offsets:
                j = occupied.get((r + dr, c + dc))
                if j is not None and assignments[j] < 0:
                    assignments[j] = cid
                    members.append(j)
                    queue.append(j)
        clusters.append(np.array(sorted(members), dtype=np.int64))
    return ClusterSet(assignments=assignments, clusters=clusters, cells=cells)
