"""Training objective: pseudo-label supervision, spatial and temporal
consistency regularizers, and their analytic gradients.

Every smooth-L1 term reduces by the mean over valid cells and the mean over
the two displacement components, then sums over steps, so term values stay
comparable across scenes of different density. All gradients are
hand-derived and checked against central finite differences; no autodiff
framework is involved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .clustering import ClusterSet
from .core import BACKWARD, FORWARD, Config, MotionStack
from .errors import BevMotionError, OptimizationError
from .kernels import backward_core, cluster_core, forward_core, sup_core
from .preprocess import CellSet

TERM_NAMES = ("sup", "c", "f", "b", "knn")

DEFAULT_DELTA = 1.0


@dataclass(frozen=True)
class LossToggles:
    """Which objective terms are active. `knn` adds the K-nearest-neighbor
    smoothness alternative to the cluster term (sharing the alpha weight)."""

    sup: bool = True
    c: bool = True
    f: bool = True
    b: bool = True
    knn: bool = False
    knn_k: int = 5

    @classmethod
    def from_names(cls, names, knn_k: int = 5) -> "LossToggles":
        names = list(names)
        unknown = sorted(set(names) - set(TERM_NAMES))
        if unknown:
            raise BevMotionError(
                f"unknown loss toggle(s) {unknown}; valid names are "
                f"{{sup, c, f, b, knn}}")
        return cls(sup="sup" in names, c="c" in names, f="f" in names,
                   b="b" in names, knn="knn" in names, knn_k=knn_k)

    def names(self) -> list[str]:
        return [n for n in TERM_NAMES if getattr(self, n)]


@dataclass
class LossReport:
    """Values and gradients of the objective terms.

    `values` holds each term (zero when disabled) and `total` their weighted
    sum. Gradient entries have the same (T', H, W, 2) shape as the motion
    stacks and are exactly zero outside the validity mask.
    """

    values: dict[str, float]
    total: float
    grad_forward: dict[str, np.ndarray]
    grad_backward: dict[str, np.ndarray]
    combined_forward: np.ndarray
    combined_backward: np.ndarray

    def to_json_dict(self) -> dict:
        return {"values": dict(self.values), "total": self.total}


# --------------------------------------------------------------------------
# Elementwise smooth L1
# --------------------------------------------------------------------------

def _smooth_l1_elem(x: np.ndarray, delta: float):
    """Per-element smooth-L1 value and derivative.

    0.5 x^2 / delta inside |x| < delta, |x| - delta/2 outside; the derivative
    is continuous across the breakpoint.
    """
    ax = np.abs(x)
    quad = ax < delta
    val = np.where(quad, 0.5 * x * x / delta, ax - 0.5 * delta)
    grad = np.where(quad, x / delta, np.sign(x))
    return val, grad


def smooth_l1(pred, target, delta: float = DEFAULT_DELTA):
    """Smooth-L1 between two vectors, averaged over components.

    Returns (value, gradient wrt pred).
    """
    x = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    val, grad = _smooth_l1_elem(x, delta)
    return float(val.mean()), grad / x.size


# --------------------------------------------------------------------------
# Compact cores over gathered (T', N, 2) motion arrays
# --------------------------------------------------------------------------
# The smooth-L1 terms and the cluster term delegate to the kernel backend
# (see bevmotion.kernels); the KNN alternative stays in NumPy since it is
# only exercised in comparisons.

def _knn_core(pred: np.ndarray, owners: np.ndarray, neighbors: np.ndarray):
    """Mean L2 motion difference to each cell's nearest neighbors.

    owners/neighbors are parallel position arrays into pred's N axis; an
    owner appearing k times has k neighbors. Each pair carries weight
    1 / (owner's neighbor count * number of owner cells).
    """
    t_prime = pred.shape[0]
    grad = np.zeros_like(pred)
    if owners.size == 0:
        return 0.0, grad
    counts = np.bincount(owners, minlength=pred.shape[1]).astype(np.float64)
    n_cells = int(np.count_nonzero(counts))
    w_owner = np.zeros_like(counts)
    nz = counts > 0
    w_owner[nz] = 1.0 / (counts[nz] * n_cells)
    w = w_owner[owners]
    total = 0.0
    for t in range(t_prime):
        diff = pred[t, owners] - pred[t, neighbors]
        nrm = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        total += float((w * nrm).sum())
        safe = np.where(nrm > 0.0, nrm, 1.0)
        unit = diff / safe[:, None]
        unit[nrm == 0.0] = 0.0
        contrib = w[:, None] * unit
        np.add.at(grad[t], owners, contrib)
        np.add.at(grad[t], neighbors, -contrib)
    return total, grad


def knn_neighbor_pairs(cells: CellSet, k: int):
    """(owners, neighbors) position pairs linking each cell to its K nearest
    cells of the same set; K shrinks to N-1 when the set is small. Distance
    ties resolve deterministically for a fixed cell set."""
    n = cells.count
    if n <= 1 or k < 1:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    k_eff = min(k, n - 1)
    tree = cKDTree(cells.coords)
    _, idx = tree.query(cells.coords, k=k_eff + 1)
    idx = np.atleast_2d(idx)
    not_self = idx != np.arange(n)[:, None]
    # Every row contains the query cell exactly once (coords are unique).
    neighbors = idx[not_self].reshape(n, k_eff).astype(np.int64)
    owners = np.repeat(np.arange(n, dtype=np.int64), k_eff)
    return owners, neighbors.reshape(-1)


# --------------------------------------------------------------------------
# MotionStack-facing term functions
# --------------------------------------------------------------------------

def _require_compatible(a: MotionStack, b: MotionStack, same_direction=True):
    if a.grid != b.grid:
        raise BevMotionError("motion stacks use different grids")
    if a.steps.shape != b.steps.shape:
        raise BevMotionError("motion stacks have different step counts")
    if not np.array_equal(a.valid, b.valid):
        raise BevMotionError("motion stacks have different validity masks")
    if same_direction and a.direction != b.direction:
        raise BevMotionError(
            f"direction mismatch: {a.direction} vs {b.direction}")


def _mask_positions(stack: MotionStack) -> np.ndarray:
    rows, cols = np.nonzero(stack.valid)
    return np.stack([rows, cols], axis=1)


def _scatter(grad_compact: np.ndarray, indices: np.ndarray, shape) -> np.ndarray:
    dense = np.zeros(shape, dtype=np.float64)
    dense[:, indices[:, 0], indices[:, 1], :] = grad_compact
    return dense


def loss_sup(pred: MotionStack, labels: MotionStack,
             delta: float = DEFAULT_DELTA):
    """Supervision against pseudo labels: smooth-L1 summed over steps,
    averaged over valid cells. Returns (value, dense gradient wrt pred)."""
    _require_compatible(pred, labels)
    idx = _mask_positions(pred)
    value, g = sup_core(pred.at_cells(idx), labels.at_cells(idx), delta)
    return value, _scatter(g, idx, pred.steps.shape)


def loss_cluster(pred: MotionStack, clusters: ClusterSet):
    """Within-cluster motion spread (all ordered pairs, self-pairs included,
    normalized by squared cluster size). Returns (value, dense gradient)."""
    idx = clusters.cells.indices
    members, starts = clusters.flat_members()
    value, g = cluster_core(pred.at_cells(idx), members, starts)
    return value, _scatter(g, idx, pred.steps.shape)


def loss_knn(pred: MotionStack, cells: CellSet, k: int):
    """K-nearest-neighbor motion smoothness over the given cells."""
    if k < 1:
        raise BevMotionError(f"knn K must be >= 1, got {k}")
    owners, neighbors = knn_neighbor_pairs(cells, k)
    idx = cells.indices
    value, g = _knn_core(pred.at_cells(idx), owners, neighbors)
    return value, _scatter(g, idx, pred.steps.shape)


def loss_forward(pred: MotionStack, delta: float = DEFAULT_DELTA):
    """Consistency between adjacent horizons: step t against t/(t+1) times
    step t+1. Zero by definition when T' = 1."""
    idx = _mask_positions(pred)
    value, g = forward_core(pred.at_cells(idx), delta)
    return value, _scatter(g, idx, pred.steps.shape)


def loss_backward(forward: MotionStack, backward: MotionStack,
                  theta_b: float, delta: float = DEFAULT_DELTA):
    """Forward/backward opposition: step t of the forward stack against the
    negated step t of the backward stack, weighted exp(-t / theta_b).

    Returns (value, dense gradient wrt forward, dense gradient wrt backward).
    """
    if forward.direction != FORWARD or backward.direction != BACKWARD:
        raise BevMotionError(
            f"expected a forward and a backward stack, got {forward.direction}"
            f" and {backward.direction}")
    _require_compatible(forward, backward, same_direction=False)
    idx = _mask_positions(forward)
    value, gf, gb = backward_core(forward.at_cells(idx),
                                  backward.at_cells(idx), theta_b, delta)
    shape = forward.steps.shape
    return value, _scatter(gf, idx, shape), _scatter(gb, idx, shape)


# --------------------------------------------------------------------------
# Total objective
# --------------------------------------------------------------------------

def total_loss(forward: MotionStack, backward: MotionStack,
               labels_fwd: MotionStack, labels_bwd: MotionStack,
               clusters: ClusterSet, cfg: Config,
               toggles: Optional[LossToggles] = None) -> LossReport:
    """Evaluate the full objective and its gradients.

    total = sup + alpha * (c + knn) + beta * f + gamma * b, with the sup, c,
    f and knn terms applied to both directions and summed. Disabled terms
    report zero and contribute nothing.
    """
    toggles = toggles or LossToggles()
    delta = cfg.smooth_l1_delta
    shape = forward.steps.shape

    values = {name: 0.0 for name in TERM_NAMES}
    gf = {name: np.zeros(shape) for name in TERM_NAMES}
    gb = {name: np.zeros(shape) for name in TERM_NAMES}

    if toggles.sup:
        v1, g1 = loss_sup(forward, labels_fwd, delta)
        v2, g2 = loss_sup(backward, labels_bwd, delta)
        values["sup"] = v1 + v2
        gf["sup"], gb["sup"] = g1, g2
    if toggles.c:
        v1, g1 = loss_cluster(forward, clusters)
        v2, g2 = loss_cluster(backward, clusters)
        values["c"] = v1 + v2
        gf["c"], gb["c"] = g1, g2
    if toggles.knn:
        v1, g1 = loss_knn(forward, clusters.cells, toggles.knn_k)
        v2, g2 = loss_knn(backward, clusters.cells, toggles.knn_k)
        values["knn"] = v1 + v2
        gf["knn"], gb["knn"] = g1, g2
    if toggles.f:
        v1, g1 = loss_forward(forward, delta)
        v2, g2 = loss_forward(backward, delta)
        values["f"] = v1 + v2
        gf["f"], gb["f"] = g1, g2
    if toggles.b:
        vb, gbf, gbb = loss_backward(forward, backward, cfg.theta_b, delta)
        values["b"] = vb
        gf["b"], gb["b"] = gbf, gbb

    total = (values["sup"] + cfg.alpha * (values["c"] + values["knn"])
             + cfg.beta * values["f"] + cfg.gamma * values["b"])
    combined_f = (gf["sup"] + cfg.alpha * (gf["c"] + gf["knn"])
                  + cfg.beta * gf["f"] + cfg.gamma * gf["b"])
    combined_b = (gb["sup"] + cfg.alpha * (gb["c"] + gb["knn"])
                  + cfg.beta * gb["f"] + cfg.gamma * gb["b"])
    return LossReport(values=values, total=float(total),
                      grad_forward=gf, grad_backward=gb,
                      combined_forward=combined_f, combined_backward=combined_b)


# --------------------------------------------------------------------------
# Compact evaluator for the per-scene descent loop
# --------------------------------------------------------------------------

class CompactObjective:
    """The same objective evaluated on (T', N, 2) arrays gathered at the
    valid cells, so the descent loop never touches the dense grids.

    `members`/`starts` describe the clusters and `knn_owners`/`knn_neighbors`
    the neighbor pairs, all as positions into the N axis. Labels are set per
    round via `set_labels`.
    """

    def __init__(self, cfg: Config, toggles: LossToggles, n_cells: int,
                 members: np.ndarray, starts: np.ndarray,
                 knn_owners: np.ndarray, knn_neighbors: np.ndarray):
        self.cfg = cfg
        self.toggles = toggles
        self.n_cells = n_cells
        self.members = members
        self.starts = starts
        self.knn_owners = knn_owners
        self.knn_neighbors = knn_neighbors
        self.labels_fwd: Optional[np.ndarray] = None
        self.labels_bwd: Optional[np.ndarray] = None

    def set_labels(self, labels_fwd: np.ndarray, labels_bwd: np.ndarray) -> None:
        self.labels_fwd = labels_fwd
        self.labels_bwd = labels_bwd

    def _terms(self, mf: np.ndarray, mb: np.ndarray, with_grads: bool):
        cfg, tg = self.cfg, self.toggles
        delta = cfg.smooth_l1_delta
        values = {name: 0.0 for name in TERM_NAMES}
        gf = np.zeros_like(mf) if with_grads else None
        gb = np.zeros_like(mb) if with_grads else None

        if tg.sup:
            v1, g1 = sup_core(mf, self.labels_fwd, delta, with_grads)
            v2, g2 = sup_core(mb, self.labels_bwd, delta, with_grads)
            values["sup"] = v1 + v2
            _check_finite("sup", values["sup"], g1, g2)
            if with_grads:
                gf += g1
                gb += g2
        if tg.c:
            v1, g1 = cluster_core(mf, self.members, self.starts, with_grads)
            v2, g2 = cluster_core(mb, self.members, self.starts, with_grads)
            values["c"] = v1 + v2
            _check_finite("c", values["c"], g1, g2)
            if with_grads:
                gf += cfg.alpha * g1
                gb += cfg.alpha * g2
        if tg.knn:
            v1, g1 = _knn_core(mf, self.knn_owners, self.knn_neighbors)
            v2, g2 = _knn_core(mb, self.knn_owners, self.knn_neighbors)
            values["knn"] = v1 + v2
            _check_finite("knn", values["knn"], g1, g2)
            if with_grads:
                gf += cfg.alpha * g1
                gb += cfg.alpha * g2
        if tg.f:
            v1, g1 = forward_core(mf, delta, with_grads)
            v2, g2 = forward_core(mb, delta, with_grads)
            values["f"] = v1 + v2
            _check_finite("f", values["f"], g1, g2)
            if with_grads:
                gf += cfg.beta * g1
                gb += cfg.beta * g2
        if tg.b:
            vb, gbf, gbb = backward_core(mf, mb, cfg.theta_b, delta, with_grads)
            values["b"] = vb
            _check_finite("b", values["b"], gbf, gbb)
            if with_grads:
                gf += cfg.gamma * gbf
                gb += cfg.gamma * gbb

        total = (values["sup"] + cfg.alpha * (values["c"] + values["knn"])
                 + cfg.beta * values["f"] + cfg.gamma * values["b"])
        return values, float(total), gf, gb

    def value(self, mf: np.ndarray, mb: np.ndarray) -> float:
        return self._terms(mf, mb, with_grads=False)[1]

    def value_and_grad(self, mf: np.ndarray, mb: np.ndarray):
        return self._terms(mf, mb, with_grads=True)

    def cluster_coherent(self, arr: np.ndarray) -> np.ndarray:
        """Replace each cluster's rows by their mean (other rows unchanged).

        Averaged update proposals move clusters collectively, which costs the
        pairwise consistency terms nothing; the optimizer falls back to them
        when per-cell proposals stall against those terms.
        """
        out = arr.copy()
        for s in range(self.starts.size - 1):
            mem = self.members[self.starts[s]:self.starts[s + 1]]
            if mem.size > 1:
                out[:, mem, :] = arr[:, mem, :].mean(axis=1, keepdims=True)
        return out


def _check_finite(name: str, value: float, *grads) -> None:
    if not math.isfinite(value):
        raise OptimizationError(f"non-finite value in loss term {name!r}")
    for g in grads:
        if g is not None and not np.isfinite(g).all():
            raise OptimizationError(f"non-finite gradient in loss term {name!r}")
