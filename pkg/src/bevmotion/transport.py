"""Entropic optimal-transport matching and pseudo motion labels.

The matcher couples the non-empty cells of the anchor frame to those of a
future (or past) frame under uniform marginals, then reads per-cell
displacements off the transport plan. Pre-warping shifts the source cells by
the current prediction first, so matching refines a prediction instead of
re-deriving it from scratch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import BACKWARD, FORWARD, Config, MotionStack, SceneSequence
from .errors import TransportError
from .kernels import sinkhorn_core
from .preprocess import CellSet, extract_cells, remove_ground, voxelize

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CostMatrix:
    """Pairwise matching cost in [0, 1): 1 - exp(-squared distance / theta_c)."""

    values: np.ndarray
    theta_c: float


@dataclass(frozen=True)
class TransportPlan:
    """Soft correspondence with uniform marginals 1/N (rows) and 1/M (cols)."""

    values: np.ndarray
    epsilon: float
    iterations: int
    converged: bool
    marginal_deviation: float


def cost_matrix(source: CellSet, target: CellSet, theta_c: float) -> CostMatrix:
    """Build the (N_source, N_target) cost from squared metric distances.

    Entries are 1 - exp(-||s_i - t_j||^2 / theta_c), zero iff the
    coordinates coincide. Both sets must be non-empty.
    """
    if source.count == 0 or target.count == 0:
        raise TransportError("cost_matrix requires non-empty cell sets")
    diff = source.coords[:, None, :] - target.coords[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    values = -np.expm1(-sq / theta_c)
    return CostMatrix(values=values, theta_c=float(theta_c))


def sinkhorn(cost: CostMatrix, epsilon: float, max_iters: int,
             tol: float) -> TransportPlan:
    """Solve the entropic OT problem for a cost matrix.

    Delegates to the kernel backend (stabilized scaling with log-domain
    absorption). Non-convergence within `max_iters` is reported through the
    `converged` flag rather than an exception; NaNs raise TransportError.
    """
    try:
        plan, iters, converged, dev = sinkhorn_core(
            cost.values, float(epsilon), int(max_iters), float(tol))
    except FloatingPointError as exc:
        raise TransportError(str(exc)) from exc
    return TransportPlan(values=plan, epsilon=float(epsilon),
                         iterations=iters, converged=converged,
                         marginal_deviation=dev)


def pseudo_labels(plan: TransportPlan, source: CellSet, target: CellSet,
                  normalize_rows: bool = True) -> np.ndarray:
    """Per-source-cell displacement labels from a transport plan.

    With `normalize_rows` (the default) each label is the row-normalized
    barycentric projection of the matched target coordinates minus the source
    coordinate: label_i = (sum_j plan_ij * t_j) / (sum_j plan_ij) - s_i.
    The raw-product mode skips the row normalization and applies the plan
    matrix to the target coordinates directly, which scales the barycenter
    by the row mass; it exists for comparison only.
    """
    values = plan.values
    if values.shape != (source.count, target.count):
        raise TransportError(
            f"plan shape {values.shape} does not match cell sets "
            f"({source.count}, {target.count})")
    matched = values @ target.coords
    if normalize_rows:
        row_mass = values.sum(axis=1)
        if not (row_mass > 0).all():
            raise TransportError("transport plan has an empty row")
        matched = matched / row_mass[:, None]
    return matched - source.coords


def prewarp(source: CellSet, prediction: MotionStack, step: int) -> CellSet:
    """Shift source cell coordinates by the predicted motion for one step.

    `step` is 1-based. Cell indices are unchanged, so labels computed from
    the warped coordinates still rasterize onto the original cells.
    """
    if not (1 <= step <= prediction.t_prime):
        raise TransportError(f"step {step} outside 1..{prediction.t_prime}")
    shift = prediction.steps[step - 1, source.indices[:, 0], source.indices[:, 1], :]
    return source.with_coords(source.coords + shift)


@dataclass(frozen=True)
class FramePair:
    """Preprocessed matching input for one step: the surviving (non-ground)
    cells of the anchor frame and of the frame `step` frames away."""

    source: CellSet
    target: CellSet


def prepare_pairs(sequence: SceneSequence, direction: str, cfg: Config,
                  grid) -> list[FramePair]:
    """Ground-remove, voxelize and extract cells for every matching step.

    Returns one FramePair per step 1..T'. Raises TransportError when the
    sequence does not span the required frames. The anchor frame is
    processed once and shared across steps.
    """
    if direction not in (FORWARD, BACKWARD):
        raise TransportError(f"unknown direction {direction!r}")
    sign = 1 if direction == FORWARD else -1
    cur = sequence.current_index
    last = cur + sign * cfg.T_prime
    if not (0 <= last < sequence.n_frames):
        raise TransportError(
            f"{direction} labels need frames through offset {sign * cfg.T_prime} "
            f"from the anchor; sequence has {sequence.n_frames} frames with "
            f"anchor at {cur}")

    kept, _ = remove_ground(sequence.frames[cur])
    source = extract_cells(voxelize(kept, grid))
    pairs = []
    for t in range(1, cfg.T_prime + 1):
        frame = sequence.frames[cur + sign * t]
        t_kept, _ = remove_ground(frame)
        target = extract_cells(voxelize(t_kept, grid))
        pairs.append(FramePair(source=source, target=target))
    return pairs


def label_stack(sequence: SceneSequence, prediction: MotionStack,
                direction: str, cfg: Config,
                pairs: list[FramePair] | None = None) -> MotionStack:
    """Generate a pseudo-label MotionStack for one direction.

    For each step: pre-warp the anchor cells by the current prediction,
    match them against the cells of the step's frame with entropic OT, and
    rasterize the barycentric displacement labels onto the grid. Cells that
    were removed as ground (or are otherwise absent from the matched set)
    keep the zero label. A step whose source or target cell set is empty
    contributes all-zero labels and a logged warning.

    `pairs` can carry preprocessed frame pairs to avoid re-running ground
    removal and voxelization when labels are regenerated every round.
    """
    if pairs is None:
        pairs = prepare_pairs(sequence, direction, cfg, prediction.grid)
    labels = MotionStack.zeros(prediction.grid, cfg.T_prime, direction,
                               prediction.valid)
    for t, pair in enumerate(pairs, start=1):
        if pair.source.count == 0 or pair.target.count == 0:
            logger.warning("step %d (%s): empty cell set, labels left zero",
                           t, direction)
            continue
        warped = prewarp(pair.source, prediction, t)
        cost = cost_matrix(warped, pair.target, cfg.theta_c)
        plan = sinkhorn(cost, cfg.sinkhorn_epsilon, cfg.sinkhorn_iters,
                        cfg.sinkhorn_tol)
        if not plan.converged:
            logger.debug("step %d (%s): sinkhorn stopped at deviation %.3g",
                         t, direction, plan.marginal_deviation)
        disp = pseudo_labels(plan, pair.source, pair.target)
        inside = prediction.valid[pair.source.indices[:, 0],
                                  pair.source.indices[:, 1]]
        labels.steps[t - 1, pair.source.indices[inside, 0],
                     pair.source.indices[inside, 1], :] = disp[inside]
    return labels
