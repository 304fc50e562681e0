"""Per-scene optimization of motion fields under the full objective.

Stands in for network training at desk scale: both direction stacks are free
per-cell variables, optimized by Adam-style adaptive gradient descent with a
monotone backtracking safeguard, alternating with pseudo-label regeneration
so the pre-warped matching sees progressively better predictions.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .clustering import bfs_cluster
from .core import BACKWARD, FORWARD, Config, GridSpec, MotionStack, SceneSequence
from .errors import OptimizationError, SceneError
from .evaluate import (BucketStats, BucketedMetrics, bucket_of,
                       bucketed_errors, cell_speeds_errors)
from .losses import CompactObjective, LossToggles, knn_neighbor_pairs
from .preprocess import occupancy_mask
from .synth import SceneRecipe, generate
from .transport import label_stack, prepare_pairs

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-12
#: Fraction of the largest per-cell RMS gradient added to every denominator.
#: Cells with near-zero gradient then move proportionally to their gradient
#: instead of taking full-size steps, which keeps the kinked consistency
#: terms from rejecting every proposal near the coincident zero start.
ADAM_RELATIVE_EPS = 1e-2
BACKTRACK_TRIES = 6
#: Stop a round after this many consecutive fully-rejected steps; the point
#: is then a (nonsmooth) local optimum at the current labels.
STALL_LIMIT = 10


@dataclass
class OptState:
    """Outcome of optimizing one scene."""

    forward: MotionStack
    backward: MotionStack
    labels_forward: MotionStack
    labels_backward: MotionStack
    rounds_completed: int
    loss_history: list[list[float]]
    round_totals: list[float]
    label_errors: list[dict[str, float]] = field(default_factory=list)
    converged: bool = False

    def summary_dict(self) -> dict:
        return {
            "rounds_completed": self.rounds_completed,
            "round_totals": self.round_totals,
            "loss_history": self.loss_history,
            "label_errors": self.label_errors,
            "converged": self.converged,
        }


def _mask_positions(mask: np.ndarray) -> np.ndarray:
    rows, cols = np.nonzero(mask)
    return np.stack([rows, cols], axis=1)


def _positions_in_mask(idx: np.ndarray, cells_idx: np.ndarray,
                       width: int) -> np.ndarray:
    """Map cell (row, col) indices to positions in the mask's row-major
    ordering; every cell must be present in the mask."""
    mask_keys = idx[:, 0] * width + idx[:, 1]
    cell_keys = cells_idx[:, 0] * width + cells_idx[:, 1]
    pos = np.searchsorted(mask_keys, cell_keys)
    if (pos >= mask_keys.size).any() or (mask_keys[pos] != cell_keys).any():
        raise OptimizationError("matched cells fall outside the valid mask")
    return pos.astype(np.int64)


def _descend(objective: CompactObjective, mf: np.ndarray, mb: np.ndarray,
             cfg: Config) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Adam-style steps, normalized per cell, with a monotone safeguard.

    Moment estimates follow Adam, but the denominator is the per-cell RMS
    over the two displacement components, so every cell moves at up to
    `opt_lr` per step along its own gradient direction. This preserves
    within-cluster agreement of the proposals (a per-component denominator
    turns tiny noise gradients into full-size steps that the kinked
    consistency terms reject). The recorded history starts with the loss at
    the incoming fields and appends the loss after every step; a proposed
    update that would raise the total is halved up to BACKTRACK_TRIES times
    and skipped if it never improves, so the history is non-increasing.
    """
    lr = cfg.opt_lr
    m_f = np.zeros_like(mf)
    v_f = np.zeros_like(mf)
    m_b = np.zeros_like(mb)
    v_b = np.zeros_like(mb)

    _, total, gf, gb = objective.value_and_grad(mf, mb)
    history = [total]
    last_mode = "cell"
    stalled = 0
    for step in range(1, cfg.opt_steps + 1):
        m_f = ADAM_BETA1 * m_f + (1 - ADAM_BETA1) * gf
        v_f = ADAM_BETA2 * v_f + (1 - ADAM_BETA2) * gf * gf
        m_b = ADAM_BETA1 * m_b + (1 - ADAM_BETA1) * gb
        v_b = ADAM_BETA2 * v_b + (1 - ADAM_BETA2) * gb * gb
        bc1 = 1 - ADAM_BETA1 ** step
        bc2 = 1 - ADAM_BETA2 ** step
        denom_f = np.sqrt((v_f / bc2).mean(axis=2, keepdims=True))
        denom_b = np.sqrt((v_b / bc2).mean(axis=2, keepdims=True))
        rel = ADAM_RELATIVE_EPS * max(denom_f.max(), denom_b.max())
        step_f = lr * (m_f / bc1) / (denom_f + rel + ADAM_EPS)
        step_b = lr * (m_b / bc1) / (denom_b + rel + ADAM_EPS)

        # Per-cell proposals stall against the pairwise consistency terms
        # once clusters are pinned together; cluster-coherent proposals move
        # whole clusters for free, so try both (preferring whichever worked
        # last) and halve before giving up on a step.
        modes = (last_mode,) + tuple(m for m in ("cell", "coherent")
                                     if m != last_mode)
        accepted = False
        for mode in modes:
            if mode == "cell":
                sf, sb = step_f, step_b
            else:
                sf = objective.cluster_coherent(step_f)
                sb = objective.cluster_coherent(step_b)
            factor = 1.0
            for _ in range(BACKTRACK_TRIES):
                cand_f = mf - factor * sf
                cand_b = mb - factor * sb
                cand_total = objective.value(cand_f, cand_b)
                if cand_total <= total:
                    accepted = True
                    break
                factor *= 0.5
            if accepted:
                last_mode = mode
                break
        if accepted:
            mf, mb = cand_f, cand_b
            _, total, gf, gb = objective.value_and_grad(mf, mb)
            stalled = 0
        else:
            stalled += 1
        history.append(total)
        if stalled >= STALL_LIMIT:
            break
    return mf, mb, history


def optimize_scene(sequence: SceneSequence, cfg: Config,
                   toggles: Optional[LossToggles] = None,
                   grid: Optional[GridSpec] = None) -> OptState:
    """Optimize forward and backward stacks for one scene.

    Both stacks start at zero. Each outer round regenerates pseudo labels
    with the current predictions as the pre-warp, then runs cfg.opt_steps of
    safeguarded Adam on the active loss terms. With ground truth available,
    the per-round mean pseudo-label error is tracked for both directions.
    """
    toggles = toggles or LossToggles()
    if grid is None:
        grid = sequence.ground_truth.grid if sequence.ground_truth else GridSpec()
    mask = occupancy_mask(sequence.current, grid)
    if not mask.any():
        raise SceneError("anchor frame occupies no grid cells")

    fwd = MotionStack.zeros(grid, cfg.T_prime, FORWARD, mask)
    bwd = MotionStack.zeros(grid, cfg.T_prime, BACKWARD, mask)
    labels_f = MotionStack.zeros(grid, cfg.T_prime, FORWARD, mask)
    labels_b = MotionStack.zeros(grid, cfg.T_prime, BACKWARD, mask)

    idx = _mask_positions(mask)
    pairs_f = prepare_pairs(sequence, FORWARD, cfg, grid)
    pairs_b = prepare_pairs(sequence, BACKWARD, cfg, grid)
    matched = pairs_f[0].source
    clusters = bfs_cluster(matched, cfg.d_c)
    members, starts = clusters.flat_members()
    matched_pos = _positions_in_mask(idx, matched.indices, grid.W)
    members = matched_pos[members] if members.size else members
    if toggles.knn:
        owners, neighbors = knn_neighbor_pairs(matched, toggles.knn_k)
        owners = matched_pos[owners] if owners.size else owners
        neighbors = matched_pos[neighbors] if neighbors.size else neighbors
    else:
        owners = neighbors = np.zeros(0, dtype=np.int64)

    objective = CompactObjective(cfg, toggles, idx.shape[0], members, starts,
                                 owners, neighbors)
    mf = np.zeros((cfg.T_prime, idx.shape[0], 2))
    mb = np.zeros_like(mf)

    loss_history: list[list[float]] = []
    round_totals: list[float] = []
    label_errors: list[dict[str, float]] = []
    gt = sequence.ground_truth

    for _ in range(cfg.outer_rounds):
        fwd.set_cells(idx, mf)
        bwd.set_cells(idx, mb)
        labels_f = label_stack(sequence, fwd, FORWARD, cfg, pairs_f)
        labels_b = label_stack(sequence, bwd, BACKWARD, cfg, pairs_b)
        if gt is not None:
            label_errors.append({
                "forward": _mean_label_error(labels_f, gt, 1.0, idx),
                "backward": _mean_label_error(labels_b, gt, -1.0, idx),
            })
        objective.set_labels(labels_f.at_cells(idx), labels_b.at_cells(idx))
        mf, mb, history = _descend(objective, mf, mb, cfg)
        loss_history.append(history)
        round_totals.append(history[-1])

    fwd.set_cells(idx, mf)
    bwd.set_cells(idx, mb)
    converged = (len(round_totals) >= 2 and
                 abs(round_totals[-1] - round_totals[-2])
                 <= 1e-4 * max(1.0, abs(round_totals[-2])))
    return OptState(forward=fwd, backward=bwd,
                    labels_forward=labels_f, labels_backward=labels_b,
                    rounds_completed=len(round_totals),
                    loss_history=loss_history, round_totals=round_totals,
                    label_errors=label_errors, converged=converged)


def _mean_label_error(labels: MotionStack, gt: MotionStack, sign: float,
                      idx: np.ndarray) -> float:
    lab = labels.at_cells(idx)
    ref = sign * gt.at_cells(idx)
    return float(np.linalg.norm(lab - ref, axis=2).mean())


# --------------------------------------------------------------------------
# Suite runner
# --------------------------------------------------------------------------

@dataclass
class SceneOutcome:
    """Per-scene results kept by the suite runner (fields optional)."""

    name: str
    metrics: Optional[BucketedMetrics]
    round_totals: list[float]
    label_errors: list[dict[str, float]]
    speeds: np.ndarray
    errors: np.ndarray
    state: Optional[OptState] = None


@dataclass
class SuiteResult:
    scenes: list[SceneOutcome]
    aggregate: Optional[BucketedMetrics]
    toggle_names: list[str]

    def to_json_dict(self) -> dict:
        return {
            "toggles": self.toggle_names,
            "aggregate": self.aggregate.to_json_dict() if self.aggregate else None,
            "scenes": [
                {
                    "name": s.name,
                    "metrics": s.metrics.to_json_dict() if s.metrics else None,
                    "round_totals": s.round_totals,
                }
                for s in self.scenes
            ],
        }


def _run_one(args) -> SceneOutcome:
    recipe, cfg, toggles, grid, keep_fields = args
    sequence = generate(recipe, cfg, grid)
    state = optimize_scene(sequence, cfg, toggles, grid)
    gt = sequence.ground_truth
    metrics = bucketed_errors(state.forward, gt, cfg) if gt else None
    speeds, errors = (cell_speeds_errors(state.forward, gt, cfg)
                      if gt else (np.zeros(0), np.zeros(0)))
    return SceneOutcome(name=recipe.name, metrics=metrics,
                        round_totals=state.round_totals,
                        label_errors=state.label_errors,
                        speeds=speeds, errors=errors,
                        state=state if keep_fields else None)


def ablation_rows() -> dict[int, LossToggles]:
    """The eight toggle combinations of the regularizer ablation, keyed by
    row number: supervision always on, all subsets of {c, f, b}."""
    return {
        1: LossToggles(sup=True, c=False, f=False, b=False),
        2: LossToggles(sup=True, c=False, f=False, b=True),
        3: LossToggles(sup=True, c=False, f=True, b=False),
        4: LossToggles(sup=True, c=False, f=True, b=True),
        5: LossToggles(sup=True, c=True, f=False, b=True),
        6: LossToggles(sup=True, c=True, f=False, b=False),
        7: LossToggles(sup=True, c=True, f=True, b=False),
        8: LossToggles(sup=True, c=True, f=True, b=True),
    }


def run_suite(recipes: list[SceneRecipe], cfg: Config,
              toggles: Optional[LossToggles] = None, threads: int = 0,
              grid: Optional[GridSpec] = None,
              keep_fields: bool = False) -> SuiteResult:
    """Generate, optimize and evaluate a list of scenes.

    Deterministic for fixed recipes and config regardless of `threads`
    (0 picks the CPU count); scenes are independent workloads.
    """
    if not recipes:
        raise SceneError("run_suite needs at least one recipe")
    toggles = toggles or LossToggles()
    grid = grid or GridSpec()
    jobs = [(r, cfg, toggles, grid, keep_fields) for r in recipes]
    workers = threads if threads > 0 else (os.cpu_count() or 1)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            outcomes = list(pool.map(_run_one, jobs))
    else:
        outcomes = [_run_one(j) for j in jobs]

    aggregate = _pooled_metrics(outcomes, cfg)
    return SuiteResult(scenes=outcomes, aggregate=aggregate,
                       toggle_names=toggles.names())


def _pooled_metrics(outcomes: list[SceneOutcome], cfg: Config):
    speeds = np.concatenate([o.speeds for o in outcomes]) if outcomes else np.zeros(0)
    errors = np.concatenate([o.errors for o in outcomes]) if outcomes else np.zeros(0)
    if speeds.size == 0:
        return None
    buckets = bucket_of(speeds, cfg)
    stats = {}
    for b, name in enumerate(("static", "slow", "fast")):
        sel = buckets == b
        if not sel.any():
            stats[name] = None
            continue
        e = np.sort(errors[sel])
        stats[name] = BucketStats(mean=float(e.mean()),
                                  median=float(e[(e.size - 1) // 2]),
                                  count=int(sel.sum()))
    return BucketedMetrics(static=stats["static"], slow=stats["slow"],
                           fast=stats["fast"], horizon_step=cfg.T_prime,
                           per_step={})
