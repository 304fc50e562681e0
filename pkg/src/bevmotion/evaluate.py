"""Speed-bucketed error metrics and forward/backward divergence analysis."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats

from .core import Config, MotionStack
from .errors import EvalError

SLOW_LIMIT = 5.0  # m/s; at most this speed counts as slow, above as fast
BUCKETS = ("static", "slow", "fast")


@dataclass(frozen=True)
class BucketStats:
    mean: float
    median: float
    count: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "median": self.median, "count": self.count}


@dataclass(frozen=True)
class BucketedMetrics:
    """L2 errors at the evaluation horizon, split by ground-truth speed."""

    static: Optional[BucketStats]
    slow: Optional[BucketStats]
    fast: Optional[BucketStats]
    horizon_step: int
    per_step: dict[str, list[Optional[float]]]

    def bucket(self, name: str) -> Optional[BucketStats]:
        return getattr(self, name)

    def to_json_dict(self) -> dict:
        out = {name: (self.bucket(name).to_dict() if self.bucket(name) else None)
               for name in BUCKETS}
        out["horizon_step"] = self.horizon_step
        out["per_step_mean"] = self.per_step
        return out


@dataclass(frozen=True)
class DivergenceReport:
    """Per-cell forward/backward disagreement paired with prediction error."""

    divergences: np.ndarray
    errors: np.ndarray
    spearman: Optional[float]
    binned_means: list[tuple[float, float]]

    def to_json_dict(self) -> dict:
        return {
            "cells": int(self.divergences.size),
            "spearman": self.spearman,
            "binned_means": [list(b) for b in self.binned_means],
        }


def _check_pair(pred: MotionStack, gt: Optional[MotionStack]) -> None:
    if gt is None:
        raise EvalError("no ground truth available")
    if pred.grid != gt.grid:
        raise EvalError("prediction and ground truth use different grids")
    if pred.steps.shape != gt.steps.shape:
        raise EvalError("prediction and ground truth have different step counts")
    if not np.array_equal(pred.valid, gt.valid):
        raise EvalError("prediction and ground truth have different masks")


def cell_speeds_errors(pred: MotionStack, gt: MotionStack, cfg: Config):
    """(speeds, errors) per valid cell: ground-truth speed from the final
    step's displacement, L2 error at the final step."""
    _check_pair(pred, gt)
    rows, cols = np.nonzero(pred.valid)
    horizon = pred.t_prime - 1
    gt_final = gt.steps[horizon, rows, cols, :]
    speeds = np.linalg.norm(gt_final, axis=1) / (pred.t_prime * cfg.frame_dt)
    errors = np.linalg.norm(pred.steps[horizon, rows, cols, :] - gt_final, axis=1)
    return speeds, errors


def bucket_of(speeds: np.ndarray, cfg: Config) -> np.ndarray:
    """Bucket index per cell: 0 static, 1 slow, 2 fast.

    Static means below the configured threshold; a speed of exactly 5 m/s
    counts as slow.
    """
    out = np.full(speeds.shape, 2, dtype=np.int64)
    out[speeds <= SLOW_LIMIT] = 1
    out[speeds < cfg.static_speed_threshold] = 0
    return out


def _lower_median(values: np.ndarray) -> float:
    ordered = np.sort(values)
    return float(ordered[(ordered.size - 1) // 2])


def bucketed_errors(pred: MotionStack, gt: MotionStack,
                    cfg: Config) -> BucketedMetrics:
    """Mean and lower-median L2 error per speed bucket at the final step,
    plus per-step mean errors for each bucket."""
    speeds, errors = cell_speeds_errors(pred, gt, cfg)
    buckets = bucket_of(speeds, cfg)

    stats_by_name: dict[str, Optional[BucketStats]] = {}
    for b, name in enumerate(BUCKETS):
        sel = buckets == b
        if not sel.any():
            stats_by_name[name] = None
            continue
        e = errors[sel]
        stats_by_name[name] = BucketStats(
            mean=float(e.mean()), median=_lower_median(e), count=int(sel.sum()))

    rows, cols = np.nonzero(pred.valid)
    per_step: dict[str, list[Optional[float]]] = {name: [] for name in BUCKETS}
    for t in range(pred.t_prime):
        step_err = np.linalg.norm(
            pred.steps[t, rows, cols, :] - gt.steps[t, rows, cols, :], axis=1)
        for b, name in enumerate(BUCKETS):
            sel = buckets == b
            per_step[name].append(float(step_err[sel].mean()) if sel.any() else None)

    return BucketedMetrics(static=stats_by_name["static"],
                           slow=stats_by_name["slow"],
                           fast=stats_by_name["fast"],
                           horizon_step=pred.t_prime,
                           per_step=per_step)


def divergence_report(forward: MotionStack, backward: MotionStack,
                      gt: Optional[MotionStack], n_bins: int = 10) -> DivergenceReport:
    """Pair each valid cell's forward/backward divergence with its error.

    Divergence sums ||M_fwd_t + M_bwd_t|| over steps (opposite-motion
    convention, so a perfectly time-symmetric pair scores zero); the error
    sums ||M_fwd_t - GT_t|| over the same steps. Correlation is Spearman's
    rank coefficient, None when fewer than 3 cells or either side is
    constant.
    """
    if not np.array_equal(forward.valid, backward.valid):
        raise EvalError("forward and backward stacks have different masks")
    _check_pair(forward, gt)
    rows, cols = np.nonzero(forward.valid)
    div = np.zeros(rows.size)
    err = np.zeros(rows.size)
    for t in range(forward.t_prime):
        f = forward.steps[t, rows, cols, :]
        b = backward.steps[t, rows, cols, :]
        g = gt.steps[t, rows, cols, :]
        div += np.linalg.norm(f + b, axis=1)
        err += np.linalg.norm(f - g, axis=1)

    spearman: Optional[float] = None
    if rows.size >= 3 and np.ptp(div) > 0 and np.ptp(err) > 0:
        rho = stats.spearmanr(div, err).statistic
        if np.isfinite(rho):
            spearman = float(rho)

    binned: list[tuple[float, float]] = []
    if rows.size:
        order = np.argsort(div, kind="stable")
        chunks = np.array_split(order, min(n_bins, rows.size))
        binned = [(float(div[c].mean()), float(err[c].mean()))
                  for c in chunks if c.size]
    return DivergenceReport(divergences=div, errors=err, spearman=spearman,
                            binned_means=binned)
