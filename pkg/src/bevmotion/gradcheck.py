"""Central finite-difference verification of every loss-term gradient.

Each term is evaluated on a small randomized fixture whose samples are
nudged away from the non-smooth points of the objective (the smooth-L1
breakpoint and coincident motions), then probed at random coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .clustering import bfs_cluster
from .core import BACKWARD, FORWARD, Config, GridSpec, MotionStack
from .losses import (loss_backward, loss_cluster, loss_forward, loss_knn,
                     loss_sup)
from .preprocess import CellSet

#: Keep smooth-L1 arguments at least this far from the breakpoint and
#: pairwise motions at least this far apart, so a 1e-5 probe never crosses
#: a derivative discontinuity.
KINK_MARGIN = 2e-3


@dataclass
class GradCheckResult:
    term: str
    points: int
    max_rel_error: float
    passed: bool
    worst: Optional[dict] = None

    def to_dict(self) -> dict:
        return {"term": self.term, "points": self.points,
                "max_rel_error": self.max_rel_error, "passed": self.passed,
                "worst": self.worst}


def _fixture_grid() -> GridSpec:
    return GridSpec(x_range=(-2.0, 2.0), y_range=(-2.0, 2.0),
                    z_range=(0.0, 0.4), voxel_xy=0.25, voxel_z=0.4)


def _fixture_cells(rng: np.random.Generator, grid: GridSpec, n: int = 32):
    flat = rng.choice(grid.H * grid.W, size=n, replace=False)
    flat.sort()
    rows, cols = np.divmod(flat, grid.W)
    idx = np.stack([rows, cols], axis=1).astype(np.int64)
    mask = np.zeros((grid.H, grid.W), dtype=bool)
    mask[rows, cols] = True
    return mask, idx, CellSet(coords=grid.cell_centers(idx), indices=idx)


def _random_stack(rng, grid, t_prime, direction, mask, idx, spread=1.6):
    stack = MotionStack.zeros(grid, t_prime, direction, mask)
    vals = rng.uniform(-spread, spread, size=(t_prime, idx.shape[0], 2))
    stack.set_cells(idx, vals)
    return stack


def _nudge_from_breakpoint(x: np.ndarray, delta: float) -> np.ndarray:
    """Additive adjustment moving each component of x out of the
    [delta - margin, delta + margin] band around the breakpoint."""
    bad = np.abs(np.abs(x) - delta) < KINK_MARGIN
    return np.where(bad, 3 * KINK_MARGIN, 0.0)


def _separate_motions(rng, stack, idx, min_dist=KINK_MARGIN):
    """Resample until no two cells share a near-identical motion at any step
    (the pairwise-norm terms are non-smooth at coincidence)."""
    for _ in range(50):
        vals = stack.at_cells(idx)
        ok = True
        for t in range(vals.shape[0]):
            d = vals[t, :, None, :] - vals[t, None, :, :]
            nrm = np.sqrt((d * d).sum(axis=2))
            np.fill_diagonal(nrm, np.inf)
            if nrm.min() < min_dist:
                ok = False
                break
        if ok:
            return
        stack.set_cells(idx, rng.uniform(-1.6, 1.6, size=vals.shape))
    raise RuntimeError("could not separate fixture motions")


# --------------------------------------------------------------------------
# Per-term fixture builders
# --------------------------------------------------------------------------

def _build_sup(rng: np.random.Generator, cfg: Config):
    grid = _fixture_grid()
    mask, idx, _ = _fixture_cells(rng, grid)
    pred = _random_stack(rng, grid, cfg.T_prime, FORWARD, mask, idx)
    labels = _random_stack(rng, grid, cfg.T_prime, FORWARD, mask, idx)
    pred.steps += _nudge_from_breakpoint(pred.steps - labels.steps,
                                         cfg.smooth_l1_delta)
    value_fn = lambda: loss_sup(pred, labels, cfg.smooth_l1_delta)[0]  # noqa: E731
    _, g = loss_sup(pred, labels, cfg.smooth_l1_delta)
    return value_fn, {"pred": g}, {"pred": pred.steps}, idx


def _build_forward(rng: np.random.Generator, cfg: Config):
    grid = _fixture_grid()
    mask, idx, _ = _fixture_cells(rng, grid)
    pred = _random_stack(rng, grid, cfg.T_prime, FORWARD, mask, idx)
    # Nudging one step shifts the residuals on both sides, so iterate.
    for _ in range(50):
        moved = False
        for i in range(cfg.T_prime - 1):
            factor = (i + 1.0) / (i + 2.0)
            x = pred.steps[i] - factor * pred.steps[i + 1]
            adj = _nudge_from_breakpoint(x, cfg.smooth_l1_delta)
            if adj.any():
                pred.steps[i] += adj
                moved = True
        if not moved:
            break
    value_fn = lambda: loss_forward(pred, cfg.smooth_l1_delta)[0]  # noqa: E731
    _, g = loss_forward(pred, cfg.smooth_l1_delta)
    return value_fn, {"pred": g}, {"pred": pred.steps}, idx


def _build_backward(rng: np.random.Generator, cfg: Config):
    grid = _fixture_grid()
    mask, idx, _ = _fixture_cells(rng, grid)
    fwd = _random_stack(rng, grid, cfg.T_prime, FORWARD, mask, idx)
    bwd = _random_stack(rng, grid, cfg.T_prime, BACKWARD, mask, idx)
    fwd.steps += _nudge_from_breakpoint(fwd.steps + bwd.steps,
                                        cfg.smooth_l1_delta)
    value_fn = lambda: loss_backward(fwd, bwd, cfg.theta_b,  # noqa: E731
                                     cfg.smooth_l1_delta)[0]
    _, gf, gb = loss_backward(fwd, bwd, cfg.theta_b, cfg.smooth_l1_delta)
    return (value_fn, {"forward": gf, "backward": gb},
            {"forward": fwd.steps, "backward": bwd.steps}, idx)


def _build_cluster(rng: np.random.Generator, cfg: Config):
    grid = _fixture_grid()
    mask, idx, cells = _fixture_cells(rng, grid)
    clusters = bfs_cluster(cells, cfg.d_c)
    pred = _random_stack(rng, grid, cfg.T_prime, FORWARD, mask, idx)
    _separate_motions(rng, pred, idx)
    value_fn = lambda: loss_cluster(pred, clusters)[0]  # noqa: E731
    _, g = loss_cluster(pred, clusters)
    return value_fn, {"pred": g}, {"pred": pred.steps}, idx


def _build_knn(rng: np.random.Generator, cfg: Config, k: int = 4):
    grid = _fixture_grid()
    mask, idx, cells = _fixture_cells(rng, grid)
    pred = _random_stack(rng, grid, cfg.T_prime, FORWARD, mask, idx)
    _separate_motions(rng, pred, idx)
    value_fn = lambda: loss_knn(pred, cells, k)[0]  # noqa: E731
    _, g = loss_knn(pred, cells, k)
    return value_fn, {"pred": g}, {"pred": pred.steps}, idx


def default_builders() -> dict[str, Callable]:
    return {"sup": _build_sup, "c": _build_cluster, "f": _build_forward,
            "b": _build_backward, "knn": _build_knn}


# --------------------------------------------------------------------------
# Probing
# --------------------------------------------------------------------------

def check_term(name: str, builder: Callable, cfg: Config,
               n_points: int = 100, fd_step: float = 1e-5,
               tol: float = 1e-5, seed: Optional[int] = None) -> GradCheckResult:
    """Probe one term's analytic gradient against central differences at
    `n_points` random valid coordinates."""
    rng = np.random.default_rng(cfg.rng_seed if seed is None else seed)
    value_fn, grads, params, idx = builder(rng, cfg)
    names = sorted(params)
    t_prime = next(iter(params.values())).shape[0]

    max_rel = 0.0
    worst = None
    for _ in range(n_points):
        p = names[rng.integers(len(names))]
        t = int(rng.integers(t_prime))
        cell = idx[rng.integers(idx.shape[0])]
        comp = int(rng.integers(2))
        r, c = int(cell[0]), int(cell[1])

        arr = params[p]
        old = arr[t, r, c, comp]
        arr[t, r, c, comp] = old + fd_step
        v_plus = value_fn()
        arr[t, r, c, comp] = old - fd_step
        v_minus = value_fn()
        arr[t, r, c, comp] = old

        fd = (v_plus - v_minus) / (2.0 * fd_step)
        analytic = float(grads[p][t, r, c, comp])
        rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-4)
        if rel > max_rel:
            max_rel = rel
            worst = {"param": p, "step": t, "cell": [r, c], "component": comp,
                     "analytic": analytic, "finite_difference": float(fd),
                     "rel_error": float(rel)}
    return GradCheckResult(term=name, points=n_points,
                           max_rel_error=float(max_rel),
                           passed=bool(max_rel < tol), worst=worst)


def run_gradient_checks(cfg: Config, n_points: int = 100,
                        fd_step: float = 1e-5, tol: float = 1e-5,
                        builders: Optional[dict[str, Callable]] = None
                        ) -> list[GradCheckResult]:
    """Check every registered term; returns one result per term."""
    builders = builders if builders is not None else default_builders()
    results = []
    for offset, name in enumerate(sorted(builders)):
        results.append(check_term(name, builders[name], cfg,
                                  n_points=n_points, fd_step=fd_step, tol=tol,
                                  seed=cfg.rng_seed + 1000 * (offset + 1)))
    return results
