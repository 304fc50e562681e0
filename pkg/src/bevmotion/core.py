"""Shared domain types: grid geometry, configuration, frames, motion fields."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, GridError, SceneError

FORWARD = "forward"
BACKWARD = "backward"

#: Tolerance on frame spacing when validating a sequence, seconds.
TIMESTAMP_TOL = 1e-6


def _cells_along(lo: float, hi: float, step: float, name: str) -> int:
    """Number of cells covering [lo, hi) with width `step`; must divide exactly."""
    extent = hi - lo
    if not (extent > 0):
        raise GridError(f"{name}: range ({lo}, {hi}) has non-positive extent")
    if not (step > 0):
        raise GridError(f"{name}: voxel size {step} must be positive")
    n = extent / step
    n_round = round(n)
    if n_round < 1 or abs(n - n_round) > 1e-9:
        raise GridError(
            f"{name}: extent {extent} is not an integer multiple of voxel size {step}"
        )
    return int(n_round)


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned crop of space discretized into voxels.

    Rows index the x axis, columns the y axis, channels the z axis.
    Bins are half-open: a point with coordinate u lands in
    floor((u - lo) / voxel) provided lo <= u < hi.
    """

    x_range: tuple[float, float] = (-32.0, 32.0)
    y_range: tuple[float, float] = (-32.0, 32.0)
    z_range: tuple[float, float] = (-3.0, 2.2)
    voxel_xy: float = 0.25
    voxel_z: float = 0.4

    def __post_init__(self):
        # Triggers validation; results are cheap to recompute on access.
        self.H, self.W, self.C  # noqa: B018

    @property
    def H(self) -> int:
        return _cells_along(*self.x_range, self.voxel_xy, "x_range")

    @property
    def W(self) -> int:
        return _cells_along(*self.y_range, self.voxel_xy, "y_range")

    @property
    def C(self) -> int:
        return _cells_along(*self.z_range, self.voxel_z, "z_range")

    def cell_centers(self, indices: np.ndarray) -> np.ndarray:
        """Metric (x, y) centers for an (N, 2) array of (row, col) indices."""
        indices = np.asarray(indices)
        x = self.x_range[0] + (indices[:, 0] + 0.5) * self.voxel_xy
        y = self.y_range[0] + (indices[:, 1] + 0.5) * self.voxel_xy
        return np.stack([x, y], axis=1)

    def to_dict(self) -> dict:
        return {
            "x_range": list(self.x_range),
            "y_range": list(self.y_range),
            "z_range": list(self.z_range),
            "voxel_xy": self.voxel_xy,
            "voxel_z": self.voxel_z,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(
            x_range=tuple(d["x_range"]),
            y_range=tuple(d["y_range"]),
            z_range=tuple(d["z_range"]),
            voxel_xy=float(d["voxel_xy"]),
            voxel_z=float(d["voxel_z"]),
        )


@dataclass(frozen=True)
class Config:
    """Pipeline configuration. All defaults are usable as-is.

    theta_c, theta_b are the matching-cost and backward-weight temperatures,
    d_c the cluster radius in cells, (alpha, beta, gamma) the loss weights for
    the cluster, forward and backward regularizers. T counts input frames up
    to and including the current one, T_prime the future steps predicted.
    """

    theta_c: float = 3.0
    theta_b: float = 10.0
    d_c: int = 3
    alpha: float = 0.05
    beta: float = 0.1
    gamma: float = 1.0
    T: int = 5
    T_prime: int = 5
    frame_dt: float = 0.2
    sinkhorn_epsilon: float = 0.005
    sinkhorn_iters: int = 300
    sinkhorn_tol: float = 1e-6
    outer_rounds: int = 5
    opt_steps: int = 200
    opt_lr: float = 0.05
    smooth_l1_delta: float = 1.0
    static_speed_threshold: float = 0.2
    rng_seed: int = 0

    def validated(self) -> "Config":
        return validate_config(self)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        """Build from a flat mapping; the document must carry exactly the
        Config keys (unknown and missing keys are both errors)."""
        known = {f.name for f in dataclasses.fields(cls)}
        problems = [f"unknown key: {k}" for k in sorted(set(d) - known)]
        problems += [f"missing key: {k}" for k in sorted(known - set(d))]
        if problems:
            raise ConfigError(problems)
        return validate_config(cls(**d))

    @classmethod
    def from_json(cls, text: str) -> "Config":
        d = json.loads(text)
        if not isinstance(d, dict):
            raise ConfigError(["config JSON must be a flat object"])
        return cls.from_dict(d)


_POSITIVE = ("theta_c", "theta_b", "frame_dt", "sinkhorn_epsilon",
             "sinkhorn_tol", "opt_lr", "smooth_l1_delta")
_NON_NEGATIVE = ("alpha", "beta", "gamma", "static_speed_threshold")
_COUNTS = {"d_c": 1, "T": 2, "T_prime": 1, "sinkhorn_iters": 1,
           "outer_rounds": 0, "opt_steps": 0}


def validate_config(cfg: Config) -> Config:
    """Return `cfg` unchanged if every invariant holds, else raise ConfigError
    naming every violated field."""
    problems = []
    for name in _POSITIVE:
        v = getattr(cfg, name)
        if not (isinstance(v, (int, float)) and not isinstance(v, bool) and v > 0):
            problems.append(f"{name} must be > 0 (got {v!r})")
    for name in _NON_NEGATIVE:
        v = getattr(cfg, name)
        if not (isinstance(v, (int, float)) and not isinstance(v, bool) and v >= 0
                and math.isfinite(v)):
            problems.append(f"{name} must be >= 0 and finite (got {v!r})")
    for name, lo in _COUNTS.items():
        v = getattr(cfg, name)
        if not (isinstance(v, int) and not isinstance(v, bool) and v >= lo):
            problems.append(f"{name} must be an integer >= {lo} (got {v!r})")
    if not isinstance(cfg.rng_seed, int) or isinstance(cfg.rng_seed, bool):
        problems.append(f"rng_seed must be an integer (got {cfg.rng_seed!r})")
    for name in ("theta_c", "frame_dt", "sinkhorn_epsilon", "opt_lr", "smooth_l1_delta"):
        v = getattr(cfg, name)
        if isinstance(v, float) and math.isinf(v):
            problems.append(f"{name} must be finite (got {v!r})")
    if problems:
        raise ConfigError(problems)
    return cfg


@dataclass(frozen=True)
class PointFrame:
    """A timestamped 3D point set. `points` is an (N, 3) float64 array."""

    timestamp: float
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise SceneError(f"points must be (N, 3), got {pts.shape}")
        if not np.isfinite(pts).all():
            raise SceneError("points contain non-finite coordinates")
        object.__setattr__(self, "points", pts)

    @property
    def count(self) -> int:
        return self.points.shape[0]


@dataclass
class MotionStack:
    """Dense per-cell displacement fields for T' steps, in meters.

    steps has shape (T', H, W, 2) holding (dx, dy); `valid` marks the cells
    that are non-empty in the anchor frame. Displacements outside the valid
    mask are exactly zero.
    """

    grid: GridSpec
    steps: np.ndarray
    direction: str
    valid: np.ndarray

    def __post_init__(self):
        if self.direction not in (FORWARD, BACKWARD):
            raise SceneError(f"direction must be forward or backward, got {self.direction!r}")
        steps = np.asarray(self.steps, dtype=np.float64)
        valid = np.asarray(self.valid, dtype=bool)
        H, W = self.grid.H, self.grid.W
        if steps.ndim != 4 or steps.shape[1:] != (H, W, 2):
            raise SceneError(f"steps must be (T', {H}, {W}, 2), got {steps.shape}")
        if valid.shape != (H, W):
            raise SceneError(f"valid mask must be ({H}, {W}), got {valid.shape}")
        if not np.isfinite(steps).all():
            raise SceneError("motion steps contain non-finite values")
        if steps[:, ~valid].any():
            raise SceneError("motion outside the valid mask must be zero")
        self.steps = steps
        self.valid = valid

    @classmethod
    def zeros(cls, grid: GridSpec, t_prime: int, direction: str,
              valid: np.ndarray) -> "MotionStack":
        steps = np.zeros((t_prime, grid.H, grid.W, 2), dtype=np.float64)
        return cls(grid=grid, steps=steps, direction=direction, valid=valid)

    @property
    def t_prime(self) -> int:
        return self.steps.shape[0]

    def copy(self) -> "MotionStack":
        return MotionStack(grid=self.grid, steps=self.steps.copy(),
                           direction=self.direction, valid=self.valid.copy())

    def at_cells(self, indices: np.ndarray) -> np.ndarray:
        """Gather motion at (N, 2) cell indices; returns (T', N, 2)."""
        indices = np.asarray(indices)
        return self.steps[:, indices[:, 0], indices[:, 1], :]

    def set_cells(self, indices: np.ndarray, values: np.ndarray) -> None:
        """Scatter (T', N, 2) values onto the given cells (must lie in the mask)."""
        indices = np.asarray(indices)
        self.steps[:, indices[:, 0], indices[:, 1], :] = values


@dataclass
class SceneSequence:
    """Time-ordered frames around an anchor frame, plus optional ground truth.

    Frames are evenly spaced by frame_dt. `point_sources`, when present,
    labels each point per frame with the object index it came from
    (-1 for ground), which synthetic generation fills in for diagnostics.
    """

    frames: list[PointFrame]
    current_index: int
    ground_truth: Optional[MotionStack] = None
    point_sources: Optional[list[np.ndarray]] = None

    def __post_init__(self):
        n = len(self.frames)
        if n == 0:
            raise SceneError("sequence has no frames")
        if not (0 <= self.current_index < n):
            raise SceneError(f"current_index {self.current_index} out of range for {n} frames")
        ts = np.array([f.timestamp for f in self.frames])
        if n > 1:
            dts = np.diff(ts)
            if (dts <= 0).any():
                raise SceneError("timestamps must be strictly increasing")
            if (np.abs(dts - dts[0]) > TIMESTAMP_TOL).any():
                raise SceneError("frame spacing must be uniform within 1e-6 s")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def current(self) -> PointFrame:
        return self.frames[self.current_index]

    def check_span(self, cfg: Config) -> None:
        """Verify the sequence is long enough for cfg (raises SceneError)."""
        if self.n_frames < 2 * cfg.T - 1:
            raise SceneError(
                f"sequence has {self.n_frames} frames; need at least {2 * cfg.T - 1}"
            )
