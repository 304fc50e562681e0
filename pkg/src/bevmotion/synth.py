"""Synthetic LiDAR-like scene sequences with exact BEV motion ground truth.

Objects are rigid boxes translating at constant velocity; the ground is a
static noisy plane at z = 0. Occlusion sectors, per-frame dropout and sensor
noise inject the correspondence failures the regularizers are meant to fix.
Generation is a pure function of (recipe, config), bit-identical across runs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .core import FORWARD, Config, GridSpec, MotionStack, PointFrame, SceneSequence
from .errors import SceneError
from .preprocess import _bin_points

#: Box points start this far above the ground plane (wheel clearance).
OBJECT_Z_BASE = 0.3

GROUND_SOURCE = -1


@dataclass(frozen=True)
class ObjectSpec:
    """A rigid box: footprint (length, width) in meters, pose (x, y, heading)
    at the anchor frame, constant planar velocity in m/s."""

    footprint: tuple[float, float]
    height: float
    pose: tuple[float, float, float]
    velocity: tuple[float, float]
    density: float = 12.0


@dataclass(frozen=True)
class GroundSpec:
    """Static ground patch: extent (x_lo, x_hi, y_lo, y_hi), point density
    per square meter, z roughness (std of the per-point height)."""

    extent: tuple[float, float, float, float] = (-20.0, 20.0, -20.0, 20.0)
    density: float = 1.5
    z_noise: float = 0.02


@dataclass(frozen=True)
class SceneRecipe:
    """Deterministic description of one synthetic scene."""

    objects: tuple[ObjectSpec, ...] = ()
    ground: GroundSpec | None = GroundSpec()
    sensor_noise: float = 0.0
    dropout: float = 0.0
    occlusion: tuple[tuple[float, float], ...] = ()
    rng_seed: int = 0
    name: str = "scene"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ground"] = asdict(self.ground) if self.ground else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneRecipe":
        objects = tuple(
            ObjectSpec(
                footprint=tuple(o["footprint"]),
                height=float(o["height"]),
                pose=tuple(o["pose"]),
                velocity=tuple(o["velocity"]),
                density=float(o.get("density", 12.0)),
            )
            for o in d.get("objects", ())
        )
        g = d.get("ground")
        ground = None if g is None else GroundSpec(
            extent=tuple(g["extent"]), density=float(g["density"]),
            z_noise=float(g.get("z_noise", 0.02)))
        occl = tuple(tuple(s) for s in d.get("occlusion", ()))
        return cls(objects=objects, ground=ground,
                   sensor_noise=float(d.get("sensor_noise", 0.0)),
                   dropout=float(d.get("dropout", 0.0)),
                   occlusion=occl, rng_seed=int(d.get("rng_seed", 0)),
                   name=str(d.get("name", "scene")))


def _validate_recipe(recipe: SceneRecipe) -> None:
    problems = []
    for i, obj in enumerate(recipe.objects):
        if obj.density <= 0:
            problems.append(f"objects[{i}].density must be > 0")
        if obj.footprint[0] <= 0 or obj.footprint[1] <= 0:
            problems.append(f"objects[{i}].footprint must be positive")
        if obj.height <= 0:
            problems.append(f"objects[{i}].height must be > 0")
        if not all(math.isfinite(v) for v in obj.velocity):
            problems.append(f"objects[{i}].velocity must be finite")
    if recipe.ground is not None and recipe.ground.density <= 0:
        problems.append("ground.density must be > 0")
    if not (0.0 <= recipe.dropout < 1.0):
        problems.append("dropout must lie in [0, 1)")
    has_ground = recipe.ground is not None and recipe.ground.density > 0
    if not recipe.objects and not has_ground:
        problems.append("degenerate scene: no objects and no ground")
    if problems:
        raise SceneError("invalid recipe: " + "; ".join(problems))


def _sample_object_points(obj: ObjectSpec, rng: np.random.Generator) -> np.ndarray:
    length, width = obj.footprint
    n = max(1, round(obj.density * length * width))
    local = np.empty((n, 3))
    local[:, 0] = rng.uniform(-length / 2, length / 2, n)
    local[:, 1] = rng.uniform(-width / 2, width / 2, n)
    local[:, 2] = rng.uniform(OBJECT_Z_BASE, OBJECT_Z_BASE + obj.height, n)
    x, y, heading = obj.pose
    c, s = math.cos(heading), math.sin(heading)
    world = local.copy()
    world[:, 0] = c * local[:, 0] - s * local[:, 1] + x
    world[:, 1] = s * local[:, 0] + c * local[:, 1] + y
    return world


def _in_sector(angles: np.ndarray, sector: tuple[float, float]) -> np.ndarray:
    two_pi = 2.0 * math.pi
    a = np.mod(angles, two_pi)
    lo = sector[0] % two_pi
    hi = sector[1] % two_pi
    if lo <= hi:
        return (a >= lo) & (a <= hi)
    return (a >= lo) | (a <= hi)


def generate(recipe: SceneRecipe, cfg: Config,
             grid: GridSpec | None = None) -> SceneSequence:
    """Build the frame sequence and its ground-truth motion stack.

    The sequence spans enough frames on both sides of the anchor for both
    matching directions: 2 * max(T - 1, T') + 1 frames, anchor in the middle.
    Ground truth covers every grid cell the anchor frame occupies; cells
    touched by an object carry its constant-velocity displacement, ground
    cells carry zero. Coordinates are rounded to float32 so archived scenes
    reproduce the in-memory ones exactly.
    """
    _validate_recipe(recipe)
    grid = grid or GridSpec()
    rng = np.random.default_rng(recipe.rng_seed)

    object_points = [_sample_object_points(obj, rng) for obj in recipe.objects]
    if recipe.ground is not None:
        x_lo, x_hi, y_lo, y_hi = recipe.ground.extent
        area = (x_hi - x_lo) * (y_hi - y_lo)
        n_g = max(1, round(recipe.ground.density * area))
        ground = np.empty((n_g, 3))
        ground[:, 0] = rng.uniform(x_lo, x_hi, n_g)
        ground[:, 1] = rng.uniform(y_lo, y_hi, n_g)
        ground[:, 2] = rng.normal(0.0, recipe.ground.z_noise, n_g)
    else:
        ground = np.zeros((0, 3))

    base = np.concatenate(object_points + [ground]) if object_points else ground
    sources = np.concatenate(
        [np.full(p.shape[0], i, dtype=np.int64) for i, p in enumerate(object_points)]
        + [np.full(ground.shape[0], GROUND_SOURCE, dtype=np.int64)]
    ) if object_points else np.full(ground.shape[0], GROUND_SOURCE, dtype=np.int64)
    velocities = np.array([o.velocity for o in recipe.objects], dtype=np.float64).reshape(-1, 2)

    n_side = max(cfg.T - 1, cfg.T_prime)
    n_frames = 2 * n_side + 1
    frames = []
    frame_sources = []
    for j in range(n_frames):
        offset = (j - n_side) * cfg.frame_dt
        pts = base.copy()
        for i in range(len(recipe.objects)):
            sel = sources == i
            pts[sel, 0] += offset * velocities[i, 0]
            pts[sel, 1] += offset * velocities[i, 1]
        if recipe.sensor_noise > 0:
            pts += rng.normal(0.0, recipe.sensor_noise, pts.shape)
        keep = np.ones(pts.shape[0], dtype=bool)
        if recipe.occlusion:
            angles = np.arctan2(pts[:, 1], pts[:, 0])
            for sector in recipe.occlusion:
                keep &= ~_in_sector(angles, sector)
        if recipe.dropout > 0:
            keep &= rng.random(pts.shape[0]) >= recipe.dropout
        pts = pts[keep].astype(np.float32).astype(np.float64)
        frames.append(PointFrame(timestamp=j * cfg.frame_dt, points=pts))
        frame_sources.append(sources[keep])

    gt = _ground_truth(frames[n_side], frame_sources[n_side], velocities,
                       grid, cfg)
    return SceneSequence(frames=frames, current_index=n_side,
                         ground_truth=gt, point_sources=frame_sources)


def _ground_truth(current: PointFrame, sources: np.ndarray,
                  velocities: np.ndarray, grid: GridSpec,
                  cfg: Config) -> MotionStack:
    in_range, bins = _bin_points(current.points, grid)
    mask = np.zeros((grid.H, grid.W), dtype=bool)
    mask[bins[:, 0], bins[:, 1]] = True

    # Majority object per cell; ties break toward the lower object index.
    cell_votes: dict[tuple[int, int], np.ndarray] = {}
    src_in = sources[in_range]
    n_obj = velocities.shape[0]
    for (r, c, _), s in zip(bins, src_in):
        if s < 0:
            continue
        key = (int(r), int(c))
        votes = cell_votes.get(key)
        if votes is None:
            votes = np.zeros(n_obj, dtype=np.int64)
            cell_votes[key] = votes
        votes[s] += 1

    steps = np.zeros((cfg.T_prime, grid.H, grid.W, 2), dtype=np.float64)
    for (r, c), votes in cell_votes.items():
        obj = int(np.argmax(votes))
        v = velocities[obj]
        for k in range(cfg.T_prime):
            steps[k, r, c, 0] = (k + 1) * cfg.frame_dt * v[0]
            steps[k, r, c, 1] = (k + 1) * cfg.frame_dt * v[1]
    steps = steps.astype(np.float32).astype(np.float64)
    return MotionStack(grid=grid, steps=steps, direction=FORWARD, valid=mask)


# --------------------------------------------------------------------------
# Fixed benchmark suites
# --------------------------------------------------------------------------

SUITE_NAMES = ("smoke", "ablation", "divergence")


def _smoke_recipes() -> list[SceneRecipe]:
    return [
        SceneRecipe(
            name="smoke_static",
            objects=(ObjectSpec(footprint=(4.0, 2.0), height=1.5,
                                pose=(2.0, 1.0, 0.3), velocity=(0.0, 0.0),
                                density=12.0),),
            ground=GroundSpec(extent=(-10.0, 10.0, -10.0, 10.0), density=1.5,
                              z_noise=0.03),
            sensor_noise=0.01, dropout=0.02, rng_seed=101,
        ),
        SceneRecipe(
            name="smoke_slow",
            objects=(ObjectSpec(footprint=(4.5, 2.0), height=1.6,
                                pose=(-1.0, 0.5, 0.0), velocity=(2.0, 0.0),
                                density=14.0),),
            ground=GroundSpec(extent=(-12.0, 12.0, -10.0, 10.0), density=1.5,
                              z_noise=0.03),
            sensor_noise=0.01, dropout=0.03, rng_seed=102,
        ),
        SceneRecipe(
            name="smoke_fast",
            objects=(ObjectSpec(footprint=(4.5, 2.0), height=1.6,
                                pose=(-5.0, 2.0, 0.0), velocity=(8.0, 0.0),
                                density=14.0),),
            ground=GroundSpec(extent=(-16.0, 12.0, -10.0, 10.0), density=1.2,
                              z_noise=0.03),
            sensor_noise=0.015, dropout=0.05,
            occlusion=((0.35, 0.75),), rng_seed=103,
        ),
    ]


def _anchor_pose(rng: np.random.Generator, speed: float,
                 half: float = 17.0) -> tuple[float, float]:
    """Anchor-frame position keeping a mover inside the crop over +-1 s."""
    margin = min(speed * 1.2 + 4.0, half - 1.0)
    lo, hi = -(half - margin), half - margin
    return float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi))


def _ablation_recipes() -> list[SceneRecipe]:
    speeds = [0.0, 2.0, 4.0, 6.0, 8.0, 10.0]
    recipes = []
    rng = np.random.default_rng(7777)
    for i in range(20):
        speed = speeds[i % len(speeds)]
        heading = float(rng.uniform(-math.pi, math.pi))
        direction = float(rng.uniform(-math.pi, math.pi))
        vel = (speed * math.cos(direction), speed * math.sin(direction))
        px, py = _anchor_pose(rng, speed)
        objects = [ObjectSpec(footprint=(4.5, 2.0), height=1.6,
                              pose=(px, py, heading), velocity=vel,
                              density=14.0)]
        if i % 3 == 0:
            sx, sy = _anchor_pose(rng, 0.0)
            objects.append(ObjectSpec(footprint=(3.5, 1.8), height=1.4,
                                      pose=(sx, sy, 0.7),
                                      velocity=(0.0, 0.0), density=12.0))
        if i % 4 == 1:
            s2 = speeds[(i + 3) % len(speeds)]
            d2 = float(rng.uniform(-math.pi, math.pi))
            v2 = (s2 * math.cos(d2), s2 * math.sin(d2))
            qx, qy = _anchor_pose(rng, s2)
            objects.append(ObjectSpec(footprint=(4.0, 1.9), height=1.5,
                                      pose=(qx, qy, d2),
                                      velocity=v2, density=13.0))
        occl = ()
        if i % 2 == 0:
            start = float(rng.uniform(-math.pi, math.pi))
            occl = ((start, start + float(rng.uniform(0.3, 0.6))),)
        recipes.append(SceneRecipe(
            name=f"ablation_{i:02d}",
            objects=tuple(objects),
            ground=GroundSpec(extent=(-18.0, 18.0, -18.0, 18.0), density=1.2,
                              z_noise=0.035),
            sensor_noise=0.02, dropout=0.05, occlusion=occl,
            rng_seed=500 + i,
        ))
    return recipes


def _divergence_recipes() -> list[SceneRecipe]:
    recipes = []
    rng = np.random.default_rng(4242)
    for i in range(10):
        speed = [4.0, 6.0, 8.0, 10.0][i % 4]
        direction = float(rng.uniform(-math.pi, math.pi))
        vel = (speed * math.cos(direction), speed * math.sin(direction))
        start = float(rng.uniform(-math.pi, math.pi))
        width = float(rng.uniform(0.8, 1.4))
        recipes.append(SceneRecipe(
            name=f"divergence_{i:02d}",
            objects=(ObjectSpec(footprint=(4.5, 2.0), height=1.6,
                                pose=(-1.1 * vel[0], -1.1 * vel[1], direction),
                                velocity=vel, density=14.0),),
            ground=GroundSpec(extent=(-16.0, 16.0, -16.0, 16.0), density=1.2,
                              z_noise=0.04),
            sensor_noise=0.025, dropout=0.1,
            occlusion=((start, start + width),),
            rng_seed=900 + i,
        ))
    return recipes


def recipe_suite(name: str) -> list[SceneRecipe]:
    """The fixed scene lists behind each benchmark id."""
    if name == "smoke":
        return _smoke_recipes()
    if name == "ablation":
        return _ablation_recipes()
    if name == "divergence":
        return _divergence_recipes()
    raise SceneError(f"unknown suite {name!r}; expected one of {SUITE_NAMES}")
