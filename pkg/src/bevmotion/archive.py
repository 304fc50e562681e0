"""On-disk formats: point-frame files, motion-field files, scene archives.

All binary payloads are little-endian and fixed-layout so archives are
byte-identical across platforms and reruns:

  point frame (.bevm): magic "BEVM", u16 version, u64 count, f32 (x, y, z)*
  motion field (.mfld): magic "MFLD", u16 version, grid echo (8 f64 + 3 u32),
      u8 direction (0 forward / 1 backward), u16 step count, per step
      row-major f32 (dx, dy) pairs, then the validity bitmask (row-major,
      MSB-first bytes).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .core import (BACKWARD, FORWARD, Config, GridSpec, MotionStack,
                   PointFrame, SceneSequence)
from .errors import ArchiveError
from .synth import SceneRecipe

FRAME_MAGIC = b"BEVM"
FIELD_MAGIC = b"MFLD"
FORMAT_VERSION = 1

MANIFEST_NAME = "manifest.json"
GT_NAME = "ground_truth.mfld"


def write_frame_file(path, frame: PointFrame) -> None:
    pts = np.ascontiguousarray(frame.points, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FRAME_MAGIC)
        fh.write(struct.pack("<HQ", FORMAT_VERSION, pts.shape[0]))
        fh.write(pts.tobytes())


def read_frame_file(path, timestamp: float = 0.0) -> PointFrame:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FRAME_MAGIC:
            raise ArchiveError(f"{path}: bad magic {magic!r}")
        version, count = struct.unpack("<HQ", fh.read(10))
        if version != FORMAT_VERSION:
            raise ArchiveError(f"{path}: unsupported version {version}")
        data = fh.read(count * 12)
        if len(data) != count * 12:
            raise ArchiveError(f"{path}: truncated point payload")
        extra = fh.read(1)
        if extra:
            raise ArchiveError(f"{path}: trailing bytes after payload")
    pts = np.frombuffer(data, dtype="<f4").reshape(count, 3).astype(np.float64)
    return PointFrame(timestamp=timestamp, points=pts)


def write_motion_file(path, stack: MotionStack) -> None:
    g = stack.grid
    header = struct.pack(
        "<8d3I",
        g.x_range[0], g.x_range[1], g.y_range[0], g.y_range[1],
        g.z_range[0], g.z_range[1], g.voxel_xy, g.voxel_z,
        g.H, g.W, g.C,
    )
    direction = 0 if stack.direction == FORWARD else 1
    steps = np.ascontiguousarray(stack.steps, dtype="<f4")
    mask_bytes = np.packbits(stack.valid.reshape(-1)).tobytes()
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(header)
        fh.write(struct.pack("<BH", direction, stack.t_prime))
        fh.write(steps.tobytes())
        fh.write(mask_bytes)


def read_motion_file(path) -> MotionStack:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != FIELD_MAGIC:
            raise ArchiveError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != FORMAT_VERSION:
            raise ArchiveError(f"{path}: unsupported version {version}")
        vals = struct.unpack("<8d3I", fh.read(8 * 8 + 3 * 4))
        grid = GridSpec(x_range=(vals[0], vals[1]), y_range=(vals[2], vals[3]),
                        z_range=(vals[4], vals[5]), voxel_xy=vals[6],
                        voxel_z=vals[7])
        if (grid.H, grid.W, grid.C) != tuple(vals[8:11]):
            raise ArchiveError(f"{path}: grid echo mismatch")
        direction_byte, t_prime = struct.unpack("<BH", fh.read(3))
        n_step_bytes = t_prime * grid.H * grid.W * 2 * 4
        data = fh.read(n_step_bytes)
        if len(data) != n_step_bytes:
            raise ArchiveError(f"{path}: truncated step payload")
        n_mask_bytes = (grid.H * grid.W + 7) // 8
        mask_data = fh.read(n_mask_bytes)
        if len(mask_data) != n_mask_bytes:
            raise ArchiveError(f"{path}: truncated mask payload")
        if fh.read(1):
            raise ArchiveError(f"{path}: trailing bytes after payload")
    steps = np.frombuffer(data, dtype="<f4").astype(np.float64)
    steps = steps.reshape(t_prime, grid.H, grid.W, 2)
    bits = np.unpackbits(np.frombuffer(mask_data, dtype=np.uint8))
    valid = bits[: grid.H * grid.W].astype(bool).reshape(grid.H, grid.W)
    direction = FORWARD if direction_byte == 0 else BACKWARD
    steps = steps.copy()
    steps[:, ~valid] = 0.0
    return MotionStack(grid=grid, steps=steps, direction=direction, valid=valid)


# --------------------------------------------------------------------------
# Scene archives
# --------------------------------------------------------------------------

def _frame_name(i: int) -> str:
    return f"frame_{i:03d}.bevm"


def write_scene(out_dir, sequence: SceneSequence, recipe: SceneRecipe,
                cfg: Config, grid: GridSpec) -> Path:
    """Write a scene directory: manifest, per-frame point files, optional GT."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "bevmotion-scene",
        "version": FORMAT_VERSION,
        "frame_count": sequence.n_frames,
        "current_index": sequence.current_index,
        "frame_dt": cfg.frame_dt,
        "seed": recipe.rng_seed,
        "grid": grid.to_dict(),
        "recipe": recipe.to_dict(),
        "has_ground_truth": sequence.ground_truth is not None,
    }
    (out / MANIFEST_NAME).write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    for i, frame in enumerate(sequence.frames):
        write_frame_file(out / _frame_name(i), frame)
    if sequence.ground_truth is not None:
        write_motion_file(out / GT_NAME, sequence.ground_truth)
    return out


def read_manifest(scene_dir) -> dict:
    path = Path(scene_dir) / MANIFEST_NAME
    if not path.is_file():
        raise ArchiveError(f"{scene_dir}: missing {MANIFEST_NAME}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != "bevmotion-scene":
        raise ArchiveError(f"{scene_dir}: not a scene archive")
    if manifest.get("version") != FORMAT_VERSION:
        raise ArchiveError(f"{scene_dir}: unsupported version")
    return manifest


def read_scene(scene_dir) -> tuple[SceneSequence, dict]:
    """Load a scene archive back into a SceneSequence (plus its manifest)."""
    scene_dir = Path(scene_dir)
    manifest = read_manifest(scene_dir)
    n = int(manifest["frame_count"])
    dt = float(manifest["frame_dt"])
    frames = []
    for i in range(n):
        path = scene_dir / _frame_name(i)
        if not path.is_file():
            raise ArchiveError(f"{scene_dir}: missing {path.name}")
        frames.append(read_frame_file(path, timestamp=i * dt))
    gt = None
    if manifest.get("has_ground_truth"):
        gt = read_motion_file(scene_dir / GT_NAME)
    sequence = SceneSequence(frames=frames,
                             current_index=int(manifest["current_index"]),
                             ground_truth=gt)
    return sequence, manifest


def load_config_file(path) -> Config:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ArchiveError(f"cannot read config {path}: {exc}") from exc
    return Config.from_json(text)
