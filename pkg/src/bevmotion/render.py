"""Color-wheel rendering of motion fields to binary PPM images."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .core import MotionStack


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Vectorized HSV (all in [0, 1]) to RGB float arrays."""
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def field_to_rgb(field: np.ndarray, valid: np.ndarray,
                 max_magnitude: float, white_valid: bool = False) -> np.ndarray:
    """Map an (H, W, 2) displacement field to (H, W, 3) uint8 colors.

    Hue encodes the direction atan2(dy, dx); saturation and value scale with
    the magnitude, clamped at `max_magnitude`, so zero motion renders black.
    With `white_valid`, occupied cells keep full value and fade to white at
    zero motion instead. Cells outside the mask are always black.
    """
    if max_magnitude <= 0:
        raise ValueError("max_magnitude must be positive")
    dx = field[..., 0]
    dy = field[..., 1]
    mag = np.hypot(dx, dy)
    scaled = np.clip(mag / max_magnitude, 0.0, 1.0)
    hue = (np.arctan2(dy, dx) % (2.0 * math.pi)) / (2.0 * math.pi)
    value = np.ones_like(scaled) if white_valid else scaled
    rgb = _hsv_to_rgb(hue, scaled, value)
    rgb[~valid] = 0.0
    return np.round(rgb * 255.0).astype(np.uint8)


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as a binary P6 portable pixmap."""
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError("expected an (H, W, 3) uint8 array")
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def render_stack(stack: MotionStack, out_prefix,
                 max_magnitude: float | None = None,
                 white_valid: bool = False,
                 steps: list[int] | None = None) -> list[Path]:
    """Render each requested step to `<prefix>_t<step>.ppm` (1-based steps).

    The magnitude clamp defaults to the largest magnitude in the stack
    (or 1.0 for an all-zero field).
    """
    if max_magnitude is None:
        mag = float(np.hypot(stack.steps[..., 0], stack.steps[..., 1]).max())
        max_magnitude = mag if mag > 0 else 1.0
    wanted = steps if steps is not None else list(range(1, stack.t_prime + 1))
    paths = []
    for step in wanted:
        if not (1 <= step <= stack.t_prime):
            raise ValueError(f"step {step} outside 1..{stack.t_prime}")
        rgb = field_to_rgb(stack.steps[step - 1], stack.valid,
                           max_magnitude, white_valid)
        path = Path(f"{out_prefix}_t{step}.ppm")
        write_ppm(path, rgb)
        paths.append(path)
    return paths
