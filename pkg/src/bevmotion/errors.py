"""Exception hierarchy for bevmotion."""


class BevMotionError(Exception):
    """Base class for all bevmotion errors."""


class ConfigError(BevMotionError):
    """Invalid configuration; carries the list of offending field names."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config: " + "; ".join(self.problems))


class GridError(BevMotionError):
    """Grid specification whose ranges and voxel sizes do not line up."""


class SceneError(BevMotionError):
    """Degenerate or inconsistent scene data."""


class TransportError(BevMotionError):
    """Optimal-transport solve failed (empty cell set, NaN, bad shapes)."""


class OptimizationError(BevMotionError):
    """Per-scene optimization aborted (NaN gradients, bad state)."""


class ArchiveError(BevMotionError):
    """Malformed scene archive or field file."""


class EvalError(BevMotionError):
    """Evaluation inputs do not match (missing GT, grid mismatch)."""
