import numpy as np
import pytest

from bevmotion.core import Config, FORWARD, GridSpec, MotionStack


@pytest.fixture
def cfg():
    return Config()


@pytest.fixture
def small_grid():
    # 16 x 16 cells, one z channel
    return GridSpec(x_range=(-2.0, 2.0), y_range=(-2.0, 2.0),
                    z_range=(0.0, 0.4), voxel_xy=0.25, voxel_z=0.4)


def make_stack(grid, indices, values, direction=FORWARD, t_prime=None):
    """Dense MotionStack from (N, 2) indices and (T', N, 2) values."""
    values = np.asarray(values, dtype=np.float64)
    if t_prime is None:
        t_prime = values.shape[0]
    mask = np.zeros((grid.H, grid.W), dtype=bool)
    idx = np.asarray(indices, dtype=np.int64)
    mask[idx[:, 0], idx[:, 1]] = True
    stack = MotionStack.zeros(grid, t_prime, direction, mask)
    stack.set_cells(idx, values)
    return stack
