import numpy as np
import pytest
import torch

from srusloc.grid import GridSpec
from srusloc import fieldsim as fs

torch.set_num_threads(1)


@pytest.fixture
def grid64():
    return GridSpec(width_px=64, height_px=64)


@pytest.fixture
def grid_default():
    return GridSpec()


@pytest.fixture
def scene64(grid64):
    cfg = fs.SceneConfig(field_width_um=grid64.width_um,
                         field_height_um=grid64.height_um,
                         mean_mb_per_frame=4, n_frames=12,
                         tissue_per_mm2=60.0)
    return fs.gen_scene(7, cfg)


def random_positions(rng, grid, n):
    xs = rng.uniform(0, grid.width_um, n)
    zs = rng.uniform(0, grid.height_um, n)
    return list(zip(xs, zs))
