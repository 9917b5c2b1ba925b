import numpy as np
import pytest

from tinker3d import synth_world as sw


@pytest.fixture
def square_pose():
    return sw.canonical_pose((32, 32))


@pytest.fixture
def cool_shift():
    """Global color edit that never clamps on [0,1] scene colors."""
    return sw.EditSpec(
        kind=sw.EDIT_GLOBAL,
        color_matrix=((0.7, 0.0, 0.0), (0.0, 0.85, 0.0), (0.0, 0.0, 0.6)),
        color_offset=(0.0, 0.05, 0.35),
    )


def full_frame_scene(color=(0.2, 0.4, 0.6), depth=2.0):
    """One billboard wide enough to cover the whole canonical frustum."""
    return sw.Scene(
        objects=(
            sw.Billboard(
                center=(0.0, 0.0),
                half_extent=(2.0 * depth, 2.0 * depth),
                depth=depth,
                color=color,
            ),
        ),
        background_color=(1.0, 1.0, 1.0),
        seed=0,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(0)
