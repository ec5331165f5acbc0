import numpy as np
import pytest

from forestsurvey import world as worldmod


@pytest.fixture(scope="session")
def small_world():
    """20x20 m flat world with a handful of stems, reused across tests."""
    return worldmod.generate_forest(
        extent=(20.0, 20.0), stem_density=150.0, seed=11
    )


@pytest.fixture(scope="session")
def flat_empty_world():
    return worldmod.generate_forest(extent=(30.0, 30.0), stem_density=0.0, seed=3)


def single_tree_world(radius_13=0.15, height=12.0, lean_angle=0.0, lean_dir=0.0,
                      crown_height=None, crown_radius=0.0, extent=(20.0, 20.0),
                      base=(10.0, 10.0)):
    """Flat world holding one stem with an exactly known taper."""
    terrain = worldmod.TerrainField(
        heights=np.zeros((int(extent[1]) + 1, int(extent[0]) + 1)), cell=1.0
    )
    slope = -0.55 * radius_13 / height
    taper_h = np.array([0.0, height])
    taper_r = np.array(
        [radius_13 + slope * (0.0 - 1.3), radius_13 + slope * (height - 1.3)]
    )
    tree = worldmod.TreeSpec(
        tree_id=0,
        base_xy=base,
        height=height,
        taper_h=taper_h,
        taper_r=taper_r,
        lean_dir=lean_dir,
        lean_angle=lean_angle,
        crown_height=crown_height,
        crown_radius=crown_radius,
    )
    return worldmod.ForestWorld(terrain=terrain, trees=[tree], patches=[], seed=0)
