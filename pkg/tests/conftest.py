import numpy as np
import pytest

from rangefuse.geometry import Pose
from rangefuse.rangeview import RvGeometry
from rangefuse.simkit import ActorSpec, Scenario, generate_scenario

SMALL = RvGeometry.from_degrees(16, 64, -30.0, 10.0)


def random_pose(rng: np.random.Generator, scale: float = 20.0) -> Pose:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    rot = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    return Pose(rot, rng.uniform(-scale, scale, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_geometry():
    return SMALL


@pytest.fixture(scope="session")
def moving_log():
    """Six sweeps of a 32x128 scene with a moving ego and two moving actors."""
    g = RvGeometry.from_degrees(32, 128, -30.0, 10.0)
    sc = Scenario(duration=0.6, ego_speed=8.0, ego_yaw_rate=0.05, geometry=g,
                  actors=(ActorSpec(x=12.0, y=3.0, theta=0.2, speed=6.0),
                          ActorSpec(x=-9.0, y=-6.0, theta=1.5, motion="ctr", speed=4.0, yaw_rate=0.2)))
    return generate_scenario(sc, 6)
