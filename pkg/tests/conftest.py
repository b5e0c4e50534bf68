import numpy as np
import pytest

from posefuse.geometry import CameraIntrinsics, PoseSet, Sim3
from posefuse.splatrender import SplatCloud
from posefuse.synth import gen_object, look_at, sample_hemisphere_cameras


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def intr64():
    return CameraIntrinsics.from_fov(64, 64, 45.0)


@pytest.fixture(scope="session")
def small_cloud():
    """A few hundred splats; small enough for finite differences."""
    return gen_object(7, 300)


@pytest.fixture(scope="session")
def ring(intr64):
    """Twelve cameras on a hemisphere, all looking at the origin."""
    return sample_hemisphere_cameras(12, 3.0, intr64, seed=3)


@pytest.fixture(scope="session")
def front_camera(intr64):
    return look_at(np.array([0.0, -3.0, 0.5]), intr64, "front")


def random_sim3(seed, scale_range=(0.5, 2.0), max_translation=1.0):
    return Sim3.random(seed, scale_range, max_translation)


def single_splat(position, sigma=0.05, color=(1.0, 0.0, 0.0), opacity=0.99):
    return SplatCloud([position], [sigma], [color], [opacity])


def as_pose_set(label, poses):
    return PoseSet(label, tuple(poses))


@pytest.fixture(scope="session")
def tiny_dataset():
    """Two captures of 30 views at 64 px, exact observations."""
    from posefuse.synth import SynthConfig, make_dataset
    return make_dataset(SynthConfig(seed=0, n_splats=400, views_per_pose=30, resolution=64).noiseless())


@pytest.fixture(scope="session")
def default_dataset():
    """The default two-capture dataset (150 views per capture, 128 px), exact observations."""
    from posefuse.synth import SynthConfig, make_dataset
    return make_dataset(SynthConfig(seed=0).noiseless())


# -- acceptance summary ----------------------------------------------------

_ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def acceptance_line():
    """Record the one-line verdict of an acceptance criterion."""
    def record(key, passed, detail):
        _ACCEPTANCE_LINES[key] = f"{key}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(_ACCEPTANCE_LINES[key])
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_ACCEPTANCE_LINES, key=lambda k: int(k[1:].split()[0])):
            terminalreporter.write_line(_ACCEPTANCE_LINES[key])
