"""
Test fixtures and configuration for the WGICP odometry toolkit
Seeded synthetic scenes, registration pairs and mini KITTI sequences
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to path so imports work
sys.path.insert(0, str(Path(__file__).parent.parent))

from src.tools.covariance_tools import estimate_covariances
from src.tools.synthetic_tools import make_pair, make_sequence, make_scene, transform_from, write_sequence
from src.utils.cloud_cache import clear_cache


@pytest.fixture(autouse=True)
def cleanup_cache():
    """Clear the preprocessing cache after each test to prevent interference"""
    yield
    clear_cache()


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def scene(rng):
    """1000-point synthetic scene without covariances"""
    return make_scene(rng, 1000)


@pytest.fixture
def known_motion():
    """10 degrees about a tilted axis plus 0.3 m"""
    return transform_from(10.0, axis=(0.2, -0.3, 1.0), translation=(0.2, -0.15, 0.15))


@pytest.fixture
def motion_pair(rng, known_motion):
    """(source, target, gt) for a noiseless 500-point pair, covariances attached"""
    source, target = make_pair(rng, known_motion, n_points=500)
    return estimate_covariances(source), estimate_covariances(target), known_motion


@pytest.fixture
def forward_step():
    """Constant sensor motion between frames: 0.5 m forward, 1 degree yaw"""
    return transform_from(1.0, axis=(0.0, 0.0, 1.0), translation=(0.5, 0.0, 0.0))


def _write(tmp_path, name, n_frames, step, seed=7):
    gen = np.random.default_rng(seed)
    sequence = make_sequence(gen, n_frames, step, sensor_range=8.0, density=10.0)
    return write_sequence(tmp_path / name, sequence, gen), sequence


@pytest.fixture
def mini_sequence(tmp_path, forward_step):
    """2-frame KITTI-style sequence directory (velodyne/, calib.txt, poses.txt)"""
    root, _ = _write(tmp_path, "seq02", 2, forward_step)
    return root


@pytest.fixture
def ten_frame_sequence(tmp_path, forward_step):
    """10-frame KITTI-style sequence directory and its generating SyntheticSequence"""
    return _write(tmp_path, "seq10", 10, forward_step)
