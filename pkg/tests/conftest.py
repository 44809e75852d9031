"""Shared fixtures: small grids, radars and scenes that keep the suite fast."""

import numpy as np
import pytest

from agriradar.config import Config
from agriradar.preprocess import PreprocessConfig
from agriradar.radar import CfarConfig, RadarConfig
from agriradar.scene_sim import ClassLabel, FovConfig, PoseSE3, Scene, SceneConfig, TrajectoryConfig
from agriradar.sparse_grid import GridSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_grid():
    return GridSpec(dims=(32, 40, 32), lower=(4.0, -10.0, -10.0), upper=(20.0, 10.0, 6.0))


@pytest.fixture
def small_radar():
    return RadarConfig(
        num_azimuth_elements=8,
        num_elevation_elements=8,
        noise_floor=0.0,
        dims=(40, 24, 32),
        range_m=(4.0, 20.0),
        elevation_deg=(-30.0, 30.0),
        azimuth_deg=(-25.0, 25.0),
    )


@pytest.fixture
def small_fov():
    return FovConfig(range_m=(4.0, 20.0), elevation_deg=(-30.0, 30.0),
                     azimuth_deg=(-25.0, 25.0), lidar_jitter=0.02)


@pytest.fixture
def small_scene_config():
    return SceneConfig(
        extent_min=(0.0, -10.0, -1.0),
        extent_max=(30.0, 10.0, 12.0),
        ground_spacing=1.0,
        tree_count=2,
        tree_radius=(1.0, 1.5),
        tree_height=(2.0, 3.0),
        tree_points=30,
        pole_count=3,
        pole_height=6.0,
        pole_line_y=3.0,
        wire_count=2,
        wire_spacing=0.5,
    )


@pytest.fixture
def small_config(small_scene_config, small_radar, small_grid, small_fov):
    """Full config scaled down for end-to-end runs in a few seconds."""
    config = Config()
    config.scene = small_scene_config
    config.trajectory = TrajectoryConfig(frame_count=3, start=(0.0, 0.0, 3.0), speed=2.0)
    config.radar = small_radar
    config.radar.noise_floor = 1e-9
    config.cfar = CfarConfig(guard=(1, 1, 1), training=(3, 3, 3), pfa=1e-3)
    config.preprocess = PreprocessConfig(frames=3, q_th=5.0, final_q_th=2.0,
                                         grid=small_grid, fov=small_fov)
    config.stage1.epochs = 20
    config.stage2.steps = 20
    config.stage2.batch_size = 64
    config.distill.steps = 20
    config.distill.batch_size = 64
    config.schedule.n_steps = 6
    config.validate()
    return config


def make_scene(points, labels=None, rcs=None) -> Scene:
    """Scene from explicit scatterer positions (world frame)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(points)
    if labels is None:
        labels = np.full(n, int(ClassLabel.POLE))
    if rcs is None:
        rcs = np.ones(n)
    lo = tuple((points.min(axis=0) - 1.0).tolist()) if n else (0.0, 0.0, 0.0)
    hi = tuple((points.max(axis=0) + 1.0).tolist()) if n else (1.0, 1.0, 1.0)
    return Scene(points, np.asarray(rcs, float), np.asarray(labels, np.int64), lo, hi)


@pytest.fixture
def identity_pose():
    return PoseSE3.identity()
