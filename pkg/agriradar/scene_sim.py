"""Procedural agricultural scenes, drone trajectories and ground-truth LiDAR clouds.

Scenes are collections of point scatterers (position, radar cross section,
semantic class) inside an axis-aligned box. The generator places a jittered
ground lattice, ellipsoidal tree canopies, vertical poles on a power line, and
wires hanging between consecutive pole tops with a small sag.

Frame convention: the sensor frame has x forward, y left and z up. A pose maps
sensor coordinates to world coordinates, ``world = R @ p + t``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import AgriRadarError, ConfigError

log = logging.getLogger(__name__)


class SceneError(AgriRadarError):
    """Raised when a scene cannot be generated from its configuration."""
    pass


class ClassLabel(IntEnum):
    """Semantic classes. Codes are stable on disk; larger code = rarer class."""
    FREE = 0
    GROUND = 1
    TREE = 2
    POLE = 3
    WIRE = 4


NUM_CLASSES = len(ClassLabel)
OCCUPIED_CLASSES = (ClassLabel.GROUND, ClassLabel.TREE, ClassLabel.POLE, ClassLabel.WIRE)


# ---------------------------------------------------------------------------
# Geometry types
# ---------------------------------------------------------------------------

def yaw_rotation(yaw: float) -> np.ndarray:
    """Rotation about +z by ``yaw`` radians."""
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """Rigid sensor-to-world transform at a timestamp."""
    rotation: np.ndarray
    translation: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self) -> None:
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(rotation.T @ rotation, np.eye(3), atol=1e-9):
            raise SceneError("Pose rotation is not orthonormal")
        if np.linalg.det(rotation) <= 0.0:
            raise SceneError("Pose rotation has negative determinant")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls, timestamp: float = 0.0) -> PoseSE3:
        return cls(np.eye(3), np.zeros(3), timestamp)

    def matrix(self) -> np.ndarray:
        """Homogeneous 4x4 form."""
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def to_sensor(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def same_placement(self, other: PoseSE3) -> bool:
        """True when rotation and translation match exactly (timestamps ignored)."""
        return bool(
            np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )


@dataclass(frozen=True, eq=False)
class SemanticPointCloud:
    """N labeled points in meters."""
    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(points) != len(labels):
            raise SceneError(
                f"Point cloud has {len(points)} points but {len(labels)} labels"
            )
        if np.isnan(points).any():
            raise SceneError("Point cloud contains NaN coordinates")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def empty(cls) -> SemanticPointCloud:
        return cls(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.points)

    def select(self, mask: np.ndarray) -> SemanticPointCloud:
        return SemanticPointCloud(self.points[mask], self.labels[mask])

    def with_label(self, label: int) -> SemanticPointCloud:
        return self.select(self.labels == int(label))


@dataclass(frozen=True, eq=False)
class Scene:
    """Point scatterers stored column-wise: positions (N, 3), rcs (N,), labels (N,)."""
    positions: np.ndarray
    rcs: np.ndarray
    labels: np.ndarray
    extent_min: tuple[float, float, float]
    extent_max: tuple[float, float, float]

    def __len__(self) -> int:
        return len(self.positions)

    def point_cloud(self) -> SemanticPointCloud:
        return SemanticPointCloud(self.positions, self.labels)

    def select(self, mask: np.ndarray) -> Scene:
        return Scene(self.positions[mask], self.rcs[mask], self.labels[mask],
                     self.extent_min, self.extent_max)

    @staticmethod
    def merge(a: Scene, b: Scene) -> Scene:
        lo = tuple(np.minimum(a.extent_min, b.extent_min).tolist())
        hi = tuple(np.maximum(a.extent_max, b.extent_max).tolist())
        return Scene(
            np.concatenate([a.positions, b.positions]),
            np.concatenate([a.rcs, b.rcs]),
            np.concatenate([a.labels, b.labels]),
            lo, hi,
        )


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class SceneConfig:
    """Scene content. Lengths in meters, densities in scatterers per meter."""
    extent_min: tuple[float, float, float] = (0.0, -25.0, -1.0)
    extent_max: tuple[float, float, float] = (90.0, 25.0, 15.0)
    ground: bool = True
    ground_spacing: float = 1.0
    ground_roughness: float = 0.05
    tree_count: int = 10
    tree_radius: tuple[float, float] = (1.2, 2.5)
    tree_height: tuple[float, float] = (3.0, 6.0)
    tree_points: int = 80
    pole_count: int = 5
    pole_height: float = 8.0
    pole_line_y: float = 6.0
    pole_density: float = 4.0
    wire_count: int = 2
    wire_density: float = 5.0
    wire_sag: float = 0.3
    wire_spacing: float = 0.8
    rcs_ground: float = 1.0
    rcs_tree: float = 0.5
    rcs_pole: float = 0.3
    rcs_wire: float = 0.05

    def validate(self) -> None:
        lo = np.asarray(self.extent_min, dtype=float)
        hi = np.asarray(self.extent_max, dtype=float)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ConfigError("scene extents must have three components")
        if np.any(hi <= lo):
            raise ConfigError("scene extent must be positive along every axis")
        for name in ("ground_spacing", "pole_density", "wire_density"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"scene.{name} must be positive")
        for name in ("tree_count", "tree_points", "pole_count", "wire_count",
                     "ground_roughness", "wire_sag", "wire_spacing"):
            if getattr(self, name) < 0:
                raise ConfigError(f"scene.{name} must be non-negative")
        if self.tree_radius[0] <= 0 or self.tree_radius[1] < self.tree_radius[0]:
            raise ConfigError("scene.tree_radius must be an increasing positive range")
        if self.tree_height[0] < 0 or self.tree_height[1] < self.tree_height[0]:
            raise ConfigError("scene.tree_height must be an increasing range")
        for name in ("rcs_ground", "rcs_tree", "rcs_pole", "rcs_wire"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"scene.{name} must be positive")


@dataclass
class TrajectoryConfig:
    """Forward flight at constant speed with a smoothly varying, bounded yaw rate."""
    frame_count: int = 5
    frame_period: float = 0.2
    start: tuple[float, float, float] = (0.0, 0.0, 4.0)
    initial_yaw: float = 0.0
    speed: float = 3.0
    yaw_rate_max: float = 0.1

    def validate(self) -> None:
        if self.frame_count < 1:
            raise ConfigError("trajectory.frame_count must be at least 1")
        if self.frame_period <= 0:
            raise ConfigError("trajectory.frame_period must be positive")
        if self.speed < 0 or self.yaw_rate_max < 0:
            raise ConfigError("trajectory.speed and yaw_rate_max must be non-negative")


@dataclass
class FovConfig:
    """Sensor frustum in spherical coordinates (angles in degrees)."""
    range_m: tuple[float, float] = (4.0, 40.0)
    elevation_deg: tuple[float, float] = (-45.0, 45.0)
    azimuth_deg: tuple[float, float] = (-25.0, 25.0)
    lidar_jitter: float = 0.02

    def validate(self) -> None:
        for name in ("range_m", "elevation_deg", "azimuth_deg"):
            lo, hi = getattr(self, name)
            if hi <= lo:
                raise ConfigError(f"fov.{name} must be an increasing range")
        if self.range_m[0] < 0:
            raise ConfigError("fov.range_m must be non-negative")
        if self.lidar_jitter < 0:
            raise ConfigError("fov.lidar_jitter must be non-negative")

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of sensor-frame points inside the frustum."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        x, y, z = points[:, 0], points[:, 1], points[:, 2]
        r = np.sqrt(x * x + y * y + z * z)
        with np.errstate(invalid="ignore", divide="ignore"):
            el = np.degrees(np.arcsin(np.clip(z / r, -1.0, 1.0)))
        az = np.degrees(np.arctan2(y, x))
        return (
            (r >= self.range_m[0]) & (r <= self.range_m[1])
            & (el >= self.elevation_deg[0]) & (el <= self.elevation_deg[1])
            & (az >= self.azimuth_deg[0]) & (az <= self.azimuth_deg[1])
            & (r > 0)
        )


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------

def _pole_positions(config: SceneConfig) -> np.ndarray:
    """Evenly spaced pole footprints along a line parallel to x."""
    lo, hi = config.extent_min, config.extent_max
    span = hi[0] - lo[0]
    xs = lo[0] + span * (np.arange(config.pole_count) + 0.5) / config.pole_count
    return np.column_stack([xs, np.full(config.pole_count, config.pole_line_y)])


def _check_capacity(config: SceneConfig) -> None:
    lo = np.asarray(config.extent_min, dtype=float)
    hi = np.asarray(config.extent_max, dtype=float)
    size = hi - lo
    if config.tree_count > 0:
        r = config.tree_radius[1]
        top = config.tree_height[1] + 2.0 * r
        if size[0] < 2 * r or size[1] < 2 * r or hi[2] < top or lo[2] > 0.0:
            raise SceneError("Scene extent cannot contain a tree of the configured size")
    if config.pole_count > 0:
        if hi[2] < config.pole_height or lo[2] > 0.0:
            raise SceneError("Scene extent is lower than the configured pole height")
        if not lo[1] <= config.pole_line_y <= hi[1]:
            raise SceneError("Pole line lies outside the scene extent")
    if config.wire_count > 0:
        if config.pole_count < 2:
            raise SceneError("Wires need at least two poles to hang between")
        half = 0.5 * config.wire_spacing * (config.wire_count - 1)
        if not lo[1] <= config.pole_line_y - half <= config.pole_line_y + half <= hi[1]:
            raise SceneError("Wire bundle is wider than the scene extent")
        if config.pole_height - config.wire_sag < lo[2]:
            raise SceneError("Wire sag reaches below the scene extent")


def _ground(config: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    lo, hi, step = config.extent_min, config.extent_max, config.ground_spacing
    xs = np.arange(lo[0] + 0.5 * step, hi[0], step)
    ys = np.arange(lo[1] + 0.5 * step, hi[1], step)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    n = gx.size
    jitter = rng.uniform(-0.25 * step, 0.25 * step, size=(n, 2))
    z = config.ground_roughness * rng.standard_normal(n)
    pts = np.column_stack([gx.ravel() + jitter[:, 0], gy.ravel() + jitter[:, 1], z])
    return np.clip(pts, lo, hi)


def _trees(config: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    lo, hi = config.extent_min, config.extent_max
    blobs = []
    for _ in range(config.tree_count):
        radius = rng.uniform(*config.tree_radius)
        height = rng.uniform(*config.tree_height)
        cx = rng.uniform(lo[0] + radius, hi[0] - radius)
        cy = rng.uniform(lo[1] + radius, hi[1] - radius)
        cz = height + radius
        radii = np.array([radius, radius, radius * rng.uniform(0.8, 1.2)])
        # uniform samples inside the unit ball, stretched to the ellipsoid
        direction = rng.standard_normal((config.tree_points, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        scale = rng.uniform(0.0, 1.0, config.tree_points) ** (1.0 / 3.0)
        blobs.append(np.array([cx, cy, cz]) + direction * scale[:, None] * radii)
    if not blobs:
        return np.zeros((0, 3))
    return np.clip(np.concatenate(blobs), lo, hi)


def _poles(config: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    if config.pole_count == 0:
        return np.zeros((0, 3))
    n_per_pole = max(2, int(round(config.pole_height * config.pole_density)) + 1)
    zs = np.linspace(0.0, config.pole_height, n_per_pole)
    feet = _pole_positions(config)
    pts = [np.column_stack([np.full(n_per_pole, fx), np.full(n_per_pole, fy), zs])
           for fx, fy in feet]
    return np.concatenate(pts)


def _wires(config: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    if config.wire_count == 0:
        return np.zeros((0, 3))
    feet = _pole_positions(config)
    top = config.pole_height
    offsets = (np.arange(config.wire_count) - 0.5 * (config.wire_count - 1)) * config.wire_spacing
    pts = []
    for a, b in zip(feet[:-1], feet[1:]):
        length = float(np.linalg.norm(b - a))
        n = max(2, int(round(length * config.wire_density)))
        u = rng.uniform(0.0, 1.0, n)
        # parabolic approximation of the catenary, zero sag at both pole tops
        z = top - config.wire_sag * 4.0 * u * (1.0 - u)
        x = a[0] + u * (b[0] - a[0])
        for dy in offsets:
            y = a[1] + u * (b[1] - a[1]) + dy
            pts.append(np.column_stack([x, y, z]))
    return np.concatenate(pts)


def generate_scene(config: SceneConfig, seed: int) -> Scene:
    """
    Generate a deterministic synthetic field scene.

    Args:
        config: Scene content description.
        seed: Seed for the generator; equal (config, seed) give equal scenes.

    Returns:
        The generated scene. Every scatterer class is non-free and every
        position lies inside the configured extent.

    Raises:
        ConfigError: If the configuration values are invalid.
        SceneError: If the extent cannot contain a requested feature.
    """
    config.validate()
    _check_capacity(config)
    rng = np.random.default_rng(seed)

    parts = []
    if config.ground:
        parts.append((_ground(config, rng), ClassLabel.GROUND, config.rcs_ground))
    parts.append((_trees(config, rng), ClassLabel.TREE, config.rcs_tree))
    parts.append((_poles(config, rng), ClassLabel.POLE, config.rcs_pole))
    parts.append((_wires(config, rng), ClassLabel.WIRE, config.rcs_wire))

    positions = np.concatenate([p for p, _, _ in parts]) if parts else np.zeros((0, 3))
    labels = np.concatenate([np.full(len(p), int(c), dtype=np.int64) for p, c, _ in parts])
    rcs = np.concatenate([np.full(len(p), r, dtype=np.float64) for p, _, r in parts])

    log.debug("Generated scene with %d scatterers (seed %d)", len(positions), seed)
    return Scene(positions, rcs, labels,
                 tuple(float(v) for v in config.extent_min),
                 tuple(float(v) for v in config.extent_max))


def pole_tops(config: SceneConfig) -> np.ndarray:
    """World coordinates of the pole tops the wires hang from."""
    feet = _pole_positions(config)
    return np.column_stack([feet, np.full(len(feet), config.pole_height)])


# ---------------------------------------------------------------------------
# Trajectory and LiDAR
# ---------------------------------------------------------------------------

def generate_trajectory(config: TrajectoryConfig, seed: int) -> list[PoseSE3]:
    """
    Generate a smooth forward path.

    The yaw rate follows a sinusoid with a seeded phase and frequency, bounded
    by ``yaw_rate_max``. Every step moves exactly ``speed * frame_period``
    meters along the current heading at constant altitude.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    omega = rng.uniform(0.2, 1.0)
    dt = config.frame_period
    step = config.speed * dt

    position = np.asarray(config.start, dtype=np.float64).copy()
    yaw = config.initial_yaw
    poses = []
    for i in range(config.frame_count):
        poses.append(PoseSE3(yaw_rotation(yaw), position.copy(), i * dt))
        heading = np.array([math.cos(yaw), math.sin(yaw), 0.0])
        position = position + step * heading
        yaw += config.yaw_rate_max * math.sin(phase + omega * i * dt) * dt
    return poses


def render_lidar(scene: Scene, pose: PoseSE3, fov: FovConfig, seed: int) -> SemanticPointCloud:
    """
    Sample the scene as a ground-truth LiDAR cloud in the sensor frame.

    Each coordinate receives a normal jitter with standard deviation
    ``fov.lidar_jitter / 2`` clipped to ``±fov.lidar_jitter``. Points outside
    the frustum after jittering are dropped, so the output always passes
    ``fov.contains``. Occlusion is not modeled.
    """
    fov.validate()
    local = pose.to_sensor(scene.positions)
    if fov.lidar_jitter > 0 and len(local):
        rng = np.random.default_rng(seed)
        noise = rng.normal(0.0, 0.5 * fov.lidar_jitter, size=local.shape)
        local = local + np.clip(noise, -fov.lidar_jitter, fov.lidar_jitter)
    keep = fov.contains(local)
    return SemanticPointCloud(local[keep], scene.labels[keep])
