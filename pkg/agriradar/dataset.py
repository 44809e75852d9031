"""Synthetic sequences and prepared training samples, in memory and on disk.

A sequence directory (written by ``simulate``) holds::

    cube_000.scub ...     one spherical cube per frame
    gt_000.txt ...        ground-truth LiDAR cloud per frame, sensor frame
    poses.txt             sensor-to-world pose per frame

A sample directory (written by ``preprocess``) holds the current frame's
network inputs and supervision::

    rcc.svxt  rpc.svxt  stage1_input.svxt
    target_structural.svxt  target_semantic.svxt  gt_labels.svxt
    gt_support.txt        ground truth restricted to the Stage-I support

A data directory is either one such directory or a parent of several.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import Config
from .formats import (
    FormatError,
    read_cube,
    read_point_cloud,
    read_poses,
    read_tensor,
    write_cube,
    write_point_cloud,
    write_poses,
    write_tensor,
)
from .pipeline import ConditionMatrix, apply_modality, build_condition, raw_condition
from .preprocess import StageOneInput, accumulate_frames, assemble_stage1_input, build_rpc
from .radar import SphericalCube, ca_cfar, synthesize_spherical_cube
from .scene_sim import (
    PoseSE3,
    Scene,
    SemanticPointCloud,
    generate_scene,
    generate_trajectory,
    render_lidar,
)
from .sparse_grid import SparseVoxelTensor, to_point_cloud
from .supervision import (
    StageOneTarget,
    StageTwoSample,
    assemble_stage1_target,
    build_semantic_target,
    build_structural_target,
    expand_stage2_sample,
    voxelize_labels,
)

log = logging.getLogger(__name__)

POSES_FILE = "poses.txt"
SAMPLE_MARKER = "stage1_input.svxt"


def subseed(seed: int, *keys: int) -> int:
    """Independent 32-bit seed for a (seed, keys...) path."""
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


@dataclass
class SimulatedSequence:
    scene: Scene
    poses: list[PoseSE3]
    cubes: list[SphericalCube]
    gt_clouds: list[SemanticPointCloud]


@dataclass
class PreparedSample:
    rcc: SparseVoxelTensor
    rpc: SparseVoxelTensor
    stage1_input: StageOneInput
    target: StageOneTarget
    gt_labels: SparseVoxelTensor
    gt_support: SemanticPointCloud


# ---------------------------------------------------------------------------
# In memory
# ---------------------------------------------------------------------------

def simulate_sequence(config: Config, seed: int, threads: int = 1) -> SimulatedSequence:
    """One scene, one trajectory and every frame's cube and ground truth."""
    scene = generate_scene(config.scene, subseed(seed, 0))
    poses = generate_trajectory(config.trajectory, subseed(seed, 1))
    cubes, clouds = [], []
    for k, pose in enumerate(poses):
        cubes.append(synthesize_spherical_cube(scene, pose, config.radar, subseed(seed, 2, k),
                                               threads=threads, frame_index=k))
        clouds.append(render_lidar(scene, pose, config.preprocess.fov, subseed(seed, 3, k)))
    log.info("Simulated %d frames over %d scatterers", len(poses), len(scene))
    return SimulatedSequence(scene, poses, cubes, clouds)


def ground_truth_on_support(gt_labels: SparseVoxelTensor, support: SparseVoxelTensor) -> SemanticPointCloud:
    """Ground-truth voxel centers that fall on ``support``."""
    sample = expand_stage2_sample(gt_labels, support)
    codes = sample.x.argmax(axis=1).astype(np.float64).reshape(-1, 1)
    return to_point_cloud(SparseVoxelTensor(support.spec, support.indices, codes))


def prepare_sample(cubes: Sequence[SphericalCube], poses: Sequence[PoseSE3],
                   gt_cloud: SemanticPointCloud, config: Config, threads: int = 1,
                   rcc: Optional[SparseVoxelTensor] = None) -> PreparedSample:
    """
    Build the Stage-I input and every target for the last frame.

    Args:
        cubes: Spherical cubes, oldest first.
        poses: Matching poses.
        gt_cloud: Current-frame ground truth in the current sensor frame.
        config: Full configuration.
        threads: Worker threads for CFAR and accumulation.
        rcc: Precomputed accumulation (the CLI times it separately).
    """
    pre = config.preprocess
    if rcc is None:
        rcc = accumulate_frames(cubes, poses, pre, threads)
    detections = [ca_cfar(cube, config.cfar, threads) for cube in cubes]
    rpc = build_rpc(detections, poses, pre, config.radar)
    stage1_input = assemble_stage1_input(rcc, rpc)

    structural = build_structural_target(gt_cloud, pre.grid, config.supervision)
    semantic = build_semantic_target(gt_cloud, pre.grid, config.supervision)
    target = assemble_stage1_target(structural, semantic, stage1_input.tensor)
    gt_labels = voxelize_labels(gt_cloud, pre.grid)
    gt_support = ground_truth_on_support(gt_labels, stage1_input.tensor)
    log.info("Prepared sample: %d RCC voxels, %d RPC voxels, %d GT points on support",
             len(rcc), len(rpc), len(gt_support))
    return PreparedSample(rcc, rpc, stage1_input, target, gt_labels, gt_support)


def training_condition(sample: PreparedSample, config: Config) -> ConditionMatrix:
    """Stage-II condition used for training: built from the Stage-I targets."""
    if config.pipeline.bypass_stage1:
        return raw_condition(apply_modality(sample.stage1_input, config.pipeline.input_modality))
    return build_condition(sample.target.y_st, sample.target.y_se, sample.stage1_input)


def stage2_training_sample(sample: PreparedSample, condition: ConditionMatrix) -> StageTwoSample:
    support = SparseVoxelTensor(condition.spec, condition.indices, condition.features)
    return expand_stage2_sample(sample.gt_labels, support)


# ---------------------------------------------------------------------------
# On disk
# ---------------------------------------------------------------------------

def write_sequence(out_dir: Path, sequence: SimulatedSequence) -> list[Path]:
    out_dir = Path(out_dir)
    written = [write_poses(out_dir / POSES_FILE, sequence.poses)]
    for k, (cube, cloud) in enumerate(zip(sequence.cubes, sequence.gt_clouds)):
        written.append(write_cube(out_dir / f"cube_{k:03d}.scub", cube))
        written.append(write_point_cloud(out_dir / f"gt_{k:03d}.txt", cloud))
    return written


def read_sequence(seq_dir: Path) -> tuple[list[SphericalCube], list[PoseSE3], SemanticPointCloud]:
    """
    Cubes, poses and the last frame's ground truth of a sequence directory.

    Raises:
        FormatError: If files are missing or inconsistent.
    """
    seq_dir = Path(seq_dir)
    cube_paths = sorted(seq_dir.glob("cube_*.scub"))
    gt_paths = sorted(seq_dir.glob("gt_*.txt"))
    if not cube_paths:
        raise FormatError(f"No cube files in {seq_dir}")
    if len(gt_paths) != len(cube_paths):
        raise FormatError(f"{seq_dir} has {len(cube_paths)} cubes but {len(gt_paths)} GT clouds")
    poses = read_poses(seq_dir / POSES_FILE)
    if len(poses) != len(cube_paths):
        raise FormatError(f"{seq_dir} has {len(cube_paths)} cubes but {len(poses)} poses")
    cubes = [read_cube(p) for p in cube_paths]
    return cubes, poses, read_point_cloud(gt_paths[-1])


def write_sample(out_dir: Path, sample: PreparedSample) -> list[Path]:
    out_dir = Path(out_dir)
    t = sample.target
    return [
        write_tensor(out_dir / "rcc.svxt", sample.rcc),
        write_tensor(out_dir / "rpc.svxt", sample.rpc),
        write_tensor(out_dir / SAMPLE_MARKER, sample.stage1_input.tensor),
        write_tensor(out_dir / "target_structural.svxt", SparseVoxelTensor(t.spec, t.indices, t.y_st)),
        write_tensor(out_dir / "target_semantic.svxt", SparseVoxelTensor(t.spec, t.indices, t.y_se)),
        write_tensor(out_dir / "gt_labels.svxt", sample.gt_labels),
        write_point_cloud(out_dir / "gt_support.txt", sample.gt_support),
    ]


def read_sample(sample_dir: Path) -> PreparedSample:
    sample_dir = Path(sample_dir)
    structural = read_tensor(sample_dir / "target_structural.svxt")
    semantic = read_tensor(sample_dir / "target_semantic.svxt")
    try:
        stage1_input = StageOneInput(read_tensor(sample_dir / SAMPLE_MARKER))
        target = StageOneTarget(structural.spec, structural.indices, structural.features, semantic.features)
    except Exception as e:
        raise FormatError(f"Invalid sample in {sample_dir}: {e}") from e
    return PreparedSample(
        rcc=read_tensor(sample_dir / "rcc.svxt"),
        rpc=read_tensor(sample_dir / "rpc.svxt"),
        stage1_input=stage1_input,
        target=target,
        gt_labels=read_tensor(sample_dir / "gt_labels.svxt"),
        gt_support=read_point_cloud(sample_dir / "gt_support.txt"),
    )


def find_dirs(root: Path, marker: str) -> list[Path]:
    """``root`` itself if it contains ``marker``, else its sorted children that do."""
    root = Path(root)
    if not root.is_dir():
        raise FormatError(f"Not a directory: {root}")
    if list(root.glob(marker)):
        return [root]
    found = sorted(p for p in root.iterdir() if p.is_dir() and list(p.glob(marker)))
    if not found:
        raise FormatError(f"No data matching {marker} under {root}")
    return found


def load_samples(data_dir: Path) -> list[tuple[Path, PreparedSample]]:
    return [(d, read_sample(d)) for d in find_dirs(data_dir, SAMPLE_MARKER)]
