"""Binary and text file formats.

Binary files start with a little-endian header:

    [4 bytes: magic]
    [2 bytes: format version]
    [format-specific header fields]
    [row-major payload]

Spherical cube (``SCUB``):
    u32 x3 dims, f64 x6 extents (range m, elevation deg, azimuth deg),
    32-byte radar config digest, u32 frame index, u32 config JSON length,
    config JSON, float32 power payload.

Sparse voxel tensor (``SVXT``):
    u32 x3 dims, f64 x6 extents (lower, upper), u64 rows M, u32 channels C,
    u32 x3M indices, float32 xCM features.

Model parameters (``AGRM``):
    u32 kind length, u32 JSON length, u64 parameter count, kind string,
    hyper-parameter JSON (including parameter names and shapes), float32
    parameter block.

Text files:
    point cloud: ``# x y z label`` then one point per line
    poses: ``# timestamp tx ty tz r00 r01 r02 r10 r11 r12 r20 r21 r22``
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Union

import numpy as np

from .diffusion import ConsistencyModel
from .errors import AgriRadarError
from .models import ReferencePredictor, ResidualDenoiser, Stage2ModelConfig
from .radar import RadarConfig, RadarError, SphericalCube
from .scene_sim import PoseSE3, SceneError, SemanticPointCloud
from .sparse_grid import GridSpec, SparseVoxelTensor

log = logging.getLogger(__name__)

FORMAT_VERSION = 1

CUBE_MAGIC = b"SCUB"
TENSOR_MAGIC = b"SVXT"
MODEL_MAGIC = b"AGRM"

PREAMBLE = struct.Struct("<4sH")
CUBE_HEADER = struct.Struct("<4sH3I6d32sII")
TENSOR_HEADER = struct.Struct("<4sH3I6dQI")
MODEL_HEADER = struct.Struct("<4sHIIQ")

POINT_CLOUD_HEADER = "# x y z label"
POSE_HEADER = "# timestamp tx ty tz r00 r01 r02 r10 r11 r12 r20 r21 r22"

PathLike = Union[str, Path]
Model = Union[ReferencePredictor, ResidualDenoiser, ConsistencyModel]


class FormatError(AgriRadarError):
    """Raised when a file cannot be encoded or decoded."""
    pass


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _read_bytes(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"Failed to read {path}: {e}") from e


def _write_bytes(path: PathLike, data: bytes) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as e:
        raise FormatError(f"Failed to write {path}: {e}") from e
    return path


def _check_preamble(data: bytes, magic: bytes, header: struct.Struct) -> tuple:
    if len(data) < header.size:
        raise FormatError(f"Header too short: expected {header.size} bytes, got {len(data)}")
    try:
        fields = header.unpack_from(data)
    except struct.error as e:
        raise FormatError(f"Failed to decode header: {e}") from e
    if fields[0] != magic:
        raise FormatError(f"Bad magic: expected {magic!r}, got {fields[0]!r}")
    if fields[1] != FORMAT_VERSION:
        raise FormatError(f"Unsupported format version {fields[1]}")
    return fields


def _payload(data: bytes, offset: int, dtype, count: int) -> np.ndarray:
    size = np.dtype(dtype).itemsize * count
    if len(data) - offset < size:
        raise FormatError(f"Payload truncated: expected {size} bytes, got {len(data) - offset}")
    return np.frombuffer(data, dtype=dtype, count=count, offset=offset).copy()


def _tuples(value):
    """JSON lists back to tuples, recursively."""
    if isinstance(value, list):
        return tuple(_tuples(v) for v in value)
    if isinstance(value, dict):
        return {k: _tuples(v) for k, v in value.items()}
    return value


def read_magic(path: PathLike) -> bytes:
    """The 4-byte magic of a binary file."""
    data = _read_bytes(path)[:PREAMBLE.size]
    if len(data) < PREAMBLE.size:
        raise FormatError(f"{path} is too short to be an agriradar file")
    return PREAMBLE.unpack(data)[0]


# ---------------------------------------------------------------------------
# Spherical cubes
# ---------------------------------------------------------------------------

def encode_cube(cube: SphericalCube) -> bytes:
    config = cube.config
    try:
        blob = json.dumps(asdict(config), sort_keys=True).encode("utf-8")
        header = CUBE_HEADER.pack(
            CUBE_MAGIC, FORMAT_VERSION, *config.dims,
            *config.range_m, *config.elevation_deg, *config.azimuth_deg,
            config.digest(), cube.frame_index, len(blob),
        )
    except (struct.error, TypeError) as e:
        raise FormatError(f"Failed to encode cube: {e}") from e
    return header + blob + np.ascontiguousarray(cube.power, dtype="<f4").tobytes()


def decode_cube(data: bytes) -> SphericalCube:
    """
    Decode a spherical cube.

    Raises:
        FormatError: On a bad header, a digest mismatch or a truncated payload.
    """
    fields = _check_preamble(data, CUBE_MAGIC, CUBE_HEADER)
    dims = fields[2:5]
    digest, frame_index, blob_len = fields[11:14]
    offset = CUBE_HEADER.size
    try:
        config = RadarConfig(**_tuples(json.loads(data[offset:offset + blob_len])))
    except (ValueError, TypeError) as e:
        raise FormatError(f"Failed to decode radar config: {e}") from e
    if config.digest() != digest:
        raise FormatError("Radar config digest does not match the cube header")
    if tuple(config.dims) != tuple(dims):
        raise FormatError(f"Cube dims {dims} disagree with the embedded config")
    power = _payload(data, offset + blob_len, "<f4", int(np.prod(dims)))
    try:
        return SphericalCube(power.reshape(dims), config, frame_index)
    except RadarError as e:
        raise FormatError(f"Invalid cube payload: {e}") from e


def write_cube(path: PathLike, cube: SphericalCube) -> Path:
    return _write_bytes(path, encode_cube(cube))


def read_cube(path: PathLike) -> SphericalCube:
    return decode_cube(_read_bytes(path))


# ---------------------------------------------------------------------------
# Sparse voxel tensors
# ---------------------------------------------------------------------------

def encode_tensor(tensor: SparseVoxelTensor) -> bytes:
    spec = tensor.spec
    try:
        header = TENSOR_HEADER.pack(
            TENSOR_MAGIC, FORMAT_VERSION, *spec.dims, *spec.lower, *spec.upper,
            len(tensor), tensor.channels,
        )
    except struct.error as e:
        raise FormatError(f"Failed to encode tensor header: {e}") from e
    indices = np.ascontiguousarray(tensor.indices, dtype="<u4").tobytes()
    features = np.ascontiguousarray(tensor.features, dtype="<f4").tobytes()
    return header + indices + features


def decode_tensor(data: bytes) -> SparseVoxelTensor:
    fields = _check_preamble(data, TENSOR_MAGIC, TENSOR_HEADER)
    dims = tuple(int(d) for d in fields[2:5])
    lower, upper = tuple(fields[5:8]), tuple(fields[8:11])
    rows, channels = fields[11], fields[12]
    offset = TENSOR_HEADER.size
    indices = _payload(data, offset, "<u4", 3 * rows).reshape(rows, 3).astype(np.int64)
    features = _payload(data, offset + 12 * rows, "<f4", channels * rows).reshape(rows, channels)
    try:
        spec = GridSpec(dims, lower, upper)
        spec.validate()
        return SparseVoxelTensor(spec, indices, features.astype(np.float64))
    except AgriRadarError as e:
        raise FormatError(f"Invalid tensor file: {e}") from e


def write_tensor(path: PathLike, tensor: SparseVoxelTensor) -> Path:
    return _write_bytes(path, encode_tensor(tensor))


def read_tensor(path: PathLike) -> SparseVoxelTensor:
    return decode_tensor(_read_bytes(path))


def describe_file(path: PathLike) -> dict:
    """Header summary of a cube or tensor file without decoding the payload."""
    data = _read_bytes(path)
    magic = data[:4]
    if magic == CUBE_MAGIC:
        fields = _check_preamble(data, CUBE_MAGIC, CUBE_HEADER)
        return {
            "format": "spherical_cube",
            "version": fields[1],
            "dims": list(fields[2:5]),
            "range_m": list(fields[5:7]),
            "elevation_deg": list(fields[7:9]),
            "azimuth_deg": list(fields[9:11]),
            "config_digest": fields[11].hex(),
            "frame_index": fields[12],
        }
    if magic == TENSOR_MAGIC:
        fields = _check_preamble(data, TENSOR_MAGIC, TENSOR_HEADER)
        return {
            "format": "sparse_voxel_tensor",
            "version": fields[1],
            "dims": list(fields[2:5]),
            "lower": list(fields[5:8]),
            "upper": list(fields[8:11]),
            "rows": fields[11],
            "channels": fields[12],
        }
    raise FormatError(f"Unknown file magic {magic!r}")


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

def _network_of(model: Model):
    return model.network if isinstance(model, ConsistencyModel) else model


def encode_model(model: Model) -> bytes:
    """Serialize a reference predictor, a Stage-II denoiser or a consistency model."""
    network = _network_of(model)
    if isinstance(model, ConsistencyModel):
        kind = "consistency"
        hparams = dict(network.hyperparameters(), sigma_min=model.sigma_min)
    else:
        kind = model.kind
        hparams = dict(model.hyperparameters())
    names = sorted(network.params)
    hparams["parameters"] = [[name, list(network.params[name].shape)] for name in names]
    flat = np.concatenate([network.params[n].ravel() for n in names]) if names else np.zeros(0)
    kind_bytes = kind.encode("utf-8")
    blob = json.dumps(hparams, sort_keys=True).encode("utf-8")
    header = MODEL_HEADER.pack(MODEL_MAGIC, FORMAT_VERSION, len(kind_bytes), len(blob), len(flat))
    return header + kind_bytes + blob + flat.astype("<f4").tobytes()


def _build_model(kind: str, hparams: dict) -> Model:
    if kind == "stage1":
        return ReferencePredictor(np.array(hparams["mean"]), np.array(hparams["scale"]),
                                  hparams["classes"])
    config = Stage2ModelConfig(
        hidden=hparams["hidden"],
        frequencies=hparams["frequencies"],
        condition_classes=hparams["condition_classes"],
        init_scale=hparams["init_scale"],
    )
    network = ResidualDenoiser(hparams["channels"], hparams["condition_channels"], config,
                               hparams["sigma_data"])
    if kind == "stage2":
        return network
    if kind == "consistency":
        return ConsistencyModel(network, hparams["sigma_min"])
    raise FormatError(f"Unknown model kind: {kind}")


def decode_model(data: bytes) -> Model:
    fields = _check_preamble(data, MODEL_MAGIC, MODEL_HEADER)
    kind_len, blob_len, count = fields[2:5]
    offset = MODEL_HEADER.size
    try:
        kind = data[offset:offset + kind_len].decode("utf-8")
        hparams = json.loads(data[offset + kind_len:offset + kind_len + blob_len])
    except (UnicodeDecodeError, ValueError) as e:
        raise FormatError(f"Failed to decode model header: {e}") from e
    flat = _payload(data, offset + kind_len + blob_len, "<f4", count).astype(np.float64)
    try:
        model = _build_model(kind, hparams)
    except (KeyError, TypeError, AgriRadarError) as e:
        raise FormatError(f"Invalid model hyper-parameters: {e}") from e
    params = _network_of(model).params
    start = 0
    for name, shape in hparams.get("parameters", []):
        size = int(np.prod(shape))
        if name not in params or tuple(params[name].shape) != tuple(shape):
            raise FormatError(f"Parameter {name} {shape} does not fit a {kind} model")
        params[name][...] = flat[start:start + size].reshape(shape)
        start += size
    if start != count:
        raise FormatError(f"Parameter block has {count} values, header describes {start}")
    return model


def write_model(path: PathLike, model: Model) -> Path:
    return _write_bytes(path, encode_model(model))


def read_model(path: PathLike) -> Model:
    return decode_model(_read_bytes(path))


# ---------------------------------------------------------------------------
# Text formats
# ---------------------------------------------------------------------------

def _read_rows(path: PathLike, columns: int) -> np.ndarray:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise FormatError(f"Failed to read {path}: {e}") from e
    rows = []
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != columns:
            raise FormatError(f"{path}:{number}: expected {columns} columns, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as e:
            raise FormatError(f"{path}:{number}: {e}") from e
    return np.array(rows, dtype=np.float64).reshape(-1, columns)


def _write_text(path: PathLike, header: str, lines: list[str]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join([header, *lines]) + "\n", encoding="utf-8")
    except OSError as e:
        raise FormatError(f"Failed to write {path}: {e}") from e
    return path


def write_point_cloud(path: PathLike, cloud: SemanticPointCloud) -> Path:
    lines = [f"{x:.17g} {y:.17g} {z:.17g} {int(c)}" for (x, y, z), c in zip(cloud.points, cloud.labels)]
    return _write_text(path, POINT_CLOUD_HEADER, lines)


def read_point_cloud(path: PathLike) -> SemanticPointCloud:
    rows = _read_rows(path, 4)
    labels = rows[:, 3]
    if not np.all(labels == np.rint(labels)):
        raise FormatError(f"{path}: labels must be integers")
    try:
        return SemanticPointCloud(rows[:, :3], labels.astype(np.int64))
    except SceneError as e:
        raise FormatError(f"{path}: {e}") from e


def write_poses(path: PathLike, poses: list[PoseSE3]) -> Path:
    lines = []
    for pose in poses:
        values = [pose.timestamp, *pose.translation, *pose.rotation.ravel()]
        lines.append(" ".join(f"{v:.17g}" for v in values))
    return _write_text(path, POSE_HEADER, lines)


def read_poses(path: PathLike) -> list[PoseSE3]:
    poses = []
    for row in _read_rows(path, 13):
        try:
            poses.append(PoseSE3(row[4:].reshape(3, 3), row[1:4], float(row[0])))
        except SceneError as e:
            raise FormatError(f"{path}: {e}") from e
    return poses
