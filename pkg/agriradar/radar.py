"""Radar front end: spherical cube synthesis, resolution figures and CA-CFAR.

Cube synthesis works in the spectral domain. Each in-frustum scatterer adds a
separable response to the range x elevation x azimuth power grid:

* range: ``sinc((r_bin - r) / dr) ** 2`` with ``dr = c / (2 B)``
* angles: the squared Dirichlet (array factor) kernel of an ``N`` element
  uniform array, evaluated at ``sin(theta_bin - theta)``

scaled by ``rcs / r**4``. Every kernel is truncated to +-``kernel_truncation``
mainlobe widths (the null-to-null half width ``dr`` in range and
``lambda / (N d)`` in sine space), so bins beyond that window receive nothing
from the scatterer. Exponential noise with mean ``noise_floor`` is then added
to every bin.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import AgriRadarError, ConfigError
from .kernels import cfar_hits, splat_targets, thread_limit
from .scene_sim import PoseSE3, Scene

log = logging.getLogger(__name__)

SPEED_OF_LIGHT = 299_792_458.0


class RadarError(AgriRadarError):
    """Raised on invalid radar parameters, bins or CFAR windows."""
    pass


@dataclass
class RadarConfig:
    """FMCW front-end parameters and the trimmed cube geometry."""
    bandwidth_hz: float = 0.7e9
    chirp_duration_s: float = 50e-6
    carrier_hz: float = 77e9
    num_azimuth_elements: int = 16
    num_elevation_elements: int = 16
    element_spacing_m: Optional[float] = None  # None means half a wavelength
    noise_floor: float = 1e-8
    dims: tuple[int, int, int] = (166, 94, 177)
    range_m: tuple[float, float] = (4.0, 40.0)
    elevation_deg: tuple[float, float] = (-45.0, 45.0)
    azimuth_deg: tuple[float, float] = (-25.0, 25.0)
    kernel_truncation: float = 4.0

    def validate(self) -> None:
        if self.bandwidth_hz <= 0:
            raise RadarError(f"Bandwidth must be positive, got {self.bandwidth_hz}")
        if self.carrier_hz <= 0 or self.chirp_duration_s <= 0:
            raise ConfigError("radar.carrier_hz and chirp_duration_s must be positive")
        if self.num_azimuth_elements < 1 or self.num_elevation_elements < 1:
            raise RadarError("Virtual array sizes must be at least 1")
        if self.element_spacing_m is not None and self.element_spacing_m <= 0:
            raise RadarError("Element spacing must be positive")
        if self.noise_floor < 0:
            raise ConfigError("radar.noise_floor must be non-negative")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ConfigError("radar.dims must be three positive counts")
        for name in ("range_m", "elevation_deg", "azimuth_deg"):
            lo, hi = getattr(self, name)
            if hi <= lo:
                raise ConfigError(f"radar.{name} must be an increasing range")
        if self.kernel_truncation <= 0:
            raise ConfigError("radar.kernel_truncation must be positive")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_hz

    @property
    def spacing(self) -> float:
        if self.element_spacing_m is None:
            return 0.5 * self.wavelength
        return self.element_spacing_m

    def range_centers(self) -> np.ndarray:
        return _centers(self.range_m[0], self.range_m[1], self.dims[0])

    def elevation_centers(self) -> np.ndarray:
        """Elevation bin centers in radians."""
        lo, hi = np.radians(self.elevation_deg)
        return _centers(lo, hi, self.dims[1])

    def azimuth_centers(self) -> np.ndarray:
        """Azimuth bin centers in radians."""
        lo, hi = np.radians(self.azimuth_deg)
        return _centers(lo, hi, self.dims[2])

    def digest(self) -> bytes:
        """SHA-256 of the canonical JSON form; stored in cube file headers."""
        blob = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).digest()


@dataclass
class CfarConfig:
    """Cell-averaging CFAR window (cells per side, per axis) and false-alarm rate."""
    guard: tuple[int, int, int] = (2, 2, 2)
    training: tuple[int, int, int] = (4, 4, 4)
    pfa: float = 1e-3

    def validate(self) -> None:
        if len(self.guard) != 3 or len(self.training) != 3:
            raise ConfigError("cfar.guard and cfar.training need one value per axis")
        if min(self.guard) < 0 or min(self.training) < 0 or sum(self.training) == 0:
            raise ConfigError("cfar windows must be non-negative with some training cells")
        if not 0.0 < self.pfa < 1.0:
            raise ConfigError(f"cfar.pfa must lie in (0, 1), got {self.pfa}")


@dataclass(frozen=True, eq=False)
class SphericalCube:
    """Echo power over (range, elevation, azimuth) bins for one frame."""
    power: np.ndarray
    config: RadarConfig
    frame_index: int = 0

    def __post_init__(self) -> None:
        power = np.asarray(self.power, dtype=np.float32)
        if power.shape != tuple(self.config.dims):
            raise RadarError(f"Cube shape {power.shape} does not match dims {self.config.dims}")
        if not np.all(np.isfinite(power)) or (power < 0).any():
            raise RadarError("Cube power must be finite and non-negative")
        object.__setattr__(self, "power", power)


@dataclass(frozen=True, eq=False)
class Detections:
    """CFAR detections: bin indices (D, 3) and their power (D,)."""
    bins: np.ndarray
    power: np.ndarray

    def __len__(self) -> int:
        return len(self.bins)


def _centers(lo: float, hi: float, n: int) -> np.ndarray:
    return lo + (np.arange(n) + 0.5) * (hi - lo) / n


# ---------------------------------------------------------------------------
# Resolution
# ---------------------------------------------------------------------------

def range_resolution(config: RadarConfig) -> float:
    """Return ``c / (2 B)`` in meters."""
    if config.bandwidth_hz <= 0:
        raise RadarError(f"Bandwidth must be positive, got {config.bandwidth_hz}")
    return SPEED_OF_LIGHT / (2.0 * config.bandwidth_hz)


def angular_resolution(config: RadarConfig, axis: str = "azimuth") -> float:
    """Return ``lambda / (N d)`` in radians for the azimuth or elevation array."""
    if axis == "azimuth":
        n = config.num_azimuth_elements
    elif axis == "elevation":
        n = config.num_elevation_elements
    else:
        raise RadarError(f"Unknown array axis: {axis}")
    if n < 1:
        raise RadarError("Virtual array size must be at least 1")
    if config.spacing <= 0:
        raise RadarError("Element spacing must be positive")
    return config.wavelength / (n * config.spacing)


# ---------------------------------------------------------------------------
# Cube synthesis
# ---------------------------------------------------------------------------

def spherical_to_cartesian(r, el, az) -> np.ndarray:
    """Convert range (m), elevation and azimuth (radians) to sensor-frame xyz."""
    r, el, az = np.broadcast_arrays(np.asarray(r, float), np.asarray(el, float),
                                    np.asarray(az, float))
    cos_el = np.cos(el)
    return np.stack([r * cos_el * np.cos(az), r * cos_el * np.sin(az), r * np.sin(el)],
                    axis=-1)


def dirichlet_power(delta_u: np.ndarray, elements: int, spacing_wl: float) -> np.ndarray:
    """Squared array factor of an ``elements`` array at sine offsets ``delta_u``."""
    psi = math.pi * spacing_wl * np.asarray(delta_u, dtype=np.float64)
    num = np.sin(elements * psi)
    den = elements * np.sin(psi)
    with np.errstate(invalid="ignore", divide="ignore"):
        af = np.where(np.abs(den) < 1e-12, 1.0, num / den)
    return af * af


def _window(values: np.ndarray, center: float, half_width: float) -> tuple[int, int]:
    """Index range [lo, hi) of sorted ``values`` within ``center +- half_width``."""
    lo = int(np.searchsorted(values, center - half_width, side="left"))
    hi = int(np.searchsorted(values, center + half_width, side="right"))
    return lo, hi


def _pack_kernels(targets, config: RadarConfig) -> tuple[np.ndarray, ...]:
    """
    Truncated per-target kernel windows packed into flat arrays.

    Returns:
        ``(windows, amp, k_r, r_off, k_e, e_off, k_a, a_off)`` as consumed by
        ``kernels.splat_targets``. Targets whose window is empty are dropped.
    """
    ranges = config.range_centers()
    els = config.elevation_centers()
    azs = config.azimuth_centers()
    dr = range_resolution(config)
    spacing_wl = config.spacing / config.wavelength
    trunc = config.kernel_truncation
    du_el = trunc / (config.num_elevation_elements * spacing_wl)
    du_az = trunc / (config.num_azimuth_elements * spacing_wl)
    sin_el, sin_az = np.sin(els), np.sin(azs)

    windows, amps, k_rs, k_es, k_as = [], [], [], [], []
    for r, el, az, amp in targets:
        a, b = _window(ranges, r, trunc * dr)
        # sin(theta_bin - theta) is monotone in the bin index inside +-90 degrees
        e0, e1 = _window(sin_el * math.cos(el) - np.cos(els) * math.sin(el), 0.0, du_el)
        z0, z1 = _window(sin_az * math.cos(az) - np.cos(azs) * math.sin(az), 0.0, du_az)
        if a >= b or e0 >= e1 or z0 >= z1:
            continue
        windows.append((a, b, e0, e1, z0, z1))
        amps.append(amp)
        k_rs.append(np.sinc((ranges[a:b] - r) / dr) ** 2)
        k_es.append(dirichlet_power(np.sin(els[e0:e1] - el), config.num_elevation_elements,
                                    spacing_wl))
        k_as.append(dirichlet_power(np.sin(azs[z0:z1] - az), config.num_azimuth_elements,
                                    spacing_wl))

    def flat(parts: list) -> tuple[np.ndarray, np.ndarray]:
        offsets = np.zeros(len(parts), dtype=np.int64)
        if parts:
            offsets[1:] = np.cumsum([len(p) for p in parts])[:-1]
            return np.concatenate(parts).astype(np.float64), offsets
        return np.zeros(0), offsets

    k_r, r_off = flat(k_rs)
    k_e, e_off = flat(k_es)
    k_a, a_off = flat(k_as)
    return (np.asarray(windows, dtype=np.int64).reshape(-1, 6),
            np.asarray(amps, dtype=np.float64), k_r, r_off, k_e, e_off, k_a, a_off)


def _targets(scene: Scene, pose: PoseSE3, config: RadarConfig) -> list[tuple]:
    """In-cube scatterers as (r, el, az, amplitude) tuples in canonical order."""
    if len(scene) == 0:
        return []
    local = pose.to_sensor(scene.positions)
    # canonical order makes the splat sum independent of insertion order
    order = np.lexsort((scene.labels, scene.rcs, local[:, 2], local[:, 1], local[:, 0]))
    local, rcs = local[order], scene.rcs[order]
    r = np.linalg.norm(local, axis=1)
    valid = r > 0
    el = np.arcsin(np.clip(local[:, 2] / np.where(valid, r, 1.0), -1.0, 1.0))
    az = np.arctan2(local[:, 1], local[:, 0])
    lo_el, hi_el = np.radians(config.elevation_deg)
    lo_az, hi_az = np.radians(config.azimuth_deg)
    inside = (
        valid
        & (r >= config.range_m[0]) & (r <= config.range_m[1])
        & (el >= lo_el) & (el <= hi_el) & (az >= lo_az) & (az <= hi_az)
    )
    amp = rcs / r ** 4
    return [(float(r[i]), float(el[i]), float(az[i]), float(amp[i]))
            for i in np.flatnonzero(inside)]


def synthesize_spherical_cube(
    scene: Scene,
    pose: PoseSE3,
    config: RadarConfig,
    seed: int,
    threads: int = 1,
    frame_index: int = 0,
) -> SphericalCube:
    """
    Synthesize one frame's spherical power cube.

    Range bins are partitioned across numba threads. Each range bin is owned
    by exactly one thread, which adds the scatterers touching it in the same
    canonical order, so the result is bit-identical for any thread count.

    Args:
        scene: Scatterers in world coordinates.
        pose: Sensor-to-world pose of this frame.
        config: Radar parameters.
        seed: Seed for the noise draw.
        threads: Threads for splatting.
        frame_index: Stored on the returned cube.

    Returns:
        The synthesized cube (float32 power).
    """
    config.validate()
    targets = _targets(scene, pose, config)
    cube = np.zeros(config.dims, dtype=np.float64)
    packed = _pack_kernels(targets, config)
    if len(packed[1]):
        with thread_limit(threads):
            splat_targets(cube, *packed)

    if config.noise_floor > 0:
        rng = np.random.default_rng(seed)
        cube += rng.exponential(config.noise_floor, size=config.dims)
    log.debug("Synthesized frame %d from %d in-cube scatterers", frame_index, len(targets))
    return SphericalCube(cube.astype(np.float32), config, frame_index)


def spherical_bins_to_points(bins: np.ndarray, config: RadarConfig) -> np.ndarray:
    """
    Cartesian coordinates of bin centers.

    Raises:
        RadarError: If any index lies outside the cube dims.
    """
    bins = np.asarray(bins, dtype=np.int64).reshape(-1, 3)
    if len(bins) and ((bins < 0).any() or (bins >= np.asarray(config.dims)).any()):
        raise RadarError("Bin index outside the cube dims")
    return spherical_to_cartesian(
        config.range_centers()[bins[:, 0]],
        config.elevation_centers()[bins[:, 1]],
        config.azimuth_centers()[bins[:, 2]],
    ).reshape(-1, 3)


# ---------------------------------------------------------------------------
# CA-CFAR
# ---------------------------------------------------------------------------

def ca_cfar(cube: SphericalCube, cfar: CfarConfig, threads: int = 1) -> Detections:
    """
    Cell-averaging CFAR over the full cube.

    The training ring of a bin is the box of half width ``guard + training``
    minus the guard box of half width ``guard``, both clamped at the cube
    edges. With ``T`` training cells the threshold is ``alpha * mean`` with
    ``alpha = T * (pfa ** (-1 / T) - 1)``, so ``T`` varies near edges.
    Ring sums come from a summed-area table; range bins are split across
    ``threads`` numba threads.

    Raises:
        RadarError: If the full window is larger than the cube along an axis.
    """
    cfar.validate()
    power = cube.power.astype(np.float64)
    dims = power.shape
    for axis, (n, g, t) in enumerate(zip(dims, cfar.guard, cfar.training)):
        if 2 * (g + t) + 1 > n:
            raise RadarError(
                f"CFAR window of {2 * (g + t) + 1} cells exceeds cube axis {axis} of {n}"
            )

    table = np.zeros(tuple(d + 1 for d in dims))
    table[1:, 1:, 1:] = power.cumsum(0).cumsum(1).cumsum(2)
    with thread_limit(threads):
        hits = cfar_hits(power, table, np.asarray(cfar.guard, dtype=np.int64),
                         np.asarray(cfar.training, dtype=np.int64), float(cfar.pfa))

    bins = np.argwhere(hits)
    log.debug("CFAR found %d detections in frame %d", len(bins), cube.frame_index)
    return Detections(bins.astype(np.int64), cube.power[hits].astype(np.float64))
