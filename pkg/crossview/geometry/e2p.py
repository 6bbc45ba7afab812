"""
Equirectangular-to-perspective (E2P) geometry.

Conventions:
  - Panorama pixel (i, j) is centred on continuous coordinates (u, v) = (j + 0.5, i + 0.5).
  - u = W / (2 pi) * (lon + pi), v = H / v_range * (v_range / 2 - lat).
  - Camera frame: +z forward, +x right, +y up. A crop pixel row i, column j has
    normalised coordinates x = (2j + 1) / w - 1, y = 1 - (2i + 1) / h.
  - R = R_x(pitch) @ R_y(yaw), d = R r / |r|, lon = atan2(d_x, d_z), lat = asin(d_y).
"""

import logging
import math
from typing import Optional, Sequence, Union

import numpy as np

from crossview.core.errors import DomainError, UsageError
from crossview.core.panorama import (
    CropSpec,
    PanoramaImage,
    PerspectiveCrop,
    SamplingGrid,
    SphericalCoord,
)
from crossview.geometry.sampler import SamplingGridCache

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

_ANGLE_TOL = 1e-12
_UNIT_TOL = 1e-6

_default_cache = SamplingGridCache()


def _check_v_range(v_range: float):
    if not 0.0 < v_range <= math.pi:
        raise DomainError(f"v_range must lie in (0, pi], got {v_range}")


def lonlat_to_uv(lon: ArrayLike, lat: ArrayLike, width: int, height: int, v_range: float):
    """Vectorised closed forms without range checks."""
    u = width / (2.0 * math.pi) * (np.asarray(lon) + math.pi)
    v = (height / v_range) * (v_range / 2.0 - np.asarray(lat))
    return u, v


def spherical_to_pixel(
    coord: SphericalCoord, width: int, height: int, v_range: float
) -> tuple[float, float]:
    """
    Converts a spherical coordinate into fractional panorama pixel coordinates.

    Raises:
        DomainError: if the longitude is outside [-pi, pi] or the latitude is
            outside the panorama's vertical coverage [-v_range/2, v_range/2].
    """
    _check_v_range(v_range)
    lon, lat = coord.longitude, coord.latitude
    if not -math.pi - _ANGLE_TOL <= lon <= math.pi + _ANGLE_TOL:
        raise DomainError(f"Longitude {lon} outside [-pi, pi]")
    half = v_range / 2.0
    if not -half - _ANGLE_TOL <= lat <= half + _ANGLE_TOL:
        raise DomainError(f"Latitude {lat} outside [-{half}, {half}]")
    u, v = lonlat_to_uv(lon, lat, width, height, v_range)
    return float(u), float(v)


def pixel_to_spherical(
    u: float, v: float, width: int, height: int, v_range: float
) -> SphericalCoord:
    """Algebraic inverse of ``spherical_to_pixel``."""
    _check_v_range(v_range)
    if not 0.0 <= u <= width:
        raise DomainError(f"u={u} outside [0, {width}]")
    if not 0.0 <= v <= height:
        raise DomainError(f"v={v} outside [0, {height}]")
    lon = 2.0 * math.pi * u / width - math.pi
    lat = v_range / 2.0 - v * v_range / height
    return SphericalCoord(lon, lat)


def rotation_y(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_x(phi: float) -> np.ndarray:
    c, s = math.cos(phi), math.sin(phi)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def crop_rotation(yaw: float, pitch: float) -> np.ndarray:
    """R = R_x(pitch) @ R_y(yaw)."""
    return rotation_x(pitch) @ rotation_y(yaw)


def ray_directions(x: ArrayLike, y: ArrayLike, spec: CropSpec) -> np.ndarray:
    """
    Unit world-space ray directions for normalised image coordinates.

    Args:
        x, y: Scalars or broadcastable arrays in [-1, 1].
        spec: Camera definition.

    Returns:
        np.ndarray: (..., 3) unit vectors.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x, y = np.broadcast_arrays(x, y)
    r = np.stack(
        [x * math.tan(spec.fov_h / 2.0), y * math.tan(spec.fov_v / 2.0), np.ones_like(x)],
        axis=-1,
    )
    r = r / np.linalg.norm(r, axis=-1, keepdims=True)
    return r @ crop_rotation(spec.yaw, spec.pitch).T


def ray_direction(x: float, y: float, spec: CropSpec) -> np.ndarray:
    return ray_directions(x, y, spec)


def direction_to_spherical(d: Sequence[float]) -> SphericalCoord:
    """
    lon = atan2(d_x, d_z), lat = asin(d_y).

    Raises:
        DomainError: if ``d`` is not a unit vector within 1e-6.
    """
    d = np.asarray(d, dtype=np.float64)
    norm = float(np.linalg.norm(d))
    if abs(norm - 1.0) > _UNIT_TOL:
        raise DomainError(f"Direction must be a unit vector, got norm {norm}")
    lon = math.atan2(d[0], d[2])
    lat = math.asin(max(-1.0, min(1.0, float(d[1]))))
    return SphericalCoord(lon, lat)


def normalized_pixel_coords(out_width: int, out_height: int) -> tuple[np.ndarray, np.ndarray]:
    """(x, y) of every output pixel centre, shape (h, w) each."""
    xs = (2.0 * np.arange(out_width) + 1.0) / out_width - 1.0
    ys = 1.0 - (2.0 * np.arange(out_height) + 1.0) / out_height
    return np.meshgrid(xs, ys)


def build_sampling_grid(
    spec: CropSpec, width: int, height: int, v_range: float
) -> SamplingGrid:
    """
    Casts one ray per output pixel and converts it to panorama coordinates.
    Rays above or below the panorama's vertical coverage are flagged invalid
    and their v-coordinate clamped onto the nearest edge.
    """
    _check_v_range(v_range)
    x, y = normalized_pixel_coords(spec.out_width, spec.out_height)
    d = ray_directions(x, y, spec)

    lon = np.arctan2(d[..., 0], d[..., 2])
    lat = np.arcsin(np.clip(d[..., 1], -1.0, 1.0))

    half = v_range / 2.0
    valid = np.abs(lat) <= half + _ANGLE_TOL
    lat = np.clip(lat, -half, half)

    u, v = lonlat_to_uv(lon, lat, width, height, v_range)
    return SamplingGrid(
        uv=np.stack([u, v], axis=-1), valid=valid, pano_width=width, pano_height=height
    )


def project_to_crop(coord: SphericalCoord, spec: CropSpec) -> Optional[tuple[float, float]]:
    """
    Analytic inverse of the crop mapping.

    Returns:
        (col, row) array-index coordinates of the direction inside the crop,
        or None if the direction lies behind the camera.
    """
    lon, lat = coord.longitude, coord.latitude
    d = np.array([math.cos(lat) * math.sin(lon), math.sin(lat), math.cos(lat) * math.cos(lon)])
    r = crop_rotation(spec.yaw, spec.pitch).T @ d
    if r[2] <= 0:
        return None
    x = r[0] / (r[2] * math.tan(spec.fov_h / 2.0))
    y = r[1] / (r[2] * math.tan(spec.fov_v / 2.0))
    col = (x + 1.0) * spec.out_width / 2.0 - 0.5
    row = (1.0 - y) * spec.out_height / 2.0 - 0.5
    return float(col), float(row)


def default_crop_specs(
    out_size: int = 224,
    base_yaw: float = math.pi / 4,
    count: int = 4,
    fov: float = math.pi / 2,
) -> list[CropSpec]:
    """
    Pitch-0 crops whose yaws start at ``base_yaw - pi`` and step by 2*pi/count.
    The default gives yaws -3pi/4, -pi/4, pi/4, 3pi/4 with pi/2 FOVs.
    """
    step = 2.0 * math.pi / count
    return [
        CropSpec(
            yaw=base_yaw - math.pi + k * step,
            pitch=0.0,
            fov_h=fov,
            fov_v=fov,
            out_width=out_size,
            out_height=out_size,
        )
        for k in range(count)
    ]


def crop_longitude_interval(spec: CropSpec) -> tuple[float, float]:
    """Longitude interval [left, right) seen by a pitch-0 crop."""
    if spec.pitch != 0.0:
        raise DomainError("Longitude intervals are only defined for pitch 0.")
    return spec.yaw - spec.fov_h / 2.0, spec.yaw + spec.fov_h / 2.0


def assign_longitude(lon: float, specs: Sequence[CropSpec]) -> Optional[int]:
    """
    Index of the crop whose half-open interval [left, right) contains ``lon``.
    The crop with the largest right edge is closed on the right.
    Returns None when no crop sees the longitude.
    """
    if not specs:
        raise UsageError("At least one crop spec is required.")
    intervals = [crop_longitude_interval(s) for s in specs]
    last = max(range(len(intervals)), key=lambda i: intervals[i][1])

    for shift in (0.0, 2.0 * math.pi, -2.0 * math.pi):
        value = lon + shift
        for i, (left, right) in enumerate(intervals):
            if left <= value < right or (i == last and value == right):
                return i
    return None


def e2p_transform(
    pano: PanoramaImage,
    specs: Sequence[CropSpec],
    cache: Optional[SamplingGridCache] = None,
) -> list[PerspectiveCrop]:
    """
    Resamples the panorama into one perspective crop per spec.

    Raises:
        UsageError: if ``specs`` is empty.
    """
    if len(specs) == 0:
        raise UsageError("e2p_transform needs at least one CropSpec.")
    cache = _default_cache if cache is None else cache

    crops = []
    for spec in specs:
        sampler = cache.get_sampler(
            spec, pano.width, pano.height, pano.v_range, build_sampling_grid
        )
        pixels = sampler.transform(pano.pixels)
        crops.append(PerspectiveCrop(spec=spec, pixels=pixels, valid=sampler.valid.copy()))
    return crops
