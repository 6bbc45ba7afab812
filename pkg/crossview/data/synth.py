"""
Procedural ground/satellite pairs with analytically known correspondence.

A scene is a ring of coloured cylindrical landmarks around the camera. The
satellite view draws each landmark as a disk at offset (rho sin(lon), -rho cos(lon))
from the image centre (north up, east right); the panorama draws it as a pillar
centred on column u = W (lon + pi) / (2 pi).
"""

import colorsys
import math
from dataclasses import dataclass, field, replace
from typing import Literal, Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from crossview.core.panorama import PanoramaImage

GroundTexture = Literal["grass", "asphalt", "sand"]

TEXTURE_COLORS: dict[str, tuple[int, int, int]] = {
    "grass": (78, 128, 62),
    "asphalt": (92, 92, 96),
    "sand": (194, 170, 120),
}

SATELLITE_HALF_EXTENT_M = 50.0
LANDMARK_HEIGHT_M = 6.0
CAMERA_HEIGHT_M = 2.0
MIN_DISTANCE_M = 6.0
MAX_DISTANCE_M = 40.0

DEFAULT_SATELLITE_SIZE = 256
DEFAULT_PANO_WIDTH = 512
DEFAULT_PANO_HEIGHT = 128
DEFAULT_V_RANGE = math.pi / 2


@dataclass(frozen=True)
class Landmark:
    azimuth: float
    distance: float
    color: tuple[int, int, int]
    radius: float


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    landmarks: tuple[Landmark, ...] = field(default_factory=tuple)
    ground_texture: GroundTexture = "grass"

    def __post_init__(self):
        if len(self.landmarks) < 3:
            raise ValueError("A scene needs at least 3 landmarks.")
        for lm in self.landmarks:
            if not -math.pi <= lm.azimuth < math.pi:
                raise ValueError(f"Azimuth {lm.azimuth} outside [-pi, pi)")
            if lm.distance <= 0:
                raise ValueError("Landmark distances must be positive.")

    def landmark_set(self) -> frozenset:
        return frozenset((lm.azimuth, lm.distance, lm.color) for lm in self.landmarks)


def _wrap_angle(angle):
    """Wraps into [-pi, pi)."""
    return np.mod(np.asarray(angle) + math.pi, 2.0 * math.pi) - math.pi


def _vivid_color(rng: np.random.Generator) -> tuple[int, int, int]:
    h = rng.uniform(0.0, 1.0)
    s = rng.uniform(0.75, 1.0)
    v = rng.uniform(0.8, 1.0)
    r, g, b = colorsys.hsv_to_rgb(h, s, v)
    return int(round(r * 255)), int(round(g * 255)), int(round(b * 255))


def generate_scene(seed: int, min_landmarks: int = 3, max_landmarks: int = 6) -> SceneSpec:
    """Deterministic scene for ``seed``."""
    rng = np.random.default_rng(seed)
    count = int(rng.integers(min_landmarks, max_landmarks + 1))
    landmarks = tuple(
        Landmark(
            azimuth=float(rng.uniform(-math.pi, math.pi)),
            distance=float(rng.uniform(MIN_DISTANCE_M, MAX_DISTANCE_M)),
            color=_vivid_color(rng),
            radius=float(rng.uniform(1.5, 4.0)),
        )
        for _ in range(count)
    )
    texture = ("grass", "asphalt", "sand")[int(rng.integers(0, 3))]
    return SceneSpec(seed=seed, landmarks=landmarks, ground_texture=texture)


def jitter_scene(scene: SceneSpec, rng: np.random.Generator, max_offset_m: float = 3.0) -> SceneSpec:
    """
    Moves the camera by a random horizontal offset and recomputes every landmark's
    polar coordinates, so several panoramas share one satellite tile.
    """
    dx, dy = rng.uniform(-max_offset_m, max_offset_m, size=2)
    landmarks = []
    for lm in scene.landmarks:
        east = lm.distance * math.sin(lm.azimuth) - dx
        north = lm.distance * math.cos(lm.azimuth) - dy
        distance = max(math.hypot(east, north), lm.radius + 1.0)
        azimuth = float(_wrap_angle(math.atan2(east, north)))
        landmarks.append(replace(lm, azimuth=azimuth, distance=distance))
    return replace(scene, landmarks=tuple(landmarks))


def _texture(seed: int, shape: tuple[int, int], base: tuple[int, int, int], amplitude: float) -> np.ndarray:
    rng = np.random.default_rng(seed)
    noise = gaussian_filter(rng.standard_normal(shape), sigma=3.0, mode="wrap")
    noise /= max(float(np.std(noise)), 1e-9)
    out = np.asarray(base, dtype=np.float64)[np.newaxis, np.newaxis, :] + amplitude * noise[..., np.newaxis]
    return out


def satellite_scale(size: int) -> float:
    """Pixels per meter of the satellite rendering."""
    return (size / 2.0) / SATELLITE_HALF_EXTENT_M


def landmark_satellite_offset(landmark: Landmark, size: int) -> tuple[float, float]:
    """(dx, dy) pixel offset of the landmark's disk centre from the image centre."""
    scale = satellite_scale(size)
    return (
        landmark.distance * math.sin(landmark.azimuth) * scale,
        -landmark.distance * math.cos(landmark.azimuth) * scale,
    )


def landmark_panorama_column(landmark: Landmark, width: int) -> float:
    """Continuous u-coordinate of the landmark's centre in the panorama."""
    return width * (landmark.azimuth + math.pi) / (2.0 * math.pi)


def render_satellite(scene: SceneSpec, size: int = DEFAULT_SATELLITE_SIZE) -> np.ndarray:
    """
    Orthographic top-down view, north up. Landmarks are drawn back to front
    by distance so nearer disks cover farther ones.
    """
    canvas = _texture(scene.seed * 2 + 1, (size, size), TEXTURE_COLORS[scene.ground_texture], 14.0)

    centres = np.arange(size) + 0.5 - size / 2.0
    xx, yy = np.meshgrid(centres, centres)
    scale = satellite_scale(size)

    for lm in sorted(scene.landmarks, key=lambda lm: -lm.distance):
        cx, cy = landmark_satellite_offset(lm, size)
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= (lm.radius * scale) ** 2
        canvas[mask] = lm.color

    return np.clip(np.rint(canvas), 0, 255).astype(np.uint8)


def render_panorama(
    scene: SceneSpec,
    width: int = DEFAULT_PANO_WIDTH,
    height: int = DEFAULT_PANO_HEIGHT,
    v_range: float = DEFAULT_V_RANGE,
) -> PanoramaImage:
    """
    Equirectangular view from the scene centre. Each landmark is a pillar whose
    angular width is 2 atan(radius / distance) and whose vertical extent runs from
    the ground at -atan(camera_height / distance) to its top.
    """
    lon = (np.arange(width) + 0.5) * 2.0 * math.pi / width - math.pi
    lat = v_range / 2.0 - (np.arange(height) + 0.5) * v_range / height
    lon_grid, lat_grid = np.meshgrid(lon, lat)

    ground = _texture(scene.seed * 2 + 2, (height, width), TEXTURE_COLORS[scene.ground_texture], 10.0)
    sky_t = np.clip(lat_grid / max(v_range / 2.0, 1e-9), 0.0, 1.0)[..., np.newaxis]
    sky = (1 - sky_t) * np.array([176.0, 204.0, 235.0]) + sky_t * np.array([70.0, 120.0, 200.0])
    canvas = np.where((lat_grid >= 0)[..., np.newaxis], sky, ground)

    half_pixel = math.pi / width
    for lm in sorted(scene.landmarks, key=lambda lm: -lm.distance):
        half_width = max(math.atan(lm.radius / lm.distance), half_pixel)
        top = math.atan((LANDMARK_HEIGHT_M - CAMERA_HEIGHT_M) / lm.distance)
        bottom = -math.atan(CAMERA_HEIGHT_M / lm.distance)
        cols = np.abs(_wrap_angle(lon_grid - lm.azimuth)) <= half_width
        rows = (lat_grid <= top) & (lat_grid >= bottom)
        canvas[cols & rows] = lm.color

    pixels = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    return PanoramaImage(pixels=pixels, v_range=v_range)


def _color_mask(pixels: np.ndarray, color: tuple[int, int, int]) -> np.ndarray:
    return np.all(pixels == np.asarray(color, dtype=np.uint8), axis=-1)


def azimuth_from_panorama(pixels: np.ndarray, color: tuple[int, int, int]) -> Optional[float]:
    """Circular-mean longitude of all pixels with exactly ``color``."""
    mask = _color_mask(pixels, color)
    if not mask.any():
        return None
    width = pixels.shape[1]
    cols = np.nonzero(mask)[1]
    angles = (cols + 0.5) * 2.0 * math.pi / width - math.pi
    return float(math.atan2(np.mean(np.sin(angles)), np.mean(np.cos(angles))))


def azimuth_from_satellite(pixels: np.ndarray, color: tuple[int, int, int]) -> Optional[float]:
    """Bearing of the centroid of all pixels with exactly ``color``."""
    mask = _color_mask(pixels, color)
    if not mask.any():
        return None
    size = pixels.shape[0]
    rows, cols = np.nonzero(mask)
    dx = float(np.mean(cols + 0.5 - size / 2.0))
    dy = float(np.mean(rows + 0.5 - size / 2.0))
    return math.atan2(dx, -dy)
