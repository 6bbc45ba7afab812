import math
from dataclasses import dataclass, field

import numpy as np

from crossview.core.errors import ConfigurationError, DomainError


@dataclass
class PanoramaImage:
    """
    Equirectangular ground image.

    Args:
        pixels (np.ndarray): HxWx3 uint8 raster. Column u spans longitude [-pi, pi].
        v_range (float): Vertical field of view of the panorama in radians.
    """

    pixels: np.ndarray
    v_range: float = math.pi

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ConfigurationError("Panorama pixels must be an HxWx3 array.")
        if pixels.shape[0] < 2 or pixels.shape[1] < 2:
            raise ConfigurationError("Panorama must be at least 2x2 pixels.")
        if pixels.dtype != np.uint8:
            raise ConfigurationError("Panorama pixels must be 8-bit.")
        if not 0.0 < self.v_range <= math.pi:
            raise DomainError(f"v_range must lie in (0, pi], got {self.v_range}")
        self.pixels = pixels
        self.v_range = float(self.v_range)

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])


@dataclass(frozen=True)
class SphericalCoord:
    """Longitude and latitude in radians."""

    longitude: float
    latitude: float


@dataclass(frozen=True)
class CropSpec:
    """
    Pinhole camera looking into the panorama sphere.

    Angles are radians. Positive pitch tilts the optical axis downwards
    (rotation about +x as printed for R_x).
    """

    yaw: float
    pitch: float = 0.0
    fov_h: float = math.pi / 2
    fov_v: float = math.pi / 2
    out_width: int = 224
    out_height: int = 224

    def __post_init__(self):
        if not 0.0 < self.fov_h < math.pi:
            raise DomainError(f"fov_h must lie in (0, pi), got {self.fov_h}")
        if not 0.0 < self.fov_v < math.pi:
            raise DomainError(f"fov_v must lie in (0, pi), got {self.fov_v}")
        if self.out_width < 1 or self.out_height < 1:
            raise DomainError("Crop output size must be at least 1x1.")

    def to_dict(self) -> dict:
        return {
            "yaw": self.yaw,
            "pitch": self.pitch,
            "fov_h": self.fov_h,
            "fov_v": self.fov_v,
            "out_width": self.out_width,
            "out_height": self.out_height,
        }


@dataclass
class SamplingGrid:
    """
    Fractional panorama coordinates for every output pixel of a crop.

    ``uv`` holds continuous (u, v) coordinates in the panorama frame where pixel
    (i, j) is centred on (j + 0.5, i + 0.5). ``valid`` is False for rays whose
    latitude falls outside the panorama's vertical coverage.
    """

    uv: np.ndarray
    valid: np.ndarray
    pano_width: int
    pano_height: int

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.uv.shape[0]), int(self.uv.shape[1])

    def array_coords(self) -> np.ndarray:
        """
        Returns (row, col) array-index coordinates after the wrap/clamp rules:
        columns wrap modulo W, rows clamp to [0, H-1].
        """
        cols = np.mod(self.uv[..., 0] - 0.5, self.pano_width)
        rows = np.clip(self.uv[..., 1] - 0.5, 0.0, self.pano_height - 1)
        return np.stack([rows, cols], axis=-1)


@dataclass
class PerspectiveCrop:
    """A resampled pinhole view together with its coverage mask."""

    spec: CropSpec
    pixels: np.ndarray
    valid: np.ndarray = field(repr=False)
