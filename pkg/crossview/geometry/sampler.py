import logging
from collections import OrderedDict
from typing import Callable, Optional

import numpy as np
from scipy.ndimage import map_coordinates

from crossview.core.errors import ConfigurationError
from crossview.core.panorama import CropSpec, SamplingGrid

logger = logging.getLogger(__name__)


class BilinearSampler:
    """
    Bilinear resampler for a fixed sampling grid.
    ``fit`` keeps the array coordinates of every output pixel, so resampling
    another panorama with the same geometry is one ``map_coordinates`` call per
    channel.
    """

    def __init__(self):
        self._coords: Optional[np.ndarray] = None
        self._valid: Optional[np.ndarray] = None
        self._out_shape: Optional[tuple[int, int]] = None
        self._source_shape: Optional[tuple[int, int]] = None

    @property
    def is_fitted(self) -> bool:
        return self._coords is not None

    @property
    def valid(self) -> Optional[np.ndarray]:
        return self._valid

    def fit(self, grid: SamplingGrid):
        """
        Stores (row, col) coordinates from the grid. Rows arrive clamped, so the
        ``grid-wrap`` boundary only ever wraps columns across the seam.
        """
        self._coords = grid.array_coords().reshape(-1, 2).T.copy()
        self._valid = grid.valid.copy()
        self._out_shape = grid.shape
        self._source_shape = (grid.pano_height, grid.pano_width)

    def transform(self, pixels: np.ndarray) -> np.ndarray:
        """
        Resamples ``pixels`` (HxWxC) onto the fitted grid.
        Out-of-coverage pixels are filled with zeros. 8-bit input yields
        rounded 8-bit output, float input stays float.
        """
        if self._coords is None:
            raise ConfigurationError("BilinearSampler.transform called before fit.")
        if pixels.shape[:2] != self._source_shape:
            raise ConfigurationError(
                f"Sampler was fitted for a {self._source_shape} panorama, "
                f"got {pixels.shape[:2]}"
            )

        source = pixels.astype(np.float64)
        if source.ndim == 2:
            source = source[..., np.newaxis]
        out = np.stack(
            [
                map_coordinates(source[..., c], self._coords, order=1, mode="grid-wrap")
                for c in range(source.shape[2])
            ],
            axis=-1,
        )
        out = out.reshape(*self._out_shape, source.shape[2])
        out[~self._valid] = 0.0

        if pixels.dtype == np.uint8:
            out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
        if pixels.ndim == 2:
            out = out[..., 0]
        return out



GridKey = tuple[CropSpec, int, int, float]


class SamplingGridCache:
    """
    Keeps fitted samplers for recently used crop geometries.
    LRU eviction bounds memory; the same E2P configuration is applied to every
    panorama of a dataset, so hits are the common case.
    """

    def __init__(self, max_size: int = 16):
        self._cache: "OrderedDict[GridKey, BilinearSampler]" = OrderedDict()
        self._max_size = max_size

    def __len__(self):
        return len(self._cache)

    def __contains__(self, key: GridKey) -> bool:
        return key in self._cache

    def get_sampler(
        self,
        spec: CropSpec,
        width: int,
        height: int,
        v_range: float,
        build_grid: Callable[[CropSpec, int, int, float], SamplingGrid],
    ) -> BilinearSampler:
        key = (spec, width, height, float(v_range))

        if key in self._cache:
            self._cache.move_to_end(key)
            return self._cache[key]

        logger.debug("Building sampling grid for yaw=%.4f pitch=%.4f", spec.yaw, spec.pitch)
        sampler = BilinearSampler()
        sampler.fit(build_grid(spec, width, height, v_range))

        if len(self._cache) >= self._max_size:
            self._cache.popitem(last=False)
        self._cache[key] = sampler
        return sampler

    def clear(self):
        self._cache.clear()
