from dataclasses import dataclass
from typing import TYPE_CHECKING, Literal, Union

import numpy as np

if TYPE_CHECKING:
    from PySide6.QtGui import QColor
else:
    from qtpy.QtGui import QColor

from crossview.core.errors import UsageError

PaletteName = Literal["viridis", "plasma", "coolwarm"]

# the bright end of viridis-like palettes is unreadable on white
SERIES_SPAN = 0.85


@dataclass(frozen=True)
class Palette:
    """
    Colour stops at positions in [0, 1], interpolated per RGB channel.

    Attributes:
        name (str): Palette name as accepted by ``get_palette``.
        stops (tuple): (position, "#rrggbb") pairs in ascending position.
    """

    name: str
    stops: tuple[tuple[float, str], ...]

    def _channels(self) -> tuple[np.ndarray, np.ndarray]:
        positions = np.array([p for p, _ in self.stops], dtype=np.float64)
        rgb = np.array([QColor(c).getRgb()[:3] for _, c in self.stops], dtype=np.float64)
        return positions, rgb

    def map(self, value: float) -> QColor:
        positions, rgb = self._channels()
        value = float(np.clip(value, 0.0, 1.0))
        r, g, b = (int(np.interp(value, positions, rgb[:, i])) for i in range(3))
        return QColor(r, g, b)

    def series(self, count: int) -> list[QColor]:
        """``count`` distinguishable line colours."""
        if count <= 0:
            return []
        if count == 1:
            return [self.map(0.5)]
        return [self.map(SERIES_SPAN * i / (count - 1)) for i in range(count)]


VIRIDIS = Palette(
    "viridis",
    ((0.0, "#440154"), (0.25, "#3b528b"), (0.5, "#21918c"), (0.75, "#5ec962"), (1.0, "#fde725")),
)
PLASMA = Palette(
    "plasma",
    ((0.0, "#0d0887"), (0.25, "#7e03a8"), (0.5, "#cc4778"), (0.75, "#f89540"), (1.0, "#f0f921")),
)
COOLWARM = Palette("coolwarm", ((0.0, "#3b4cc0"), (0.5, "#dddddd"), (1.0, "#b40426")))

PALETTES: dict[str, Palette] = {p.name: p for p in (VIRIDIS, PLASMA, COOLWARM)}


def get_palette(name: Union[PaletteName, str]) -> Palette:
    """
    Raises:
        UsageError: for an unknown palette name.
    """
    try:
        return PALETTES[name.lower()]
    except KeyError:
        raise UsageError(f"Unknown palette {name!r}; choose from {sorted(PALETTES)}") from None
