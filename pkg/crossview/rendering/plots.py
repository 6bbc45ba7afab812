"""
SVG line charts for evaluation reports, drawn with QPainter on a QSvgGenerator.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Sequence, Union

import numpy as np

if TYPE_CHECKING:
    from PySide6.QtCore import QPointF, QRect, QRectF, QSize, Qt
    from PySide6.QtGui import QColor, QFont, QGuiApplication, QPainter, QPen, QPolygonF
    from PySide6.QtSvg import QSvgGenerator
else:
    from qtpy.QtCore import QPointF, QRect, QRectF, QSize, Qt
    from qtpy.QtGui import QColor, QFont, QGuiApplication, QPainter, QPen, QPolygonF
    from qtpy.QtSvg import QSvgGenerator

from crossview.core.errors import DataError, UsageError
from crossview.rendering.palette import get_palette

logger = logging.getLogger(__name__)

MARGIN_LEFT = 72
MARGIN_RIGHT = 24
MARGIN_TOP = 40
MARGIN_BOTTOM = 56
TICKS = 5


@dataclass
class Series:
    name: str
    xs: list[float]
    ys: list[float]

    def finite_points(self) -> list[tuple[float, float]]:
        return [
            (float(x), float(y))
            for x, y in zip(self.xs, self.ys)
            if isinstance(y, (int, float)) and math.isfinite(x) and math.isfinite(y)
        ]


@dataclass
class LineChart:
    title: str
    x_label: str
    y_label: str
    series: list[Series] = field(default_factory=list)

    def bounds(self) -> tuple[float, float, float, float]:
        points = [p for s in self.series for p in s.finite_points()]
        if not points:
            raise UsageError(f"Chart {self.title!r} has no finite points to draw.")
        xs = [p[0] for p in points]
        ys = [p[1] for p in points]
        x0, x1 = min(xs), max(xs)
        y0, y1 = min(ys), max(ys)
        if x0 == x1:
            x0, x1 = x0 - 1.0, x1 + 1.0
        if y0 == y1:
            y0, y1 = y0 - 1.0, y1 + 1.0
        pad = 0.05 * (y1 - y0)
        return x0, x1, y0 - pad, y1 + pad


def ensure_app() -> QGuiApplication:
    """Returns the running Qt application, creating an offscreen one if needed."""
    app = QGuiApplication.instance()
    if app is None:
        os.environ.setdefault("QT_QPA_PLATFORM", "offscreen")
        app = QGuiApplication([])
    return app


def _tick_label(value: float) -> str:
    return f"{value:.3g}"


def render_svg(
    chart: LineChart, path: Union[str, Path], size: tuple[int, int] = (640, 400), palette: str = "viridis"
) -> Path:
    """
    Draws ``chart`` into an SVG file.

    Non-finite points (PSNR of identical images) are left out of the polyline.
    """
    scheme = get_palette(palette)
    ensure_app()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    width, height = size
    x0, x1, y0, y1 = chart.bounds()

    plot = QRectF(MARGIN_LEFT, MARGIN_TOP, width - MARGIN_LEFT - MARGIN_RIGHT, height - MARGIN_TOP - MARGIN_BOTTOM)

    def to_screen(x: float, y: float) -> QPointF:
        px = plot.left() + (x - x0) / (x1 - x0) * plot.width()
        py = plot.bottom() - (y - y0) / (y1 - y0) * plot.height()
        return QPointF(px, py)

    generator = QSvgGenerator()
    generator.setFileName(str(path))
    generator.setSize(QSize(width, height))
    generator.setViewBox(QRect(0, 0, width, height))
    generator.setTitle(chart.title)

    painter = QPainter()
    if not painter.begin(generator):
        raise DataError(f"Cannot open {path} for SVG output")
    try:
        painter.setRenderHint(QPainter.RenderHint.Antialiasing)
        painter.fillRect(QRectF(0, 0, width, height), QColor("#ffffff"))

        font = QFont()
        font.setPointSize(9)
        painter.setFont(font)

        grid_pen = QPen(QColor("#dddddd"))
        axis_pen = QPen(QColor("#333333"))
        for value in np.linspace(y0, y1, TICKS):
            p = to_screen(x0, float(value))
            painter.setPen(grid_pen)
            painter.drawLine(QPointF(plot.left(), p.y()), QPointF(plot.right(), p.y()))
            painter.setPen(axis_pen)
            painter.drawText(
                QRectF(0, p.y() - 8, MARGIN_LEFT - 6, 16),
                int(Qt.AlignmentFlag.AlignRight | Qt.AlignmentFlag.AlignVCenter),
                _tick_label(float(value)),
            )
        for value in np.linspace(x0, x1, TICKS):
            p = to_screen(float(value), y0)
            painter.setPen(axis_pen)
            painter.drawLine(QPointF(p.x(), plot.bottom()), QPointF(p.x(), plot.bottom() + 4))
            painter.drawText(
                QRectF(p.x() - 30, plot.bottom() + 6, 60, 16), int(Qt.AlignmentFlag.AlignCenter), _tick_label(float(value))
            )

        painter.setPen(axis_pen)
        painter.drawLine(plot.bottomLeft(), plot.bottomRight())
        painter.drawLine(plot.bottomLeft(), plot.topLeft())
        painter.drawText(
            QRectF(plot.left(), height - 24, plot.width(), 20), int(Qt.AlignmentFlag.AlignCenter), chart.x_label
        )
        painter.drawText(QRectF(4, 4, width - 8, 16), int(Qt.AlignmentFlag.AlignLeft), chart.y_label)

        title_font = QFont(font)
        title_font.setBold(True)
        painter.setFont(title_font)
        painter.drawText(QRectF(0, 4, width, 20), int(Qt.AlignmentFlag.AlignHCenter), chart.title)
        painter.setFont(font)

        colors = scheme.series(len(chart.series))
        for k, (series, color) in enumerate(zip(chart.series, colors)):
            points = series.finite_points()
            pen = QPen(color)
            pen.setWidthF(2.0)
            painter.setPen(pen)
            painter.setBrush(color)
            polygon = QPolygonF([to_screen(x, y) for x, y in points])
            painter.drawPolyline(polygon)
            for x, y in points:
                painter.drawEllipse(to_screen(x, y), 3.0, 3.0)

            legend_y = plot.top() + 8 + 16 * k
            painter.drawLine(QPointF(plot.right() - 140, legend_y), QPointF(plot.right() - 120, legend_y))
            painter.setPen(axis_pen)
            painter.drawText(
                QRectF(plot.right() - 114, legend_y - 8, 110, 16),
                int(Qt.AlignmentFlag.AlignLeft | Qt.AlignmentFlag.AlignVCenter),
                series.name,
            )
    finally:
        painter.end()

    logger.debug("Wrote %s", path)
    return path


def _numeric(value: Any) -> float:
    if value == "inf":
        return math.inf
    if value == "-inf":
        return -math.inf
    if value is None:
        return math.nan
    return float(value)


def charts_for_report(report: dict[str, Any]) -> dict[str, LineChart]:
    """
    Chart definitions for a JSON report, keyed by a short file suffix.

    Raises:
        UsageError: for report kinds without a curve.
    """
    kind = report.get("kind")
    if kind == "retrieval":
        ks = sorted(report["r_at"], key=int)
        return {
            "recall": LineChart(
                "Recall vs K", "K", "R@K", [Series("R@K", [float(k) for k in ks], [report["r_at"][k] for k in ks])]
            )
        }
    if kind == "degradation":
        sigmas = report["sigmas"]
        shifts = [float(s) for s in report["shifts"]]
        return {
            "psnr_noise": LineChart(
                "PSNR vs noise",
                "sigma",
                "PSNR (dB)",
                [
                    Series("clipped", sigmas, [_numeric(v) for v in report["psnr"]]),
                    Series("unclipped", sigmas, [_numeric(v) for v in report["psnr_unclipped"]]),
                ],
            ),
            "ssim_noise": LineChart("SSIM vs noise", "sigma", "SSIM", [Series("SSIM", sigmas, report["ssim_noise"])]),
            "psnr_shift": LineChart(
                "PSNR vs shift", "shift (px)", "PSNR (dB)", [Series("PSNR", shifts, [_numeric(v) for v in report["psnr_shift"]])]
            ),
            "ssim_shift": LineChart("SSIM vs shift", "shift (px)", "SSIM", [Series("SSIM", shifts, report["ssim_shift"])]),
        }
    if kind == "ode_steps":
        rows = report["rows"]
        steps = [float(r["steps"]) for r in rows]
        direction = report.get("direction", "")
        return {
            "mse": LineChart(f"MSE vs ODE steps ({direction})", "steps", "MSE", [Series("MSE", steps, [r["mse"] for r in rows])]),
            "ssim": LineChart(
                f"SSIM vs ODE steps ({direction})", "steps", "SSIM", [Series("SSIM", steps, [r["ssim"] for r in rows])]
            ),
            "time": LineChart(
                f"Wall time vs ODE steps ({direction})",
                "steps",
                "seconds",
                [Series("wall time", steps, [r["wall_time"] for r in rows])],
            ),
        }
    raise UsageError(f"Reports of kind {kind!r} have no curves to plot")


def plot_report(report_path: Union[str, Path], out_dir: Union[str, Path], palette: str = "viridis") -> list[Path]:
    """Writes one SVG per chart of the report, named ``<report stem>_<chart>.svg``."""
    report_path = Path(report_path)
    try:
        report = json.loads(report_path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise DataError(f"Report not found: {report_path}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"{report_path}: not a JSON report ({e})") from e

    out_dir = Path(out_dir)
    return [
        render_svg(chart, out_dir / f"{report_path.stem}_{suffix}.svg", palette=palette)
        for suffix, chart in charts_for_report(report).items()
    ]


def plot_reports(
    report_paths: Sequence[Union[str, Path]], out_dir: Union[str, Path], palette: str = "viridis"
) -> list[Path]:
    written: list[Path] = []
    for path in report_paths:
        written.extend(plot_report(path, out_dir, palette))
    return written
