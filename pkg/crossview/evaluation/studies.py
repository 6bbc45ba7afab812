"""
Metric studies: noise/shift degradation curves, ODE step ablation, and the
paired-versus-shuffled synthesis evaluation.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from crossview.core.errors import UsageError
from crossview.evaluation.image_quality import image_quality, json_float, mse, psnr_from_mse, ssim
from crossview.models.geoflow import GeoFlow, synthesize
from crossview.models.geomap import GeoMap
from crossview.training.config import SamplerConfig

logger = logging.getLogger(__name__)


@dataclass
class DegradationCurves:
    sigmas: list[float]
    psnr_unclipped: list[float]
    psnr: list[float]
    ssim_noise: list[float]
    shifts: list[int]
    psnr_shift: list[float]
    ssim_shift: list[float]

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "degradation",
            "sigmas": self.sigmas,
            "psnr_unclipped": [json_float(v) for v in self.psnr_unclipped],
            "psnr": [json_float(v) for v in self.psnr],
            "ssim_noise": self.ssim_noise,
            "shifts": self.shifts,
            "psnr_shift": [json_float(v) for v in self.psnr_shift],
            "ssim_shift": self.ssim_shift,
        }


def degradation_sweep(
    image: np.ndarray,
    noise_sigmas: Sequence[float] = (0.0, 5.0, 10.0, 20.0, 40.0),
    shift_pixels: Sequence[int] = (0, 4, 16),
    seed: int = 0,
    max_value: float = 255.0,
) -> DegradationCurves:
    """
    One seed-fixed standard-normal pattern n scaled by each sigma. The unclipped
    curve evaluates image + sigma n in float, the reported curve clips to
    [0, MAX]. Shifts roll the rows downwards by whole pixels.
    """
    sigmas = [float(s) for s in noise_sigmas]
    if any(s < 0 for s in sigmas) or sigmas != sorted(sigmas):
        raise UsageError("Noise sigmas must be non-negative and ascending.")
    shifts = [int(s) for s in shift_pixels]

    reference = np.asarray(image, dtype=np.float64)
    noise = np.random.default_rng(seed).standard_normal(reference.shape)

    psnr_unclipped, psnr_clipped, ssim_noise = [], [], []
    for sigma in sigmas:
        degraded = reference + sigma * noise
        psnr_unclipped.append(psnr_from_mse(mse(reference, degraded), max_value))
        clipped = np.clip(degraded, 0.0, max_value)
        psnr_clipped.append(psnr_from_mse(mse(reference, clipped), max_value))
        ssim_noise.append(ssim(reference, clipped, max_value))

    psnr_shift, ssim_shift = [], []
    for shift in shifts:
        shifted = np.roll(reference, shift, axis=0)
        psnr_shift.append(psnr_from_mse(mse(reference, shifted), max_value))
        ssim_shift.append(ssim(reference, shifted, max_value))

    return DegradationCurves(sigmas, psnr_unclipped, psnr_clipped, ssim_noise, shifts, psnr_shift, ssim_shift)


@dataclass
class StepAblationRow:
    steps: int
    mse: float
    psnr: float
    ssim: float
    wall_time: float


@dataclass
class StepAblation:
    direction: str
    rows: list[StepAblationRow] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "ode_steps",
            "direction": self.direction,
            "rows": [
                {"steps": r.steps, "mse": r.mse, "psnr": json_float(r.psnr), "ssim": r.ssim, "wall_time": r.wall_time}
                for r in self.rows
            ],
        }


def _quality_against(flow: GeoFlow, outputs: list[np.ndarray], targets: Sequence[np.ndarray]):
    reports = [image_quality(out, flow.codec.prepare(target)) for out, target in zip(outputs, targets)]
    mean_mse = float(np.mean([r.mse for r in reports]))
    return mean_mse, float(np.mean([r.ssim for r in reports])), reports


def ode_step_ablation(
    pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    geomap: GeoMap,
    flow: GeoFlow,
    steps_list: Sequence[int] = (2, 5, 10),
    direction: str = "g2s",
) -> StepAblation:
    """
    One synthesis pass per step count over (input, target) pairs.
    PSNR is derived from the mean MSE over the set.
    """
    if not pairs:
        raise UsageError("The step ablation needs at least one pair.")
    result = StepAblation(direction=direction)
    for steps in steps_list:
        config = SamplerConfig(steps=int(steps), direction=direction)  # type: ignore[arg-type]
        start = time.perf_counter()
        outputs = [synthesize(src, direction, geomap, flow, config) for src, _ in pairs]  # type: ignore[arg-type]
        elapsed = time.perf_counter() - start
        mean_mse, mean_ssim, _ = _quality_against(flow, outputs, [tgt for _, tgt in pairs])
        result.rows.append(StepAblationRow(int(steps), mean_mse, psnr_from_mse(mean_mse), mean_ssim, elapsed))
        logger.info("steps=%d mse=%.4f ssim=%.4f (%.2fs)", steps, mean_mse, mean_ssim, elapsed)
    return result


@dataclass
class DirectionReport:
    mse: float
    l2: float
    psnr: float
    ssim: float
    paired_win_rate: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "mse": self.mse,
            "l2": self.l2,
            "psnr": json_float(self.psnr),
            "ssim": self.ssim,
            "paired_win_rate": self.paired_win_rate,
        }


def baseline_pairing(n: int, shuffle_seed: int = 0) -> list[int]:
    """Foreign target index for each of ``n`` pairs under a seeded shuffle."""
    if n < 2:
        raise UsageError("The shuffled baseline needs at least two pairs.")
    perm = np.random.default_rng(shuffle_seed).permutation(n)
    # every output is compared to a foreign target
    perm = np.where(perm == np.arange(n), (perm + 1) % n, perm)
    return [int(p) for p in perm]


def paired_win_rate(outputs: Sequence[np.ndarray], targets: Sequence[np.ndarray], shuffle_seed: int = 0) -> float:
    """
    Fraction of outputs closer in MSE to their own target than to the target
    of another pair under ``baseline_pairing``.
    """
    perm = baseline_pairing(len(outputs), shuffle_seed)
    wins = sum(1 for i, j in enumerate(perm) if mse(outputs[i], targets[i]) < mse(outputs[i], targets[j]))
    return wins / len(outputs)



def evaluate_synthesis(
    pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    geomap: GeoMap,
    flow: GeoFlow,
    steps: int = 10,
    directions: Sequence[str] = ("g2s", "s2g"),
    shuffle_seed: int = 0,
) -> dict[str, DirectionReport]:
    """
    Reconstruction error of synthesised views against their references.

    Args:
        pairs: (ground, satellite) images.
    """
    reports: dict[str, DirectionReport] = {}
    for direction in directions:
        config = SamplerConfig(steps=steps, direction=direction)  # type: ignore[arg-type]
        if direction == "g2s":
            sources, targets = [g for g, _ in pairs], [s for _, s in pairs]
        else:
            sources, targets = [s for _, s in pairs], [g for g, _ in pairs]
        outputs = [synthesize(src, direction, geomap, flow, config) for src in sources]  # type: ignore[arg-type]
        prepared = [flow.codec.prepare(t) for t in targets]
        mean_mse, mean_ssim, quality = _quality_against(flow, outputs, targets)
        reports[direction] = DirectionReport(
            mse=mean_mse,
            l2=float(np.mean([q.l2 for q in quality])),
            psnr=psnr_from_mse(mean_mse),
            ssim=mean_ssim,
            paired_win_rate=paired_win_rate(outputs, prepared, shuffle_seed) if len(pairs) >= 2 else float("nan"),
        )
    return reports


def synthesis_report_dict(
    reports: dict[str, DirectionReport],
    steps: int,
    checkpoint_hash: Optional[str] = None,
    shuffle_seed: int = 0,
):
    out: dict[str, Any] = {"kind": "synthesis", "steps": steps, "shuffle_seed": shuffle_seed}
    if checkpoint_hash is not None:
        out["checkpoint_sha256"] = checkpoint_hash
    out.update({direction: r.to_dict() for direction, r in reports.items()})
    return out
