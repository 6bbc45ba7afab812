"""
``crossview`` command line.

Every subcommand accepts ``--config``, ``--seed`` and ``--verbose``. Results go
to files; errors go to standard error and map to the exit code of their class.
"""

import argparse
import difflib
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from crossview import __version__
from crossview.core.embedding_bank import EmbeddingBank
from crossview.core.errors import CrossViewError, UsageError
from crossview.core.panorama import CropSpec, PanoramaImage
from crossview.data import synth
from crossview.data.images import read_rgb, write_png
from crossview.data.manifest import DatasetManifest, build_dataset, load_manifest
from crossview.evaluation.retrieval import evaluate_retrieval
from crossview.evaluation.studies import degradation_sweep, evaluate_synthesis, ode_step_ablation, synthesis_report_dict
from crossview.geometry.e2p import default_crop_specs, e2p_transform
from crossview.models.geoflow import synthesize
from crossview.rendering.palette import PALETTES
from crossview.rendering.plots import plot_reports
from crossview.training import checkpoint
from crossview.training.config import RunConfig, SamplerConfig, cache_dir, merge, preset
from crossview.training.trainer import configure_determinism, load_models, run_schedule

logger = logging.getLogger("crossview")

SPLITS = ("train", "val", "test")


def parse_angle(text: str) -> float:
    """Radians, or degrees with a ``deg`` suffix (``90deg``)."""
    value = text.strip().lower()
    try:
        if value.endswith("deg"):
            return math.radians(float(value[:-3]))
        if value.endswith("rad"):
            return float(value[:-3])
        return float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an angle: {text!r} (use radians or e.g. 90deg)") from None


class _Parser(argparse.ArgumentParser):
    """Raises UsageError instead of exiting with status 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- shared helpers -----------------------------------------------------------


def load_config(args) -> RunConfig:
    """Flags override the config file, which overrides the defaults."""
    config = RunConfig.from_file(args.config) if args.config else preset()
    return merge(config, {"seed": args.seed})


def model_config(args, stored: RunConfig) -> RunConfig:
    """
    Configuration for subcommands that run a checkpoint: flags override the
    config file, which overrides the configuration stored in the checkpoint.
    Seeds the global generators from the result.
    """
    config = RunConfig.from_file(args.config) if args.config else stored
    config = merge(config, {"seed": args.seed})
    configure_determinism(config)
    return config


def write_json(path, report: dict[str, Any]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("Wrote %s", path)


def _split_manifest(path, split: Optional[str]) -> DatasetManifest:
    manifest = load_manifest(path).subset(split)
    if len(manifest) == 0:
        raise UsageError(f"{path}: no entries in split {split!r}")
    return manifest


def _pairs(manifest: DatasetManifest) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(read_rgb(manifest.ground_path(e)), read_rgb(manifest.satellite_path(e))) for e in manifest.entries]


def _embed_manifest(manifest: DatasetManifest, geomap) -> tuple[EmbeddingBank, EmbeddingBank]:
    grounds = geomap.embed_grounds([read_rgb(manifest.ground_path(e)) for e in manifest.entries])
    satellites = geomap.embed_satellites([read_rgb(p) for p in manifest.satellite_paths()])
    return (
        EmbeddingBank(grounds.numpy(), [e.id for e in manifest.entries]),
        EmbeddingBank(satellites.numpy(), manifest.satellite_ids()),
    )


# -- subcommands --------------------------------------------------------------


def cmd_gen_data(args) -> int:
    config = load_config(args)
    build_dataset(
        n_scenes=args.n,
        seed=config.seed,
        protocol=args.protocol,
        out_dir=args.out,
        k=args.k,
        satellite_size=args.sat_size,
        pano_width=args.pano_width,
        pano_height=args.pano_height,
        v_range=args.v_range,
    )
    return 0


def cmd_e2p(args) -> int:
    config = load_config(args)
    pano = PanoramaImage(read_rgb(args.panorama), v_range=args.v_range)
    size = args.size or config.backend.ground_crop_size
    if args.yaws:
        fov_h = args.fov_h if args.fov_h is not None else config.geomap.crop_fov
        fov_v = args.fov_v if args.fov_v is not None else fov_h
        specs = [CropSpec(yaw, args.pitch, fov_h, fov_v, size, size) for yaw in args.yaws]
    else:
        specs = default_crop_specs(size, config.geomap.base_yaw, config.geomap.num_crops, config.geomap.crop_fov)

    out = Path(args.out)
    sidecar = []
    for k, crop in enumerate(e2p_transform(pano, specs)):
        image, mask = f"crop_{k}.png", f"crop_{k}_mask.png"
        write_png(out / image, crop.pixels)
        write_png(out / mask, crop.valid)
        sidecar.append({"spec": crop.spec.to_dict(), "image": image, "mask": mask})
    write_json(out / "crops.json", {"panorama": str(args.panorama), "v_range": pano.v_range, "crops": sidecar})
    return 0


def cmd_embed(args) -> int:
    stored, geomap, _, ckpt_hash = load_models(args.checkpoint)
    model_config(args, stored)
    manifest = _split_manifest(args.manifest, args.split)
    ground_bank, satellite_bank = _embed_manifest(manifest, geomap)
    if args.view in ("ground", "both"):
        ground_bank.save(f"{args.out}.ground")
    if args.view in ("satellite", "both"):
        satellite_bank.save(f"{args.out}.satellite")
    logger.info("Embedded %d grounds, %d satellites with checkpoint %s", len(ground_bank), len(satellite_bank), ckpt_hash[:12])
    return 0


def cmd_train(args) -> int:
    if args.resume and not args.config:
        # resume under the checkpoint configuration, minus its epoch budget
        header, _ = checkpoint.load(args.resume)
        stored = {**header["config"], "max_epochs": None}
        config = merge(RunConfig.from_dict(stored), {"seed": args.seed})
    else:
        config = load_config(args)
    config = merge(config, {"max_epochs": args.max_epochs})
    manifest = load_manifest(args.manifest)
    out = Path(args.out) if args.out else cache_dir() / "runs" / config.fingerprint()
    last_stage = 3 if args.stage == "all" else int(args.stage)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.json")
    run_schedule(config, manifest, out, resume=args.resume, last_stage=last_stage)
    return 0


def cmd_synthesize(args) -> int:
    stored, geomap, flow, _ = load_models(args.checkpoint)
    config = model_config(args, stored)
    steps = args.steps or config.sampler.steps
    image = synthesize(read_rgb(args.input), args.direction, geomap, flow, SamplerConfig(steps, args.direction))
    write_png(args.out, image)
    return 0


def cmd_eval_retrieval(args) -> int:
    config = load_config(args)
    manifest = _split_manifest(args.manifest, args.split)
    if args.banks:
        ground_bank = EmbeddingBank.load(f"{args.banks}.ground")
        satellite_bank = EmbeddingBank.load(f"{args.banks}.satellite")
        if satellite_bank.ids != manifest.satellite_ids():
            raise UsageError(f"{args.banks}: satellite ids do not match the {args.split} split of the manifest")
        ckpt_hash = None
    else:
        if not args.checkpoint:
            raise UsageError("eval-retrieval needs --checkpoint or --banks")
        stored, geomap, _, ckpt_hash = load_models(args.checkpoint)
        config = model_config(args, stored)
        ground_bank, satellite_bank = _embed_manifest(manifest, geomap)

    report = evaluate_retrieval(
        ground_bank,
        satellite_bank,
        manifest.positive_indices(primary_only=True),
        positive_sets=manifest.positive_indices(),
    ).to_dict()
    report["protocol"] = manifest.protocol
    report["seed"] = config.seed
    if ckpt_hash is not None:
        report["checkpoint_sha256"] = ckpt_hash
    write_json(args.out, report)
    return 0


def cmd_eval_synthesis(args) -> int:
    stored, geomap, flow, ckpt_hash = load_models(args.checkpoint)
    config = model_config(args, stored)
    steps = args.steps or config.sampler.steps
    manifest = _split_manifest(args.manifest, args.split)
    reports = evaluate_synthesis(_pairs(manifest), geomap, flow, steps=steps, shuffle_seed=config.seed)
    write_json(args.out, synthesis_report_dict(reports, steps, ckpt_hash, shuffle_seed=config.seed))
    return 0


def cmd_degradation(args) -> int:
    config = load_config(args)
    curves = degradation_sweep(read_rgb(args.image), args.sigmas, args.shifts, seed=config.seed)
    write_json(args.out, curves.to_dict())
    return 0


def cmd_ablate_steps(args) -> int:
    stored, geomap, flow, ckpt_hash = load_models(args.checkpoint)
    model_config(args, stored)
    manifest = _split_manifest(args.manifest, args.split)
    pairs = _pairs(manifest)
    if args.direction == "s2g":
        pairs = [(s, g) for g, s in pairs]
    report = ode_step_ablation(pairs, geomap, flow, args.steps_list, args.direction).to_dict()
    report["checkpoint_sha256"] = ckpt_hash
    write_json(args.out, report)
    return 0


def cmd_plot(args) -> int:
    for path in plot_reports(args.report, args.out, args.palette):
        logger.info("Wrote %s", path)
    return 0


# -- parser -------------------------------------------------------------------


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="RunConfig JSON file")
    common.add_argument("--seed", type=int, default=None, help="Overrides the config seed")
    common.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    return common


COMMANDS: dict[str, tuple[Callable[[argparse.Namespace], int], str]] = {
    "gen-data": (cmd_gen_data, "Render a synthetic paired dataset"),
    "e2p": (cmd_e2p, "Cut perspective crops out of an equirectangular panorama"),
    "embed": (cmd_embed, "Write embedding banks for a manifest split"),
    "train": (cmd_train, "Run the staged training schedule"),
    "synthesize": (cmd_synthesize, "Synthesise the other view of an image"),
    "eval-retrieval": (cmd_eval_retrieval, "Recall@K, Recall@1% and hit rate"),
    "eval-synthesis": (cmd_eval_synthesis, "Reconstruction metrics for both directions"),
    "degradation": (cmd_degradation, "PSNR/SSIM under noise and vertical shifts"),
    "ablate-steps": (cmd_ablate_steps, "Synthesis quality against the number of ODE steps"),
    "plot": (cmd_plot, "SVG curves from report files"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crossview", description="Cross-view geo-localization and synthesis pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="<subcommand>", parser_class=_Parser)
    common = _common()

    def add(name: str) -> argparse.ArgumentParser:
        handler, help_text = COMMANDS[name]
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(handler=handler)
        return p

    p = add("gen-data")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n", type=int, required=True, help="Number of scenes")
    p.add_argument("--protocol", choices=("one_to_one", "many_to_one"), default="one_to_one")
    p.add_argument("--k", type=int, default=2, help="Panoramas per satellite (many_to_one)")
    p.add_argument("--sat-size", type=int, default=synth.DEFAULT_SATELLITE_SIZE)
    p.add_argument("--pano-width", type=int, default=synth.DEFAULT_PANO_WIDTH)
    p.add_argument("--pano-height", type=int, default=synth.DEFAULT_PANO_HEIGHT)
    p.add_argument("--v-range", type=parse_angle, default=synth.DEFAULT_V_RANGE)

    p = add("e2p")
    p.add_argument("--panorama", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--v-range", type=parse_angle, default=math.pi)
    p.add_argument("--yaws", type=parse_angle, nargs="+", default=None)
    p.add_argument("--pitch", type=parse_angle, default=0.0)
    p.add_argument("--fov-h", type=parse_angle, default=None)
    p.add_argument("--fov-v", type=parse_angle, default=None)
    p.add_argument("--size", type=int, default=None, help="Square crop size in pixels")

    p = add("embed")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=str, required=True, help="Bank prefix")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--view", choices=("ground", "satellite", "both"), default="both")

    p = add("train")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, default=None, help="Run directory (default: $GEO2_CACHE/runs/<fingerprint>)")
    p.add_argument("--stage", choices=("1", "2", "3", "all"), default="all")
    p.add_argument("--resume", type=Path, default=None)
    p.add_argument("--max-epochs", type=int, default=None, help="Stop once this many epochs are done")

    p = add("synthesize")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--direction", choices=("g2s", "s2g"), required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int, default=None)

    p = add("eval-retrieval")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--banks", type=str, default=None, help="Prefix of banks written by embed --view both")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", choices=SPLITS, default="test")

    p = add("eval-synthesis")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--steps", type=int, default=None)

    p = add("degradation")
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--sigmas", type=float, nargs="+", default=[0.0, 5.0, 10.0, 20.0, 40.0])
    p.add_argument("--shifts", type=int, nargs="+", default=[0, 4, 16])

    p = add("ablate-steps")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--steps-list", type=int, nargs="+", default=[2, 5, 10])
    p.add_argument("--direction", choices=("g2s", "s2g"), default="g2s")

    p = add("plot")
    p.add_argument("--report", type=Path, action="append", required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--palette", choices=sorted(PALETTES), default="viridis")

    return parser


def _check_command(argv: Sequence[str]):
    if not argv or argv[0].startswith("-"):
        return
    if argv[0] not in COMMANDS:
        close = difflib.get_close_matches(argv[0], list(COMMANDS), n=1)
        hint = f"; did you mean {close[0]!r}?" if close else ""
        raise UsageError(f"unknown subcommand {argv[0]!r}{hint}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    level = root.level
    root.addHandler(handler)
    try:
        try:
            _check_command(argv)
            args = build_parser().parse_args(argv)
        except SystemExit as e:
            # --help and --version
            return int(e.code or 0)
        if getattr(args, "handler", None) is None:
            raise UsageError("missing subcommand; see crossview --help")
        root.setLevel(logging.DEBUG if args.verbose else logging.INFO)
        return args.handler(args)
    except CrossViewError as e:
        print(f"crossview: error: {e}", file=sys.stderr)
        return e.exit_code
    finally:
        root.removeHandler(handler)
        root.setLevel(level)


if __name__ == "__main__":
    sys.exit(main())
