import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal, Optional, Union

import numpy as np

from crossview.core.errors import DataError, ManifestParseError, UsageError
from crossview.data import synth
from crossview.data.images import write_png

logger = logging.getLogger(__name__)

Protocol = Literal["one_to_one", "many_to_one"]
Split = Literal["train", "val", "test"]

MANIFEST_KEYS = ("id", "ground", "satellite", "positives", "split")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ManifestEntry:
    """
    One ground query. ``ground`` and ``satellite`` are paths relative to the
    manifest root; ``positives`` lists satellite ids (file stems).
    """

    id: str
    ground: str
    satellite: str
    positives: tuple[str, ...]
    split: Split = "train"

    @property
    def satellite_id(self) -> str:
        return Path(self.satellite).stem

    def to_json(self) -> str:
        record = {
            "id": self.id,
            "ground": self.ground,
            "satellite": self.satellite,
            "positives": list(self.positives),
            "split": self.split,
        }
        return json.dumps(record)


@dataclass
class DatasetManifest:
    """
    Paired dataset description: ground queries, the satellite each was taken
    under, and the satellites that count as correct retrievals.
    """

    entries: list[ManifestEntry]
    protocol: Protocol = "one_to_one"
    root: Path = field(default_factory=Path)
    split: Optional[Split] = None
    # satellite paths that belong to the reference set without being any entry's own tile
    extra_references: tuple[str, ...] = ()

    def __post_init__(self):
        self.root = Path(self.root)
        self.validate()

    def __len__(self):
        return len(self.entries)

    def validate(self, check_files: bool = False):
        """
        Checks protocol soundness and, optionally, that every file exists.

        Raises:
            DataError: on a dangling path (the message names the path).
            UsageError: on inconsistent positive lists.
        """
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise UsageError("Manifest ids must be unique.")

        satellite_ids = set(self.satellite_ids())
        for entry in self.entries:
            if entry.split not in SPLITS:
                raise UsageError(f"Entry {entry.id}: unknown split {entry.split!r}")
            if self.protocol == "one_to_one":
                if entry.positives != (entry.id,) or entry.satellite_id != entry.id:
                    raise UsageError(
                        f"Entry {entry.id}: one_to_one entries must be their own single positive"
                    )
            elif len(entry.positives) == 0:
                raise UsageError(f"Entry {entry.id}: many_to_one positives must be non-empty")
            if entry.satellite_id not in entry.positives:
                raise UsageError(f"Entry {entry.id}: own satellite missing from positives")

            unknown = [p for p in entry.positives if p not in satellite_ids]
            if unknown and self.protocol == "one_to_one":
                raise UsageError(f"Entry {entry.id}: unknown positives {unknown}")

        if check_files:
            paths = [p for e in self.entries for p in (e.ground, e.satellite)]
            for rel in [*paths, *self.extra_references]:
                if not (self.root / rel).exists():
                    raise DataError(f"Missing file referenced by manifest: {self.root / rel}")

    def ground_path(self, entry: ManifestEntry) -> Path:
        return self.root / entry.ground

    def satellite_path(self, entry: ManifestEntry) -> Path:
        return self.root / entry.satellite

    def satellite_ids(self) -> list[str]:
        """Unique satellite ids in first-appearance order (the reference set)."""
        seen: dict[str, None] = {}
        for entry in self.entries:
            seen.setdefault(entry.satellite_id, None)
        for rel in self.extra_references:
            seen.setdefault(Path(rel).stem, None)
        return list(seen)

    def satellite_paths(self) -> list[Path]:
        paths: dict[str, Path] = {}
        for entry in self.entries:
            paths.setdefault(entry.satellite_id, self.satellite_path(entry))
        for rel in self.extra_references:
            paths.setdefault(Path(rel).stem, self.root / rel)
        return list(paths.values())

    def positive_indices(self, primary_only: bool = False) -> list[list[int]]:
        """
        Reference-set indices of each entry's positives. Positives whose
        satellite is not part of this manifest (e.g. a semi-positive from
        another split) are dropped.
        """
        index = {sid: i for i, sid in enumerate(self.satellite_ids())}
        result = []
        for entry in self.entries:
            ids = (entry.satellite_id,) if primary_only else entry.positives
            result.append([index[p] for p in ids if p in index])
        return result

    def queries_for_satellite(self, satellite_id: str) -> list[str]:
        """Ids of the ground entries that list ``satellite_id`` as a positive."""
        return [e.id for e in self.entries if satellite_id in e.positives]

    def subset(self, split: Optional[Split]) -> "DatasetManifest":
        if split is None:
            return self
        entries = [e for e in self.entries if e.split == split]
        own = {e.satellite_id for e in entries}
        wanted = {p for e in entries for p in e.positives if p not in own}
        known = {Path(e.satellite).stem: e.satellite for e in self.entries}
        known.update({Path(rel).stem: rel for rel in self.extra_references})
        extra = tuple(known[p] for p in sorted(wanted) if p in known)
        return DatasetManifest(
            entries=entries, protocol=self.protocol, root=self.root, split=split, extra_references=extra
        )

    def save(self, path: Union[str, Path]):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for entry in self.entries:
                f.write(entry.to_json() + "\n")


def _infer_protocol(entries: Iterable[ManifestEntry]) -> Protocol:
    for e in entries:
        if e.positives != (e.id,) or e.satellite_id != e.id:
            return "many_to_one"
    return "one_to_one"


def load_manifest(path: Union[str, Path], check_files: bool = True) -> DatasetManifest:
    """
    Loads a JSON Lines manifest. Relative paths resolve against the manifest's
    directory.

    Raises:
        ManifestParseError: malformed line (with its line number).
        DataError: missing manifest or dangling image path.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"Manifest not found: {path}")

    entries = []
    with open(path, encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestParseError(f"invalid JSON ({e.msg})", path, line_number) from e
            if not isinstance(record, dict):
                raise ManifestParseError("expected a JSON object", path, line_number)
            missing = [k for k in MANIFEST_KEYS if k not in record]
            if missing:
                raise ManifestParseError(f"missing keys {missing}", path, line_number)
            positives = record["positives"]
            if not isinstance(positives, list) or not all(isinstance(p, str) for p in positives):
                raise ManifestParseError("positives must be a list of ids", path, line_number)
            if record["split"] not in SPLITS:
                raise ManifestParseError(f"unknown split {record['split']!r}", path, line_number)
            entries.append(
                ManifestEntry(
                    id=str(record["id"]),
                    ground=str(record["ground"]),
                    satellite=str(record["satellite"]),
                    positives=tuple(positives),
                    split=record["split"],
                )
            )

    manifest = DatasetManifest(entries=entries, protocol=_infer_protocol(entries), root=path.parent)
    if check_files:
        manifest.validate(check_files=True)
    return manifest


def split_for_index(index: int) -> Split:
    """Interleaved 6:1:1 train/val/test assignment."""
    slot = index % 8
    if slot == 6:
        return "val"
    if slot == 7:
        return "test"
    return "train"


def build_dataset(
    n_scenes: int,
    seed: int,
    protocol: Protocol,
    out_dir: Union[str, Path],
    k: int = 2,
    satellite_size: int = synth.DEFAULT_SATELLITE_SIZE,
    pano_width: int = synth.DEFAULT_PANO_WIDTH,
    pano_height: int = synth.DEFAULT_PANO_HEIGHT,
    v_range: float = synth.DEFAULT_V_RANGE,
) -> DatasetManifest:
    """
    Renders ``n_scenes`` synthetic scenes and writes PNGs plus ``manifest.jsonl``.

    In ``many_to_one`` mode every satellite tile is shared by ``k`` panoramas
    taken from jittered camera positions.
    """
    if n_scenes < 2:
        raise UsageError("build_dataset needs at least 2 scenes.")
    if protocol == "many_to_one" and not 1 <= k <= 4:
        raise UsageError("many_to_one clones each satellite for k in 1..4 panoramas.")
    if not 0.0 < v_range <= math.pi:
        raise UsageError(f"v_range must lie in (0, pi], got {v_range}")

    out_dir = Path(out_dir)
    try:
        (out_dir / "satellite").mkdir(parents=True, exist_ok=True)
        (out_dir / "ground").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"Cannot create dataset directory {out_dir}: {e}") from e

    entries = []
    for i in range(n_scenes):
        scene = synth.generate_scene(seed * 1_000_003 + i)
        split = split_for_index(i)

        if protocol == "one_to_one":
            sid = f"{i:05d}"
            sat_rel, ground_rel = f"satellite/{sid}.png", f"ground/{sid}.png"
            write_png(out_dir / sat_rel, synth.render_satellite(scene, satellite_size))
            pano = synth.render_panorama(scene, pano_width, pano_height, v_range)
            write_png(out_dir / ground_rel, pano.pixels)
            entries.append(ManifestEntry(sid, ground_rel, sat_rel, (sid,), split))
            continue

        sid = f"sat_{i:05d}"
        sat_rel = f"satellite/{sid}.png"
        write_png(out_dir / sat_rel, synth.render_satellite(scene, satellite_size))
        jitter_rng = np.random.default_rng([seed, i])
        for j in range(k):
            gid = f"{i:05d}_{j}"
            ground_rel = f"ground/{gid}.png"
            moved = synth.jitter_scene(scene, jitter_rng)
            pano = synth.render_panorama(moved, pano_width, pano_height, v_range)
            write_png(out_dir / ground_rel, pano.pixels)
            entries.append(ManifestEntry(gid, ground_rel, sat_rel, (sid,), split))

    manifest = DatasetManifest(entries=entries, protocol=protocol, root=out_dir)
    manifest.save(out_dir / "manifest.jsonl")
    logger.info("Wrote %d entries (%s) to %s", len(entries), protocol, out_dir)
    return manifest
