"""
Loaders for the directory layouts of the public cross-view benchmarks.

Each loader maps the dataset's pairing files onto a ``DatasetManifest`` whose
paths are relative to the dataset root. Held-out pairs are marked ``test``.
"""

import csv
import logging
from pathlib import Path
from typing import Literal, Union

import numpy as np
from scipy.io import loadmat

from crossview.core.errors import DataError, ManifestParseError, UsageError
from crossview.data.manifest import DatasetManifest, ManifestEntry

logger = logging.getLogger(__name__)

DatasetName = Literal["cvusa", "cvact", "vigor"]
VigorArea = Literal["same", "cross"]

CVUSA_SPLITS = {"train": "splits/train-19zl.csv", "test": "splits/val-19zl.csv"}

VIGOR_CITIES = ("NewYork", "Seattle", "SanFrancisco", "Chicago")
VIGOR_CROSS_TRAIN = ("NewYork", "Seattle")
VIGOR_CROSS_TEST = ("Chicago", "SanFrancisco")


def load_cvusa(root: Path) -> DatasetManifest:
    """``splits/*-19zl.csv`` rows are ``satellite,ground,annotation``."""
    entries = []
    for split, rel in CVUSA_SPLITS.items():
        path = root / rel
        if not path.exists():
            raise DataError(f"CVUSA split file not found: {path}")
        with open(path, newline="", encoding="utf-8") as f:
            for line_number, row in enumerate(csv.reader(f), start=1):
                if not row:
                    continue
                if len(row) < 2:
                    raise ManifestParseError("expected satellite,ground[,annotation]", path, line_number)
                satellite, ground = row[0].strip(), row[1].strip()
                sid = Path(satellite).stem
                entries.append(ManifestEntry(sid, ground, satellite, (sid,), split))  # type: ignore[arg-type]
    return DatasetManifest(entries=entries, protocol="one_to_one", root=root)


def _mat_indices(value) -> np.ndarray:
    # 1-based MATLAB indices
    return np.asarray(value, dtype=np.int64).ravel() - 1


def load_cvact(root: Path) -> DatasetManifest:
    """
    ``ACT_data.mat`` holds ``panoIds`` and 1-based ``trainSet.trainInd`` /
    ``valSet.valInd``. Images live in ``streetview/`` and ``satview_polish/``.
    """
    path = root / "ACT_data.mat"
    if not path.exists():
        raise DataError(f"CVACT index file not found: {path}")
    try:
        data = loadmat(str(path), simplify_cells=True)
        pano_ids = [str(p) for p in np.atleast_1d(data["panoIds"])]
        train = _mat_indices(data["trainSet"]["trainInd"])
        val = _mat_indices(data["valSet"]["valInd"])
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestParseError(f"unexpected ACT_data.mat structure ({e})", path) from e

    entries = []
    for split, indices in (("train", train), ("test", val)):
        for i in indices:
            if not 0 <= i < len(pano_ids):
                raise ManifestParseError(f"index {i + 1} outside panoIds", path)
            pid = pano_ids[i]
            sid = f"{pid}_satView_polish"
            entries.append(
                ManifestEntry(
                    id=sid,
                    ground=f"streetview/{pid}_grdView.jpg",
                    satellite=f"satview_polish/{sid}.jpg",
                    positives=(sid,),
                    split=split,  # type: ignore[arg-type]
                )
            )
    return DatasetManifest(entries=entries, protocol="one_to_one", root=root)


def _vigor_split_files(root: Path, area: VigorArea) -> list[tuple[str, Path, str]]:
    files = []
    if area == "same":
        for city in VIGOR_CITIES:
            for split in ("train", "test"):
                files.append((city, root / "splits" / city / f"same_area_balanced_{split}.txt", split))
    else:
        for city in VIGOR_CROSS_TRAIN:
            files.append((city, root / "splits" / city / "pano_label_balanced.txt", "train"))
        for city in VIGOR_CROSS_TEST:
            files.append((city, root / "splits" / city / "pano_label_balanced.txt", "test"))
    return files


def load_vigor(root: Path, area: VigorArea = "same", semi_positives: bool = True) -> DatasetManifest:
    """
    Label lines read ``pano sat dx dy sat dx dy ...``: the first satellite is the
    positive, the following ones are semi-positives that also cover the location.
    """
    if area not in ("same", "cross"):
        raise UsageError(f"VIGOR area must be 'same' or 'cross', got {area!r}")

    entries = []
    extra: dict[str, None] = {}
    for city, path, split in _vigor_split_files(root, area):
        if not path.exists():
            raise DataError(f"VIGOR label file not found: {path}")
        with open(path, encoding="utf-8") as f:
            for line_number, line in enumerate(f, start=1):
                tokens = line.split()
                if not tokens:
                    continue
                if len(tokens) < 4 or (len(tokens) - 1) % 3 != 0:
                    raise ManifestParseError("expected 'pano (sat dx dy)+'", path, line_number)
                pano = tokens[0]
                satellites = tokens[1::3]
                sat_rels = [f"{city}/satellite/{s}" for s in satellites]
                kept = sat_rels if semi_positives else sat_rels[:1]
                positives = tuple(Path(s).stem for s in kept)
                for rel in kept[1:]:
                    extra.setdefault(rel, None)
                entries.append(
                    ManifestEntry(
                        id=f"{city}/{Path(pano).stem}",
                        ground=f"{city}/panorama/{pano}",
                        satellite=sat_rels[0],
                        positives=positives,
                        split=split,  # type: ignore[arg-type]
                    )
                )
    return DatasetManifest(
        entries=entries, protocol="many_to_one", root=root, extra_references=tuple(extra)
    )


def load_real_layout(
    root: Union[str, Path],
    dataset: DatasetName,
    area: VigorArea = "same",
    check_files: bool = True,
) -> DatasetManifest:
    """
    Reads a benchmark's pairing files into a manifest.

    Raises:
        UsageError: unknown dataset name.
        DataError: missing pairing file or dangling image path.
        ManifestParseError: malformed pairing line.
    """
    root = Path(root)
    if dataset == "cvusa":
        manifest = load_cvusa(root)
    elif dataset == "cvact":
        manifest = load_cvact(root)
    elif dataset == "vigor":
        manifest = load_vigor(root, area)
    else:
        raise UsageError(f"Unknown dataset {dataset!r}; expected cvusa, cvact or vigor")

    if check_files:
        manifest.validate(check_files=True)
    logger.info("Loaded %s layout from %s: %d queries", dataset, root, len(manifest))
    return manifest
