import json

import numpy as np
import pytest
from scipy.io import savemat

from crossview.core.errors import DataError, ManifestParseError, UsageError
from crossview.data.layouts import load_real_layout, load_vigor
from crossview.data.manifest import DatasetManifest, ManifestEntry, build_dataset, load_manifest, split_for_index

SMALL = dict(satellite_size=32, pano_width=64, pano_height=16)


def test_split_assignment():
    assert [split_for_index(i) for i in range(8)] == ["train"] * 6 + ["val", "test"]
    assert split_for_index(14) == "val"


def test_build_one_to_one(tmp_path):
    manifest = build_dataset(8, seed=0, protocol="one_to_one", out_dir=tmp_path, **SMALL)
    assert len(manifest) == 8
    assert (tmp_path / "manifest.jsonl").exists()

    loaded = load_manifest(tmp_path / "manifest.jsonl")
    assert loaded.protocol == "one_to_one"
    assert [e.id for e in loaded.entries] == [f"{i:05d}" for i in range(8)]
    assert all(e.positives == (e.id,) for e in loaded.entries)
    assert loaded.entries[6].split == "val"
    assert loaded.entries[7].split == "test"
    assert loaded.positive_indices() == [[i] for i in range(8)]


def test_build_is_byte_identical(tmp_path):
    build_dataset(4, seed=3, protocol="one_to_one", out_dir=tmp_path / "a", **SMALL)
    build_dataset(4, seed=3, protocol="one_to_one", out_dir=tmp_path / "b", **SMALL)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 9
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_build_many_to_one(tmp_path):
    manifest = build_dataset(4, seed=1, protocol="many_to_one", out_dir=tmp_path, k=3, **SMALL)
    assert len(manifest) == 12
    assert manifest.satellite_ids() == [f"sat_{i:05d}" for i in range(4)]
    assert manifest.queries_for_satellite("sat_00002") == ["00002_0", "00002_1", "00002_2"]
    assert manifest.positive_indices(primary_only=True)[4] == [1]


def test_build_rejects_bad_arguments(tmp_path):
    with pytest.raises(UsageError):
        build_dataset(1, seed=0, protocol="one_to_one", out_dir=tmp_path)
    with pytest.raises(UsageError):
        build_dataset(4, seed=0, protocol="many_to_one", out_dir=tmp_path, k=9)


def test_manifest_parse_error_reports_line(tmp_path):
    path = tmp_path / "manifest.jsonl"
    good = {"id": "a", "ground": "g.png", "satellite": "a.png", "positives": ["a"], "split": "train"}
    path.write_text(json.dumps(good) + "\n{not json\n")
    with pytest.raises(ManifestParseError) as info:
        load_manifest(path, check_files=False)
    assert info.value.line_number == 2

    path.write_text(json.dumps({"id": "a"}) + "\n")
    with pytest.raises(ManifestParseError):
        load_manifest(path, check_files=False)


def test_dangling_path_is_named(tmp_path):
    manifest = build_dataset(2, seed=0, protocol="one_to_one", out_dir=tmp_path, **SMALL)
    (tmp_path / manifest.entries[1].satellite).unlink()
    with pytest.raises(DataError, match="00001.png"):
        load_manifest(tmp_path / "manifest.jsonl")


def test_missing_manifest():
    with pytest.raises(DataError):
        load_manifest("/nonexistent/manifest.jsonl")


def test_one_to_one_must_be_self_positive():
    with pytest.raises(UsageError):
        DatasetManifest([ManifestEntry("a", "g/a.png", "s/a.png", ("b",))], protocol="one_to_one")
    with pytest.raises(UsageError):
        DatasetManifest([ManifestEntry("a", "g/a.png", "s/a.png", ("a",)), ManifestEntry("a", "g/b.png", "s/a.png", ("a",))])


def test_subset_keeps_split(tmp_path):
    manifest = build_dataset(16, seed=0, protocol="one_to_one", out_dir=tmp_path, **SMALL)
    test = manifest.subset("test")
    assert [e.id for e in test.entries] == ["00007", "00015"]
    assert test.split == "test"
    assert manifest.subset(None) is manifest


def test_cvusa_layout(tmp_path):
    (tmp_path / "splits").mkdir()
    (tmp_path / "splits" / "train-19zl.csv").write_text(
        "bingmap/19/0000001.jpg,streetview/panos/0000001.jpg,annotations/0000001.png\n"
        "bingmap/19/0000002.jpg,streetview/panos/0000002.jpg,annotations/0000002.png\n"
    )
    (tmp_path / "splits" / "val-19zl.csv").write_text("bingmap/19/0000003.jpg,streetview/panos/0000003.jpg,x\n")
    manifest = load_real_layout(tmp_path, "cvusa", check_files=False)
    assert [e.id for e in manifest.entries] == ["0000001", "0000002", "0000003"]
    assert [e.split for e in manifest.entries] == ["train", "train", "test"]
    assert manifest.entries[0].ground == "streetview/panos/0000001.jpg"


def test_cvact_layout(tmp_path):
    savemat(
        str(tmp_path / "ACT_data.mat"),
        {
            "panoIds": np.array(["p1", "p2", "p3"], dtype=object),
            "trainSet": {"trainInd": np.array([[1], [2]])},
            "valSet": {"valInd": np.array([[3]])},
        },
    )
    manifest = load_real_layout(tmp_path, "cvact", check_files=False)
    assert [e.split for e in manifest.entries] == ["train", "train", "test"]
    assert manifest.entries[2].ground == "streetview/p3_grdView.jpg"
    assert manifest.entries[2].satellite == "satview_polish/p3_satView_polish.jpg"


def _write_vigor(root, name, lines_by_city):
    for city in ("NewYork", "Seattle", "SanFrancisco", "Chicago"):
        folder = root / "splits" / city
        folder.mkdir(parents=True, exist_ok=True)
        for fname in name:
            (folder / fname).write_text("".join(lines_by_city.get((city, fname), [])))


def test_vigor_same_area_semi_positives(tmp_path):
    names = ("same_area_balanced_train.txt", "same_area_balanced_test.txt")
    line = "pano_a.jpg sat_1.png 1.0 2.0 sat_2.png 3.0 4.0 sat_3.png 5.0 6.0 sat_4.png 7.0 8.0\n"
    _write_vigor(
        tmp_path,
        names,
        {
            ("Chicago", "same_area_balanced_train.txt"): [line],
            ("Chicago", "same_area_balanced_test.txt"): ["pano_b.jpg sat_2.png 0 0 sat_1.png 1 1 sat_5.png 2 2 sat_6.png 3 3\n"],
        },
    )
    manifest = load_real_layout(tmp_path, "vigor", check_files=False)
    assert manifest.protocol == "many_to_one"
    first = manifest.entries[0]
    assert first.id == "Chicago/pano_a"
    assert first.satellite == "Chicago/satellite/sat_1.png"
    assert first.positives == ("sat_1", "sat_2", "sat_3", "sat_4")
    assert "Chicago/satellite/sat_3.png" in manifest.extra_references

    test = manifest.subset("test")
    assert test.satellite_ids()[0] == "sat_2"
    assert test.positive_indices(primary_only=True) == [[0]]
    assert sorted(test.positive_indices()[0]) == list(range(4))


def test_vigor_primary_only(tmp_path):
    names = ("same_area_balanced_train.txt", "same_area_balanced_test.txt")
    _write_vigor(tmp_path, names, {("Seattle", names[0]): ["p.jpg s1.png 0 0 s2.png 0 0\n"]})
    manifest = load_vigor(tmp_path, "same", semi_positives=False)
    assert manifest.entries[0].positives == ("s1",)
    assert manifest.extra_references == ()


def test_vigor_cross_area_splits(tmp_path):
    name = ("pano_label_balanced.txt",)
    _write_vigor(
        tmp_path,
        name,
        {(city, name[0]): [f"{city}_p.jpg {city}_s.png 0 0\n"] for city in ("NewYork", "Seattle", "SanFrancisco", "Chicago")},
    )
    manifest = load_real_layout(tmp_path, "vigor", area="cross", check_files=False)
    splits = {e.id.split("/")[0]: e.split for e in manifest.entries}
    assert splits == {"NewYork": "train", "Seattle": "train", "Chicago": "test", "SanFrancisco": "test"}


def test_vigor_malformed_line(tmp_path):
    names = ("same_area_balanced_train.txt", "same_area_balanced_test.txt")
    _write_vigor(tmp_path, names, {("NewYork", names[1]): ["p.jpg s1.png 0\n"]})
    with pytest.raises(ManifestParseError) as info:
        load_real_layout(tmp_path, "vigor", check_files=False)
    assert info.value.line_number == 1


def test_real_layout_errors(tmp_path):
    with pytest.raises(UsageError):
        load_real_layout(tmp_path, "kitti")  # type: ignore[arg-type]
    with pytest.raises(DataError):
        load_real_layout(tmp_path, "cvusa")
