import os

import pytest

from crossview.data.manifest import build_dataset, load_manifest
from crossview.training.config import (
    BackendConfig,
    CodecConfig,
    FlowConfig,
    GeoMapConfig,
    RunConfig,
    SamplerConfig,
)

# Qt draws the SVG plots without a display
os.environ.setdefault("QT_QPA_PLATFORM", "offscreen")

SMALL_SIZES = dict(satellite_size=32, pano_width=64, pano_height=16)


def tiny_config(**overrides) -> RunConfig:
    """A run small enough to train several epochs inside a unit test."""
    values = dict(
        t1=2,
        t2=1,
        t3=2,
        lr1=1e-3,
        lr2=1e-3,
        lr3=1e-3,
        batch_size=4,
        optimizer="adam",
        validate_every=1,
        sampler=SamplerConfig(steps=2),
        backend=BackendConfig(
            geometry_channels=8,
            geometry_size=8,
            token_dim=16,
            satellite_tokens=(2, 2),
            ground_tokens=(1, 4),
            satellite_size=32,
            pano_width=64,
            pano_height=16,
            ground_crop_size=16,
        ),
        geomap=GeoMapConfig(heads=2),
        codec=CodecConfig(image_size=16, factor=4),
        flow=FlowConfig(depth=1, hidden=16, heads=2, head_hidden=32),
    )
    values.update(overrides)
    return RunConfig(**values).validate()


@pytest.fixture
def config() -> RunConfig:
    return tiny_config()


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    """16 synthetic one-to-one pairs: 12 train, 2 val, 2 test."""
    out = tmp_path_factory.mktemp("dataset")
    build_dataset(16, seed=0, protocol="one_to_one", out_dir=out, **SMALL_SIZES)
    return out


@pytest.fixture
def manifest(dataset_dir):
    return load_manifest(dataset_dir / "manifest.jsonl")
