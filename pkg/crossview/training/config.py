"""
Typed run configuration.

JSON files map one-to-one onto the nested dataclasses below; unknown keys are
rejected. ``RunConfig.fingerprint()`` hashes everything that changes results,
so checkpoints refuse to resume under a different configuration.
"""

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal, Optional, Union

from crossview.core.errors import ConfigurationError

PresetName = Literal["desk", "full"]

# ground crop resolution fed to the geometry backend, per benchmark
DATASET_CROP_SIZES = {"cvusa": 224, "cvact": 416, "vigor": 512}

CACHE_ENV = "GEO2_CACHE"


def cache_dir() -> Path:
    """Scratch directory for runs without an explicit output; $GEO2_CACHE or ~/.cache/crossview."""
    value = os.environ.get(CACHE_ENV)
    return Path(value).expanduser() if value else Path.home() / ".cache" / "crossview"


@dataclass
class LossConfig:
    tau: float = 0.07
    alpha: float = 0.1
    kl_temperature: float = 1.0
    infonce_symmetric: bool = True
    flow_reduction: Literal["mean", "norm"] = "mean"

    def validate(self):
        if not self.tau > 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be non-negative, got {self.alpha}")
        if not self.kl_temperature > 0:
            raise ConfigurationError("kl_temperature must be positive")
        if self.flow_reduction not in ("mean", "norm"):
            raise ConfigurationError(f"Unknown flow_reduction {self.flow_reduction!r}")


@dataclass
class SamplerConfig:
    steps: int = 10
    direction: Literal["g2s", "s2g"] = "g2s"

    def validate(self):
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if self.direction not in ("g2s", "s2g"):
            raise ConfigurationError(f"Unknown direction {self.direction!r}")


@dataclass
class BackendConfig:
    """Frozen feature extractors and the input geometry they expect."""

    geometry_channels: int = 32
    geometry_size: int = 32
    token_dim: int = 128
    satellite_tokens: tuple[int, int] = (4, 4)
    ground_tokens: tuple[int, int] = (2, 8)
    satellite_size: int = 64
    pano_width: int = 256
    pano_height: int = 64
    v_range: float = math.pi / 2
    ground_crop_size: int = 64
    seed: int = 0

    def validate(self):
        for name in ("geometry_channels", "geometry_size", "token_dim", "satellite_size",
                     "pano_width", "pano_height", "ground_crop_size"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if not 0 < self.v_range <= math.pi:
            raise ConfigurationError(f"v_range must lie in (0, pi], got {self.v_range}")


@dataclass
class GeoMapConfig:
    heads: int = 4
    projection_stride: int = 4
    use_geometry: bool = True
    num_crops: int = 4
    base_yaw: float = math.pi / 4
    crop_fov: float = math.pi / 2

    def validate(self, token_dim: int):
        if self.heads < 1 or token_dim % self.heads != 0:
            raise ConfigurationError(f"token_dim {token_dim} is not divisible by {self.heads} heads")
        if self.projection_stride < 1 or self.num_crops < 1:
            raise ConfigurationError("projection_stride and num_crops must be positive")


@dataclass
class CodecConfig:
    image_size: int = 64
    factor: int = 8
    seed: int = 0

    def validate(self):
        if self.factor < 1 or self.image_size % self.factor != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} must be a multiple of factor {self.factor}"
            )

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        side = self.image_size // self.factor
        return side, side, 3 * self.factor * self.factor


@dataclass
class FlowConfig:
    depth: int = 4
    hidden: int = 128
    heads: int = 4
    head_hidden: int = 256
    target: Literal["forward", "reverse"] = "forward"

    def validate(self):
        if self.hidden % self.heads != 0:
            raise ConfigurationError(f"hidden {self.hidden} is not divisible by {self.heads} heads")
        if self.target not in ("forward", "reverse"):
            raise ConfigurationError(f"Unknown flow target {self.target!r}")


# keys that do not change the trajectory of a run
_RUNTIME_KEYS = ("max_epochs",)


@dataclass
class RunConfig:
    t1: int = 50
    t2: int = 500
    t3: int = 550
    lr1: float = 1e-4
    lr2: float = 2e-4
    lr3: float = 1e-4
    batch_size: int = 128
    optimizer: Literal["sgd", "adam"] = "sgd"
    seed: int = 0
    validate_every: int = 10
    deterministic: bool = True
    preset: PresetName = "desk"
    max_epochs: Optional[int] = None
    loss: LossConfig = field(default_factory=LossConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    backend: BackendConfig = field(default_factory=BackendConfig)
    geomap: GeoMapConfig = field(default_factory=GeoMapConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)

    def validate(self) -> "RunConfig":
        if min(self.t1, self.t2, self.t3) < 0:
            raise ConfigurationError("Epoch counts must be non-negative")
        if self.t2 > self.t3:
            raise ConfigurationError(f"T2 ({self.t2}) must not exceed T3 ({self.t3})")
        if min(self.lr1, self.lr2, self.lr3) <= 0:
            raise ConfigurationError("Learning rates must be positive")
        if self.batch_size < 2:
            raise ConfigurationError("InfoNCE needs a batch size of at least 2")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"Unknown optimizer {self.optimizer!r}")
        if self.validate_every < 1:
            raise ConfigurationError("validate_every must be positive")
        self.loss.validate()
        self.sampler.validate()
        self.backend.validate()
        self.geomap.validate(self.backend.token_dim)
        self.codec.validate()
        self.flow.validate()
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k not in _RUNTIME_KEYS}
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        return _build(cls, data, "config").validate()

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"Config file not found: {path}")
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path}: invalid JSON ({e.msg}, line {e.lineno})") from e
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: expected a JSON object")
        return cls.from_dict(data)

    def save(self, path: Union[str, Path]):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _build(cls, data: dict[str, Any], where: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigurationError(f"Unknown keys in {where}: {unknown}")

    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigurationError(f"{where}.{name} must be an object")
            kwargs[name] = _build(type(current), value, f"{where}.{name}")
        elif isinstance(current, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def merge(config: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """
    Applies dotted-key overrides such as ``{"loss.tau": 0.1}`` on top of a config.
    None values are skipped so unset command-line flags keep the file value.
    """
    data = config.to_dict()
    for key, value in overrides.items():
        if value is None:
            continue
        node = data
        *parents, leaf = key.split(".")
        for part in parents:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigurationError(f"Unknown config key {key!r}")
            node = node[part]
        if leaf not in node:
            raise ConfigurationError(f"Unknown config key {key!r}")
        node[leaf] = value
    return RunConfig.from_dict(data)


def preset(name: PresetName = "desk", dataset: Optional[str] = None) -> RunConfig:
    """
    ``desk`` is the CPU-trainable default. ``full`` uses the full-scale
    shapes (C=256 at 518x518, D=1024, 16 heads, 28-block flow, 16x16x768 latent).
    ``dataset`` selects the benchmark's ground-crop resolution.
    """
    if name == "desk":
        config = RunConfig()
    elif name == "full":
        config = RunConfig(
            preset="full",
            backend=BackendConfig(
                geometry_channels=256,
                geometry_size=518,
                token_dim=1024,
                satellite_tokens=(12, 12),
                ground_tokens=(4, 24),
                satellite_size=384,
                pano_width=1232,
                pano_height=224,
                ground_crop_size=224,
            ),
            geomap=GeoMapConfig(heads=16, projection_stride=16),
            codec=CodecConfig(image_size=256, factor=16),
            flow=FlowConfig(depth=28, hidden=1152, heads=16, head_hidden=2048),
        )
    else:
        raise ConfigurationError(f"Unknown preset {name!r}; expected desk or full")

    if dataset is not None:
        if dataset not in DATASET_CROP_SIZES:
            raise ConfigurationError(f"No crop-size preset for dataset {dataset!r}")
        config.backend.ground_crop_size = DATASET_CROP_SIZES[dataset]
    return config.validate()
