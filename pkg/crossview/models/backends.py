"""
Frozen feature extractors.

Both backends are seeded, untrained convolutional stacks that stand in for the
geometric and semantic foundation models. Their parameters never receive
gradients; callers can assert this with ``parameter_hash``.
"""

import hashlib
from typing import Sequence

import numpy as np
import torch
from torch import nn

from crossview.core.errors import ConfigurationError


def image_to_tensor(pixels: np.ndarray) -> torch.Tensor:
    """HxWx3 uint8 -> 3xHxW float32 in [0, 1]."""
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ConfigurationError(f"Expected an HxWx3 image, got shape {pixels.shape}")
    return torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1))).float() / 255.0


def images_to_tensor(images: Sequence[np.ndarray]) -> torch.Tensor:
    return torch.stack([image_to_tensor(p) for p in images])


def parameter_hash(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in name order."""
    h = hashlib.sha256()
    for name, value in sorted(module.state_dict().items()):
        h.update(name.encode("utf-8"))
        h.update(value.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _seeded_init(module: nn.Module, seed: int):
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * (2.0 / fan_in) ** 0.5)
                if m.bias is not None:
                    m.bias.zero_()


class _FrozenBackend(nn.Module):
    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def train(self, mode: bool = True):
        # frozen backends stay in eval mode
        return super().train(False)


class GeometryBackend(_FrozenBackend):
    """
    Dense feature pyramid: three stride-2 levels and one stride-1 level,
    pooled to ``size x size`` with ``channels`` feature maps.

    Accepts (B, 3, H, W) or (B, V, 3, H, W) and returns (B, C, S, S) or
    (B, V, C, S, S) respectively.
    """

    def __init__(self, channels: int = 32, size: int = 32, seed: int = 0):
        super().__init__()
        self.channels = channels
        self.size = size
        widths = (3, 8, 16, channels, channels)
        strides = (2, 2, 2, 1)
        layers: list[nn.Module] = []
        for i, stride in enumerate(strides):
            layers.append(nn.Conv2d(widths[i], widths[i + 1], 3, stride=stride, padding=1))
            layers.append(nn.ReLU())
        layers.append(nn.AdaptiveAvgPool2d(size))
        self.net = nn.Sequential(*layers)
        _seeded_init(self, seed)
        self.freeze()

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() == 5:
            b, v = images.shape[:2]
            out = self.net(images.flatten(0, 1))
            return out.view(b, v, *out.shape[1:])
        if images.dim() != 4 or images.shape[1] != 3:
            raise ConfigurationError(f"GeometryBackend expects (B, 3, H, W), got {tuple(images.shape)}")
        return self.net(images)


class SemanticBackend(_FrozenBackend):
    """Convolutional tokenizer emitting a ``dim x grid[0] x grid[1]`` token grid."""

    def __init__(self, dim: int = 128, grid: tuple[int, int] = (4, 4), seed: int = 1):
        super().__init__()
        self.dim = dim
        self.grid = tuple(grid)
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(32, dim, 1),
            nn.AdaptiveAvgPool2d(self.grid),
        )
        _seeded_init(self, seed)
        self.freeze()

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ConfigurationError(f"SemanticBackend expects (B, 3, H, W), got {tuple(images.shape)}")
        return self.net(images)
