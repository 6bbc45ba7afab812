"""
GeoMap: dual-branch cross-view embedding.

Per view, frozen geometry features are projected to the token dimension and
attended to by the semantic tokens. The fused tokens are mean pooled, layer
normalised and scaled to unit length.
"""

import logging
import math
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from crossview.core.embedding_bank import EmbeddingBank
from crossview.core.errors import ConfigurationError, NumericError
from crossview.core.panorama import CropSpec, PanoramaImage
from crossview.data.images import resize_rgb
from crossview.geometry.e2p import default_crop_specs, e2p_transform
from crossview.geometry.sampler import SamplingGridCache
from crossview.models.backends import (
    GeometryBackend,
    SemanticBackend,
    image_to_tensor,
    parameter_hash,
)
from crossview.training.config import BackendConfig, GeoMapConfig

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12


class MultiHeadCrossAttention(nn.Module):
    """
    Scaled dot-product attention with separate query, key and value projections.
    Used as cross-attention in GeoMap and as self-attention in the velocity net.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ConfigurationError(f"dim {dim} is not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        query: torch.Tensor,
        key: torch.Tensor,
        value: torch.Tensor,
        return_weights: bool = False,
    ):
        """
        Args:
            query: (B, Nq, D)
            key, value: (B, Nk, D)

        Returns:
            (B, Nq, D) output, plus (B, heads, Nq, Nk) weights if requested.
        """
        if query.shape[-1] != self.dim or key.shape[-1] != self.dim or value.shape[-1] != self.dim:
            raise ConfigurationError(
                f"Attention expects token dim {self.dim}, got "
                f"{query.shape[-1]}/{key.shape[-1]}/{value.shape[-1]}"
            )
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(key))
        v = self._split(self.v_proj(value))

        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if not torch.isfinite(logits).all():
            raise NumericError("Non-finite attention logits")
        weights = torch.softmax(logits, dim=-1)

        out = (weights @ v).transpose(1, 2).reshape(query.shape[0], query.shape[1], self.dim)
        out = self.out_proj(out)
        if return_weights:
            return out, weights
        return out


class FeatureProjection(nn.Module):
    """
    Strided convolution from C geometry channels to D token channels.
    Inputs are zero padded on the right and bottom so the output side is
    ceil(side / stride).
    """

    def __init__(self, in_channels: int, out_channels: int, stride: int = 4):
        super().__init__()
        self.in_channels = in_channels
        self.stride = stride
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=stride, stride=stride)

    def output_side(self, side: int) -> int:
        return -(-side // self.stride)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        """
        (B, C, H, W) -> (B, D, H', W'); (B, V, C, H, W) -> (B, D, H', V * W')
        with the views concatenated along the width.
        """
        if t.dim() == 5:
            b, v = t.shape[:2]
            out = self.forward(t.flatten(0, 1))
            out = out.view(b, v, *out.shape[1:])
            return torch.cat(out.unbind(1), dim=-1)

        if t.dim() != 4 or t.shape[1] != self.in_channels:
            raise ConfigurationError(
                f"Projection expects {self.in_channels} channels, got shape {tuple(t.shape)}"
            )
        pad_h = (-t.shape[2]) % self.stride
        pad_w = (-t.shape[3]) % self.stride
        if pad_h or pad_w:
            t = F.pad(t, (0, pad_w, 0, pad_h))
        return self.conv(t)


def project_features(t: torch.Tensor, projection: FeatureProjection) -> torch.Tensor:
    return projection(t)


def fuse(
    q: torch.Tensor, t: torch.Tensor, attention: MultiHeadCrossAttention
) -> torch.Tensor:
    """out = Attn(q, t, t)."""
    return attention(q, t, t)


def pool_normalize(out: torch.Tensor, layer_norm: Optional[nn.LayerNorm] = None) -> torch.Tensor:
    """
    Mean over tokens, layer norm, then unit L2 norm.

    Args:
        out: (B, N, D) or (N, D) tokens.

    Raises:
        NumericError: if a pooled vector is zero after layer normalisation.
    """
    if not torch.isfinite(out).all():
        raise NumericError("Non-finite tokens before pooling")
    pooled = out.mean(dim=-2)
    if layer_norm is None:
        normed = F.layer_norm(pooled, pooled.shape[-1:])
    else:
        normed = layer_norm(pooled)
    norm = normed.norm(dim=-1, keepdim=True)
    if (norm < NORM_EPS).any():
        raise NumericError("Zero vector after layer normalisation")
    return normed / norm


def flatten_tokens(grid: torch.Tensor) -> torch.Tensor:
    """(B, D, H, W) -> (B, H*W, D)."""
    return grid.flatten(2).transpose(1, 2)


class GeoMapBranch(nn.Module):
    """One view's trainable head: projection, query adapter, attention, final norm."""

    def __init__(self, channels: int, dim: int, heads: int, stride: int, kv_tokens: int, use_geometry: bool = True):
        super().__init__()
        self.use_geometry = use_geometry
        self.query_adapter = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim)
        if use_geometry:
            self.projection = FeatureProjection(channels, dim, stride)
            self.position = nn.Parameter(torch.randn(1, kv_tokens, dim) * 0.02)
            self.attention = MultiHeadCrossAttention(dim, heads)

    def forward(self, geometry: Optional[torch.Tensor], semantic: torch.Tensor) -> torch.Tensor:
        q = self.query_adapter(flatten_tokens(semantic))
        if not self.use_geometry:
            return pool_normalize(q, self.norm)
        if geometry is None:
            raise ConfigurationError("Geometry features are required when use_geometry is set")
        t = flatten_tokens(project_features(geometry, self.projection))
        if t.shape[1] != self.position.shape[1]:
            raise ConfigurationError(
                f"Expected {self.position.shape[1]} geometry tokens, got {t.shape[1]}"
            )
        out = fuse(q, t + self.position, self.attention)
        return pool_normalize(out, self.norm)


class GeoMapHead(nn.Module):
    """The trainable parameters of GeoMap, one branch per view."""

    def __init__(self, backend: BackendConfig, config: GeoMapConfig):
        super().__init__()
        config.validate(backend.token_dim)
        stride = config.projection_stride
        side = -(-backend.geometry_size // stride)
        self.dim = backend.token_dim
        self.satellite = GeoMapBranch(
            backend.geometry_channels, self.dim, config.heads, stride, side * side, config.use_geometry
        )
        self.ground = GeoMapBranch(
            backend.geometry_channels,
            self.dim,
            config.heads,
            stride,
            side * side * config.num_crops,
            config.use_geometry,
        )

    def forward_satellite(self, geometry: Optional[torch.Tensor], semantic: torch.Tensor) -> torch.Tensor:
        return self.satellite(geometry, semantic)

    def forward_ground(self, geometry: Optional[torch.Tensor], semantic: torch.Tensor) -> torch.Tensor:
        return self.ground(geometry, semantic)


class GeoMap:
    """
    Image-level embedding pipeline: frozen backends, E2P for the ground view,
    and the trainable ``GeoMapHead``.
    """

    def __init__(
        self,
        backend: BackendConfig,
        config: GeoMapConfig,
        head: Optional[GeoMapHead] = None,
        grid_cache: Optional[SamplingGridCache] = None,
    ):
        self.backend_config = backend
        self.config = config
        self.geometry_backend = GeometryBackend(backend.geometry_channels, backend.geometry_size, backend.seed)
        self.satellite_backend = SemanticBackend(backend.token_dim, backend.satellite_tokens, backend.seed + 1)
        self.ground_backend = SemanticBackend(backend.token_dim, backend.ground_tokens, backend.seed + 2)
        self.head = head if head is not None else GeoMapHead(backend, config)
        self.crop_specs: list[CropSpec] = default_crop_specs(
            out_size=backend.ground_crop_size,
            base_yaw=config.base_yaw,
            count=config.num_crops,
            fov=config.crop_fov,
        )
        self._grid_cache = grid_cache if grid_cache is not None else SamplingGridCache()

    def backend_hash(self) -> str:
        return "".join(
            parameter_hash(m) for m in (self.geometry_backend, self.satellite_backend, self.ground_backend)
        )

    def satellite_features(self, pixels: np.ndarray) -> tuple[Optional[torch.Tensor], torch.Tensor]:
        """(C, S, S) geometry features and (D, h, w) semantic tokens of a satellite image."""
        size = self.backend_config.satellite_size
        x = image_to_tensor(resize_rgb(pixels, size, size)).unsqueeze(0)
        geometry = self.geometry_backend(x)[0] if self.config.use_geometry else None
        return geometry, self.satellite_backend(x)[0]

    def ground_features(self, pixels: np.ndarray) -> tuple[Optional[torch.Tensor], torch.Tensor]:
        """(V, C, S, S) crop features and (D, h, w) panorama tokens of a ground panorama."""
        cfg = self.backend_config
        resized = resize_rgb(pixels, cfg.pano_width, cfg.pano_height)
        geometry = None
        if self.config.use_geometry:
            pano = PanoramaImage(resized, v_range=cfg.v_range)
            crops = e2p_transform(pano, self.crop_specs, cache=self._grid_cache)
            crop_batch = torch.stack([image_to_tensor(c.pixels) for c in crops]).unsqueeze(0)
            geometry = self.geometry_backend(crop_batch)[0]
        semantic = self.ground_backend(image_to_tensor(resized).unsqueeze(0))[0]
        return geometry, semantic

    @staticmethod
    def _stack(features: Sequence[tuple[Optional[torch.Tensor], torch.Tensor]]):
        geometry = [g for g, _ in features]
        semantic = torch.stack([s for _, s in features])
        if any(g is None for g in geometry):
            return None, semantic
        return torch.stack(geometry), semantic  # type: ignore[arg-type]

    @torch.no_grad()
    def embed_satellites(self, images: Sequence[np.ndarray]) -> torch.Tensor:
        self.head.eval()
        geometry, semantic = self._stack([self.satellite_features(p) for p in images])
        return self.head.forward_satellite(geometry, semantic)

    @torch.no_grad()
    def embed_grounds(self, images: Sequence[np.ndarray]) -> torch.Tensor:
        self.head.eval()
        geometry, semantic = self._stack([self.ground_features(p) for p in images])
        return self.head.forward_ground(geometry, semantic)

    def embed_satellite(self, pixels: np.ndarray) -> torch.Tensor:
        """Unit-norm (D,) embedding f^s."""
        return self.embed_satellites([pixels])[0]

    def embed_ground(self, pixels: np.ndarray) -> torch.Tensor:
        """Unit-norm (D,) embedding f^g."""
        return self.embed_grounds([pixels])[0]


def retrieve(query, references) -> np.ndarray:
    """
    Indices of ``references`` by ascending Euclidean distance to ``query``;
    ties go to the lower index.
    """
    refs = references.detach().cpu().numpy() if isinstance(references, torch.Tensor) else np.asarray(references)
    q = query.detach().cpu().numpy() if isinstance(query, torch.Tensor) else np.asarray(query)
    if refs.ndim != 2 or len(refs) == 0:
        bank = EmbeddingBank(np.empty((0, q.shape[-1]), dtype=np.float32))
    else:
        bank = EmbeddingBank(refs)
    return bank.rank(q)
