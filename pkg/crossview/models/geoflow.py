"""
GeoFlow: conditional flow matching between ground and satellite latents.

The path is x_t = (1 - t) x_g + t x_s with target field v = x_s - x_g. A model
trained in one direction is sampled in both: forward Euler from x_g gives a
satellite latent, the mirrored integration from x_s gives a ground latent.
"""

import logging
import math
from typing import Callable, Literal, Optional, Union

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from crossview.core.errors import ConfigurationError, DomainError, NumericError, UsageError
from crossview.data.images import resize_rgb
from crossview.models.geomap import GeoMap, MultiHeadCrossAttention
from crossview.models.objectives import flow_loss
from crossview.training.config import CodecConfig, FlowConfig, LossConfig, SamplerConfig

logger = logging.getLogger(__name__)

Direction = Literal["g2s", "s2g"]


class SpaceToDepthCodec:
    """
    Exactly invertible latent codec: resize to a square, scale to [-1, 1],
    fold ``factor x factor`` blocks into channels and mix the channels with a
    fixed orthogonal matrix.

    Latents are (B, ch, h, w) tensors; ``latent_shape`` reports (h, w, ch).
    """

    # decode(encode(x)) matches x within half an intensity level before rounding
    tolerance = 0.5

    def __init__(self, config: Optional[CodecConfig] = None):
        self.config = config or CodecConfig()
        self.config.validate()
        ch = 3 * self.config.factor**2
        generator = torch.Generator().manual_seed(self.config.seed)
        q, r = torch.linalg.qr(torch.randn(ch, ch, generator=generator, dtype=torch.float64))
        # sign fix makes the factorisation unique
        q = q * torch.sign(torch.diagonal(r)).unsqueeze(0)
        self._mix = q.float()

    @property
    def image_size(self) -> int:
        return self.config.image_size

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return self.config.latent_shape

    def prepare(self, pixels: np.ndarray) -> np.ndarray:
        """The image as the codec sees it: resized to image_size x image_size."""
        return resize_rgb(pixels, self.image_size, self.image_size)

    def encode(self, pixels: Union[np.ndarray, list]) -> torch.Tensor:
        """HxWx3 uint8 (or a list of them) -> (B, ch, h, w) latent."""
        images = [pixels] if isinstance(pixels, np.ndarray) else list(pixels)
        batch = np.stack([self.prepare(p) for p in images]).astype(np.float32)
        x = torch.from_numpy(batch).permute(0, 3, 1, 2) / 127.5 - 1.0
        z = F.pixel_unshuffle(x, self.config.factor)
        return torch.einsum("dc,bchw->bdhw", self._mix, z)

    def decode(self, latent: torch.Tensor) -> np.ndarray:
        """(B, ch, h, w) or (ch, h, w) latent -> uint8 image(s)."""
        single = latent.dim() == 3
        if single:
            latent = latent.unsqueeze(0)
        expected = self.latent_shape
        if tuple(latent.shape[1:]) != (expected[2], expected[0], expected[1]):
            raise ConfigurationError(f"Latent of shape {tuple(latent.shape[1:])} does not fit codec {expected}")
        z = torch.einsum("dc,bdhw->bchw", self._mix, latent.detach().float())
        x = F.pixel_shuffle(z, self.config.factor)
        out = ((x + 1.0) * 127.5).round().clamp(0, 255).to(torch.uint8).permute(0, 2, 3, 1).numpy()
        return out[0] if single else out


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of (B,) times in [0, 1]."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = t[:, None] * 1000.0 * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class AdaLNBlock(nn.Module):
    """Transformer block with adaptive layer norm; the modulation starts at zero."""

    def __init__(self, hidden: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.attn = MultiHeadCrossAttention(hidden, heads)
        self.norm2 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(
            nn.Linear(hidden, hidden * mlp_ratio), nn.GELU(), nn.Linear(hidden * mlp_ratio, hidden)
        )
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(hidden, 6 * hidden))
        nn.init.zeros_(self.modulation[1].weight)
        nn.init.zeros_(self.modulation[1].bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        shift1, scale1, gate1, shift2, scale2, gate2 = self.modulation(cond).chunk(6, dim=-1)
        h = _modulate(self.norm1(x), shift1, scale1)
        x = x + gate1.unsqueeze(1) * self.attn(h, h, h)
        h = _modulate(self.norm2(x), shift2, scale2)
        return x + gate2.unsqueeze(1) * self.mlp(h)


class RefinementHead(nn.Module):
    """Two-layer per-token head; the output layer is zero initialised."""

    def __init__(self, hidden: int, head_hidden: int, out_channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(hidden, 2 * hidden))
        self.fc1 = nn.Linear(hidden, head_hidden)
        self.fc2 = nn.Linear(head_hidden, out_channels)
        nn.init.zeros_(self.modulation[1].weight)
        nn.init.zeros_(self.modulation[1].bias)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        shift, scale = self.modulation(cond).chunk(2, dim=-1)
        h = _modulate(self.norm(x), shift, scale)
        return self.fc2(F.gelu(self.fc1(h)))


class VelocityNet(nn.Module):
    """
    G(x_t, t, c): latent pixels become tokens, time and condition are embedded,
    concatenated, and drive adaptive normalisation in every block.
    """

    def __init__(self, latent_shape: tuple[int, int, int], cond_dim: int, config: Optional[FlowConfig] = None):
        super().__init__()
        self.config = config or FlowConfig()
        self.config.validate()
        h, w, ch = latent_shape
        self.latent_shape = tuple(latent_shape)
        self.cond_dim = cond_dim
        hidden = self.config.hidden

        self.token_embed = nn.Linear(ch, hidden)
        self.position = nn.Parameter(torch.randn(1, h * w, hidden) * 0.02)
        self.time_mlp = nn.Sequential(nn.Linear(hidden, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.cond_proj = nn.Linear(cond_dim, hidden)
        self.cond_mlp = nn.Sequential(nn.Linear(2 * hidden, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.blocks = nn.ModuleList([AdaLNBlock(hidden, self.config.heads) for _ in range(self.config.depth)])
        self.head = RefinementHead(hidden, self.config.head_hidden, ch)

    def forward(self, x: torch.Tensor, t: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        """
        Args:
            x: (B, ch, h, w) latent state.
            t: (B,) times or a scalar.
            c: (B, D) condition embeddings.
        """
        b, ch, h, w = x.shape
        if (h, w, ch) != self.latent_shape:
            raise ConfigurationError(f"Latent {(h, w, ch)} does not match network {self.latent_shape}")
        if c.shape != (b, self.cond_dim):
            raise ConfigurationError(f"Condition of shape {tuple(c.shape)}, expected {(b, self.cond_dim)}")
        t = torch.as_tensor(t, dtype=x.dtype, device=x.device)
        if t.dim() == 0:
            t = t.expand(b)

        tokens = self.token_embed(x.flatten(2).transpose(1, 2)) + self.position
        t_emb = self.time_mlp(timestep_embedding(t, self.config.hidden))
        cond = self.cond_mlp(torch.cat([t_emb, self.cond_proj(c)], dim=-1))
        for block in self.blocks:
            tokens = block(tokens, cond)
        out = self.head(tokens, cond)
        return out.transpose(1, 2).reshape(b, ch, h, w)


def interpolate(x_ground: torch.Tensor, x_satellite: torch.Tensor, t) -> torch.Tensor:
    """
    x_t = (1 - t) x_g + t x_s. ``t`` is a scalar or one value per sample.

    Raises:
        DomainError: if any t lies outside [0, 1].
    """
    if x_ground.shape != x_satellite.shape:
        raise ConfigurationError(f"Latent shapes differ: {tuple(x_ground.shape)} vs {tuple(x_satellite.shape)}")
    t = torch.as_tensor(t, dtype=x_ground.dtype, device=x_ground.device)
    if (t < 0).any() or (t > 1).any():
        raise DomainError(f"t must lie in [0, 1], got {t.tolist()}")
    if t.dim() == 1:
        t = t.view(-1, *([1] * (x_ground.dim() - 1)))
    return (1 - t) * x_ground + t * x_satellite


Field = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


def integrate(
    x_start: torch.Tensor,
    c: torch.Tensor,
    config: SamplerConfig,
    field: Field,
    reverse: Optional[bool] = None,
) -> torch.Tensor:
    """
    Explicit Euler with left-endpoint evaluation.

    Forward: x <- x + G(x, t_k, c) / steps over t_k = k / steps.
    Reverse: x <- x - G(x, t_k, c) / steps over t_k = 1 - k / steps.
    Increments are accumulated and divided by ``steps`` once per state, so a
    constant field moves the state by exactly that field.

    Raises:
        NumericError: on a non-finite state, with the step index.
    """
    config.validate()
    if reverse is None:
        reverse = config.direction == "s2g"
    steps = config.steps
    b = x_start.shape[0]
    total = torch.zeros_like(x_start)
    x = x_start
    for k in range(steps):
        t_k = 1.0 - k / steps if reverse else k / steps
        t = torch.full((b,), t_k, dtype=x_start.dtype, device=x_start.device)
        g = field(x, t, c)
        total = total - g if reverse else total + g
        x = x_start + total / steps
        if not torch.isfinite(x).all():
            raise NumericError("Non-finite state during integration", step=k)
    return x


class GeoFlow:
    """Codec plus velocity network, with the field sign set by the training target."""

    def __init__(self, codec: SpaceToDepthCodec, net: VelocityNet):
        if tuple(net.latent_shape) != tuple(codec.latent_shape):
            raise ConfigurationError(
                f"Network latent {net.latent_shape} does not match codec latent {codec.latent_shape}"
            )
        self.codec = codec
        self.net = net

    @property
    def target(self) -> str:
        return self.net.config.target

    def field(self, x: torch.Tensor, t: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        """The ground-to-satellite field; a reverse-trained net predicts its negative."""
        out = self.net(x, t, c)
        return -out if self.target == "reverse" else out

    @torch.no_grad()
    def transport(self, x_start: torch.Tensor, c: torch.Tensor, config: SamplerConfig) -> torch.Tensor:
        self.net.eval()
        return integrate(x_start, c, config, self.field)


def train_step(
    net: VelocityNet,
    optimizer: torch.optim.Optimizer,
    x_ground: torch.Tensor,
    x_satellite: torch.Tensor,
    c: torch.Tensor,
    generator: Optional[torch.Generator] = None,
    loss_config: Optional[LossConfig] = None,
) -> float:
    """
    One gradient step on the flow loss with t ~ U[0, 1] per sample.

    Returns:
        The loss before the update.

    Raises:
        UsageError: empty batch.
        NumericError: non-finite loss.
    """
    loss_config = loss_config or LossConfig()
    b = x_ground.shape[0]
    if b == 0:
        raise UsageError("train_step needs a non-empty batch.")
    t = torch.rand(b, generator=generator, dtype=x_ground.dtype)
    x_t = interpolate(x_ground, x_satellite, t)

    net.train()
    prediction = net(x_t, t, c)
    loss = flow_loss(
        prediction, x_ground, x_satellite, reduction=loss_config.flow_reduction, target=net.config.target
    )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def synthesize(
    pixels: np.ndarray,
    direction: Direction,
    geomap: GeoMap,
    flow: GeoFlow,
    config: Optional[SamplerConfig] = None,
    out_size: Optional[tuple[int, int]] = None,
) -> np.ndarray:
    """
    Cross-view synthesis from a single trained direction.

    g2s: c = f^g of the ground input, integrate forward from encode(ground).
    s2g: c = f^s of the satellite input, integrate in reverse from encode(satellite).

    Args:
        out_size: optional (width, height) to resize the decoded image to.
    """
    config = config or SamplerConfig()
    if direction == "g2s":
        c = geomap.embed_ground(pixels)
    elif direction == "s2g":
        c = geomap.embed_satellite(pixels)
    else:
        raise ConfigurationError(f"Unknown synthesis direction {direction!r}")
    if c.shape[-1] != flow.net.cond_dim:
        raise ConfigurationError(
            f"GeoMap embeddings have dim {c.shape[-1]}, the flow expects {flow.net.cond_dim}"
        )

    sampler = SamplerConfig(steps=config.steps, direction=direction)
    x_end = flow.transport(flow.codec.encode(pixels), c.unsqueeze(0), sampler)
    image = flow.codec.decode(x_end[0])
    if out_size is not None:
        image = resize_rgb(image, *out_size)
    return image
