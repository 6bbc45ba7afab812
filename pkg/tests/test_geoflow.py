import numpy as np
import pytest
import torch

from crossview.core.errors import ConfigurationError, DomainError, NumericError, UsageError
from crossview.data.synth import generate_scene, render_panorama, render_satellite
from crossview.models.geoflow import (
    GeoFlow,
    SpaceToDepthCodec,
    VelocityNet,
    integrate,
    interpolate,
    synthesize,
    timestep_embedding,
    train_step,
)
from crossview.models.geomap import GeoMap
from crossview.training.config import (
    BackendConfig,
    CodecConfig,
    FlowConfig,
    GeoMapConfig,
    LossConfig,
    SamplerConfig,
)

TINY_CODEC = CodecConfig(image_size=16, factor=4)


def _net(target="forward", cond_dim=16) -> VelocityNet:
    torch.manual_seed(0)
    config = FlowConfig(depth=1, hidden=16, heads=2, head_hidden=32, target=target)
    return VelocityNet(TINY_CODEC.latent_shape, cond_dim, config)


def _constant_field(value: torch.Tensor):
    return lambda x, t, c: value.expand_as(x)


def test_codec_round_trip():
    codec = SpaceToDepthCodec(TINY_CODEC)
    rng = np.random.default_rng(42)
    image = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    latent = codec.encode(image)
    assert latent.shape == (1, 48, 4, 4)
    decoded = codec.decode(latent[0])
    assert decoded.dtype == np.uint8
    assert np.abs(decoded.astype(int) - image.astype(int)).max() <= 1


def test_codec_mixing_is_orthogonal():
    codec = SpaceToDepthCodec(TINY_CODEC)
    eye = torch.eye(48)
    torch.testing.assert_close(codec._mix @ codec._mix.T, eye, atol=1e-5, rtol=0)


def test_codec_rejects_foreign_latent():
    codec = SpaceToDepthCodec(TINY_CODEC)
    with pytest.raises(ConfigurationError):
        codec.decode(torch.zeros(1, 12, 4, 4))
    with pytest.raises(ConfigurationError):
        SpaceToDepthCodec(CodecConfig(image_size=18, factor=4))


def test_interpolate_endpoints():
    xg, xs = torch.zeros(2, 3), torch.ones(2, 3)
    torch.testing.assert_close(interpolate(xg, xs, 0.0), xg)
    torch.testing.assert_close(interpolate(xg, xs, 1.0), xs)
    mixed = interpolate(xg, xs, torch.tensor([0.25, 0.75]))
    torch.testing.assert_close(mixed[:, 0], torch.tensor([0.25, 0.75]))


def test_interpolate_errors():
    xg, xs = torch.zeros(2, 3), torch.ones(2, 3)
    with pytest.raises(DomainError):
        interpolate(xg, xs, 1.5)
    with pytest.raises(DomainError):
        interpolate(xg, xs, torch.tensor([0.5, -0.1]))
    with pytest.raises(ConfigurationError):
        interpolate(xg, torch.ones(2, 4), 0.5)


def test_constant_field_moves_state_exactly():
    x0 = torch.zeros(1, 2, 2)
    value = torch.full((1, 2, 2), 0.25)
    c = torch.zeros(1, 4)
    for steps in (1, 2, 8):
        forward = integrate(x0, c, SamplerConfig(steps=steps, direction="g2s"), _constant_field(value))
        torch.testing.assert_close(forward, x0 + value, rtol=0, atol=0)
        back = integrate(forward, c, SamplerConfig(steps=steps, direction="s2g"), _constant_field(value))
        torch.testing.assert_close(back, x0, rtol=0, atol=0)


def test_reverse_walks_time_backwards():
    seen = []

    def field(x, t, c):
        seen.append(float(t[0]))
        return torch.zeros_like(x)

    integrate(torch.zeros(1, 3), torch.zeros(1, 1), SamplerConfig(steps=4, direction="s2g"), field)
    assert seen == [1.0, 0.75, 0.5, 0.25]
    seen.clear()
    integrate(torch.zeros(1, 3), torch.zeros(1, 1), SamplerConfig(steps=4), field, reverse=False)
    assert seen == [0.0, 0.25, 0.5, 0.75]


def test_integrate_reports_failing_step():
    calls = iter([0.0, float("inf")])

    def field(x, t, c):
        return torch.full_like(x, next(calls))

    with pytest.raises(NumericError) as info:
        integrate(torch.zeros(1, 3), torch.zeros(1, 1), SamplerConfig(steps=3), field)
    assert info.value.step == 1


def test_timestep_embedding_shapes():
    t = torch.tensor([0.0, 0.5])
    assert timestep_embedding(t, 8).shape == (2, 8)
    assert timestep_embedding(t, 7).shape == (2, 7)


def test_velocity_net_starts_at_zero():
    net = _net()
    x = torch.randn(3, 48, 4, 4)
    out = net(x, torch.rand(3), torch.randn(3, 16))
    assert out.shape == x.shape
    assert torch.count_nonzero(out) == 0
    # scalar times broadcast over the batch
    assert net(x, 0.5, torch.randn(3, 16)).shape == x.shape


def test_velocity_net_shape_errors():
    net = _net()
    with pytest.raises(ConfigurationError):
        net(torch.randn(1, 48, 2, 2), torch.rand(1), torch.randn(1, 16))
    with pytest.raises(ConfigurationError):
        net(torch.randn(1, 48, 4, 4), torch.rand(1), torch.randn(1, 8))


def test_reverse_target_negates_field():
    net = _net(target="reverse")
    with torch.no_grad():
        net.head.fc2.bias.fill_(0.5)
    flow = GeoFlow(SpaceToDepthCodec(TINY_CODEC), net)
    x = torch.zeros(1, 48, 4, 4)
    field = flow.field(x, torch.zeros(1), torch.zeros(1, 16))
    torch.testing.assert_close(field, torch.full_like(x, -0.5))


def test_geoflow_rejects_mismatched_codec():
    with pytest.raises(ConfigurationError):
        GeoFlow(SpaceToDepthCodec(CodecConfig(image_size=16, factor=2)), _net())


def test_train_step_reduces_loss():
    net = _net()
    optimizer = torch.optim.Adam(net.parameters(), lr=1e-2)
    generator = torch.Generator().manual_seed(0)
    rng = torch.Generator().manual_seed(1)
    xg = torch.randn(4, 48, 4, 4, generator=rng)
    xs = torch.randn(4, 48, 4, 4, generator=rng)
    c = torch.randn(4, 16, generator=rng)

    losses = [train_step(net, optimizer, xg, xs, c, generator) for _ in range(40)]
    assert all(np.isfinite(losses))
    assert np.mean(losses[-5:]) < losses[0]


def test_train_step_norm_reduction_and_empty_batch():
    net = _net()
    optimizer = torch.optim.SGD(net.parameters(), lr=1e-3)
    xg, xs = torch.zeros(2, 48, 4, 4), torch.ones(2, 48, 4, 4)
    loss = train_step(net, optimizer, xg, xs, torch.zeros(2, 16), loss_config=LossConfig(flow_reduction="norm"))
    # zero prediction at initialisation: residual norm sqrt(48 * 16)
    assert loss == pytest.approx((48 * 16) ** 0.5, rel=1e-5)
    with pytest.raises(UsageError):
        train_step(net, optimizer, xg[:0], xs[:0], torch.zeros(0, 16))


def test_synthesize_shapes():
    torch.manual_seed(0)
    backend = BackendConfig(
        geometry_channels=8,
        geometry_size=8,
        token_dim=16,
        satellite_tokens=(2, 2),
        ground_tokens=(1, 4),
        satellite_size=32,
        pano_width=64,
        pano_height=16,
        ground_crop_size=16,
    )
    geomap = GeoMap(backend, GeoMapConfig(heads=2))
    flow = GeoFlow(SpaceToDepthCodec(TINY_CODEC), _net())
    scene = generate_scene(0)
    pano = render_panorama(scene, 128, 32).pixels
    sat = render_satellite(scene, 64)

    sampler = SamplerConfig(steps=2)
    assert synthesize(pano, "g2s", geomap, flow, sampler).shape == (16, 16, 3)
    assert synthesize(sat, "s2g", geomap, flow, sampler, out_size=(32, 8)).shape == (8, 32, 3)
    # an untrained field leaves the encoded input unchanged
    np.testing.assert_array_equal(
        synthesize(sat, "s2g", geomap, flow, sampler), flow.codec.decode(flow.codec.encode(sat)[0])
    )
    with pytest.raises(ConfigurationError):
        synthesize(sat, "sideways", geomap, flow, sampler)  # type: ignore[arg-type]


def test_euler_converges_on_linear_field():
    x0 = torch.ones(1, 1, dtype=torch.float64)
    c = torch.zeros(1, 1, dtype=torch.float64)

    def linear(x, t, c):
        return x

    one_step = integrate(x0, c, SamplerConfig(steps=1), linear)
    assert float(one_step) == 2.0
    hundred = integrate(x0, c, SamplerConfig(steps=100), linear)
    assert float(hundred) == pytest.approx((1 + 1 / 100) ** 100, rel=1e-12)
    assert abs(float(hundred) - np.e) < 0.02

    errors = [np.e - float(integrate(x0, c, SamplerConfig(steps=n), linear)) for n in (10, 20, 40, 80)]
    assert errors == sorted(errors, reverse=True)
    # first order: doubling the steps halves the error
    for coarse, fine in zip(errors, errors[1:]):
        assert coarse / fine == pytest.approx(2.0, abs=0.1)


def _fit(net, xg, xs, c, steps, lr=1e-2):
    optimizer = torch.optim.Adam(net.parameters(), lr=lr)
    generator = torch.Generator().manual_seed(0)
    return [train_step(net, optimizer, xg, xs, c, generator) for _ in range(steps)]


def test_reverse_target_learns_negated_field():
    rng = torch.Generator().manual_seed(3)
    xg = torch.randn(4, 48, 4, 4, generator=rng)
    xs = torch.randn(4, 48, 4, 4, generator=rng)
    c = torch.randn(4, 16, generator=rng)
    forward, reverse = _net("forward"), _net("reverse")
    _fit(forward, xg, xs, c, 30)
    _fit(reverse, xg, xs, c, 30)

    grid = torch.Generator().manual_seed(4)
    x = torch.randn(3, 48, 4, 4, generator=grid)
    t = torch.tensor([0.1, 0.5, 0.9])
    cond = torch.randn(3, 16, generator=grid)
    with torch.no_grad():
        g, g_rev = forward(x, t, cond), reverse(x, t, cond)
    assert float(g.abs().mean()) > 1e-3
    torch.testing.assert_close(g_rev, -g, rtol=0, atol=1e-5)

    # both predict the same ground-to-satellite field
    codec = SpaceToDepthCodec(TINY_CODEC)
    with torch.no_grad():
        torch.testing.assert_close(
            GeoFlow(codec, reverse).field(x, t, cond), GeoFlow(codec, forward).field(x, t, cond), rtol=0, atol=1e-5
        )


def test_two_clusters_learn_constant_field():
    xg = -torch.ones(8, 48, 4, 4)
    xs = torch.ones(8, 48, 4, 4)
    c = torch.randn(8, 16, generator=torch.Generator().manual_seed(5))
    net = _net()
    losses = _fit(net, xg, xs, c, 400)
    assert np.mean(losses[-10:]) < 0.02 * losses[0]

    with torch.no_grad():
        mid = net(torch.zeros(8, 48, 4, 4), torch.full((8,), 0.5), c)
    assert float(mid.mean()) == pytest.approx(2.0, abs=0.1)


def test_velocity_net_gradcheck():
    torch.manual_seed(0)
    codec = CodecConfig(image_size=4, factor=2)
    net = VelocityNet(codec.latent_shape, 4, FlowConfig(depth=1, hidden=8, heads=2, head_hidden=8)).double()
    # move the zero-initialised layers off zero so every path carries gradient
    with torch.no_grad():
        for p in net.parameters():
            if torch.count_nonzero(p) == 0:
                p.normal_(0.0, 0.3)
    net.eval()

    x = torch.randn(1, 12, 2, 2, dtype=torch.float64, requires_grad=True)
    c = torch.randn(1, 4, dtype=torch.float64, requires_grad=True)
    t = torch.tensor([0.3], dtype=torch.float64)
    assert torch.autograd.gradcheck(lambda x, c: net(x, t, c), (x, c), eps=1e-6, atol=1e-6, rtol=1e-4)
