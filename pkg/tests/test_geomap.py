import math

import numpy as np
import pytest
import torch
from torch.func import functional_call

from crossview.core.errors import ConfigurationError, NumericError
from crossview.data.synth import generate_scene, render_panorama, render_satellite
from crossview.models.backends import GeometryBackend, SemanticBackend, parameter_hash
from crossview.models.geomap import (
    FeatureProjection,
    GeoMap,
    GeoMapBranch,
    GeoMapHead,
    MultiHeadCrossAttention,
    fuse,
    pool_normalize,
    project_features,
    retrieve,
)
from crossview.training.config import BackendConfig, GeoMapConfig

TINY_BACKEND = BackendConfig(
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


def _geomap(use_geometry=True, seed=0) -> GeoMap:
    torch.manual_seed(seed)
    return GeoMap(TINY_BACKEND, GeoMapConfig(heads=2, projection_stride=4, use_geometry=use_geometry))


def _pair(seed=0):
    scene = generate_scene(seed)
    return render_panorama(scene, 128, 32).pixels, render_satellite(scene, 64)


def test_attention_weights_are_distributions():
    torch.manual_seed(0)
    attention = MultiHeadCrossAttention(8, 2)
    q, t = torch.randn(3, 5, 8), torch.randn(3, 7, 8)
    out, weights = attention(q, t, t, return_weights=True)
    assert out.shape == (3, 5, 8)
    assert weights.shape == (3, 2, 5, 7)
    torch.testing.assert_close(weights.sum(-1), torch.ones(3, 2, 5))


def test_attention_errors():
    with pytest.raises(ConfigurationError):
        MultiHeadCrossAttention(10, 3)
    attention = MultiHeadCrossAttention(8, 2)
    with pytest.raises(ConfigurationError):
        attention(torch.randn(1, 2, 8), torch.randn(1, 2, 4), torch.randn(1, 2, 4))
    nan = torch.full((1, 2, 8), float("nan"))
    with pytest.raises(NumericError):
        attention(nan, nan, nan)


def test_fuse_gradients():
    torch.manual_seed(0)
    attention = MultiHeadCrossAttention(4, 2).double()
    q = torch.randn(1, 3, 4, dtype=torch.float64, requires_grad=True)
    t = torch.randn(1, 5, 4, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda a, b: fuse(a, b, attention), (q, t), rtol=1e-4)


def _scalar_attention(attention, query, keys):
    """Per-head softmax attention written with Python floats."""

    def linear(layer, x):
        w, b = layer.weight.tolist(), layer.bias.tolist()
        return [sum(w[i][j] * x[j] for j in range(len(x))) + b[i] for i in range(len(b))]

    hd = attention.head_dim
    qs = [linear(attention.q_proj, q) for q in query]
    ks = [linear(attention.k_proj, k) for k in keys]
    vs = [linear(attention.v_proj, k) for k in keys]
    outputs = []
    for q in qs:
        mixed = []
        for h in range(attention.heads):
            sl = slice(h * hd, (h + 1) * hd)
            logits = [sum(a * b for a, b in zip(q[sl], k[sl])) / math.sqrt(hd) for k in ks]
            top = max(logits)
            exps = [math.exp(x - top) for x in logits]
            total = sum(exps)
            mixed.extend(sum(e / total * v[sl][i] for e, v in zip(exps, vs)) for i in range(hd))
        outputs.append(linear(attention.out_proj, mixed))
    return outputs


def test_attention_matches_scalar_oracle():
    torch.manual_seed(1)
    attention = MultiHeadCrossAttention(8, 2).double()
    rng = np.random.default_rng(42)
    q = rng.normal(size=(3, 8))
    t = rng.normal(size=(5, 8))
    with torch.no_grad():
        out = attention(torch.from_numpy(q)[None], torch.from_numpy(t)[None], torch.from_numpy(t)[None])[0]
    expected = _scalar_attention(attention, q.tolist(), t.tolist())
    np.testing.assert_allclose(out.numpy(), np.array(expected), atol=1e-6)


def test_attention_permutation_symmetry():
    torch.manual_seed(0)
    attention = MultiHeadCrossAttention(8, 2).double()
    q = torch.randn(1, 3, 8, dtype=torch.float64)
    t = torch.randn(1, 5, 8, dtype=torch.float64)
    kv_perm, q_perm = torch.tensor([3, 0, 4, 1, 2]), torch.tensor([2, 0, 1])
    with torch.no_grad():
        base = attention(q, t, t)
        # reordering keys together with their values changes nothing
        torch.testing.assert_close(attention(q, t[:, kv_perm], t[:, kv_perm]), base)
        # reordering queries reorders the outputs
        torch.testing.assert_close(attention(q[:, q_perm], t, t), base[:, q_perm])


def test_head_parameter_gradients():
    torch.manual_seed(0)
    branch = GeoMapBranch(channels=3, dim=4, heads=2, stride=2, kv_tokens=4).double()
    names = [name for name, _ in branch.named_parameters()]
    params = tuple(p.detach().clone().requires_grad_(True) for p in branch.parameters())
    geometry = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    semantic = torch.randn(1, 4, 1, 3, dtype=torch.float64)

    def embed(*values):
        return functional_call(branch, dict(zip(names, values)), (geometry, semantic))

    assert torch.autograd.gradcheck(embed, params, eps=1e-6, atol=1e-6, rtol=1e-4)


def test_projection_pads_to_ceiling():
    projection = FeatureProjection(3, 6, stride=4)
    assert projection(torch.randn(2, 3, 10, 9)).shape == (2, 6, 3, 3)
    assert project_features(torch.randn(1, 4, 3, 8, 8), projection).shape == (1, 6, 2, 8)
    with pytest.raises(ConfigurationError):
        project_features(torch.randn(1, 5, 8, 8), projection)


def test_pool_normalize_unit_norm():
    out = pool_normalize(torch.randn(4, 6, 10))
    torch.testing.assert_close(out.norm(dim=-1), torch.ones(4))
    with pytest.raises(NumericError):
        pool_normalize(torch.ones(2, 3, 5))
    with pytest.raises(NumericError):
        pool_normalize(torch.full((1, 2, 3), float("inf")))


def test_backends_are_frozen_and_seeded():
    a, b = GeometryBackend(8, 4, seed=3), GeometryBackend(8, 4, seed=3)
    assert parameter_hash(a) == parameter_hash(b)
    assert parameter_hash(a) != parameter_hash(GeometryBackend(8, 4, seed=4))
    assert all(not p.requires_grad for p in a.parameters())
    a.train()
    assert not a.training

    images = torch.rand(2, 3, 3, 16, 16)
    assert a(images).shape == (2, 3, 8, 4, 4)
    assert SemanticBackend(12, (2, 3)).forward(torch.rand(1, 3, 16, 16)).shape == (1, 12, 2, 3)
    with pytest.raises(ConfigurationError):
        a(torch.rand(1, 1, 16, 16))


def test_embeddings_are_unit_norm_and_deterministic():
    ground, satellite = _pair()
    f_g = _geomap().embed_ground(ground)
    f_s = _geomap().embed_satellite(satellite)
    assert f_g.shape == (16,) and f_s.shape == (16,)
    assert float(f_g.norm()) == pytest.approx(1.0, abs=1e-5)
    assert float(f_s.norm()) == pytest.approx(1.0, abs=1e-5)
    torch.testing.assert_close(_geomap().embed_ground(ground), f_g, rtol=0, atol=0)


def test_head_training_leaves_backends_untouched():
    geomap = _geomap()
    before = geomap.backend_hash()
    ground, satellite = _pair()
    g_geo, g_sem = geomap.ground_features(ground)
    s_geo, s_sem = geomap.satellite_features(satellite)
    assert g_geo.shape == (4, 8, 8, 8)

    f_g = geomap.head.forward_ground(g_geo.unsqueeze(0), g_sem.unsqueeze(0))
    f_s = geomap.head.forward_satellite(s_geo.unsqueeze(0), s_sem.unsqueeze(0))
    (f_g * f_s).sum().backward()
    assert geomap.head.ground.query_adapter.weight.grad is not None
    assert geomap.backend_hash() == before
    assert all(p.grad is None for p in geomap.geometry_backend.parameters())


def test_semantic_only_configuration():
    geomap = _geomap(use_geometry=False)
    ground, _ = _pair()
    geometry, _ = geomap.ground_features(ground)
    assert geometry is None
    assert not hasattr(geomap.head.ground, "attention")
    assert float(geomap.embed_ground(ground).norm()) == pytest.approx(1.0, abs=1e-5)


def test_head_requires_geometry_when_enabled():
    head = GeoMapHead(TINY_BACKEND, GeoMapConfig(heads=2))
    with pytest.raises(ConfigurationError):
        head.forward_satellite(None, torch.randn(1, 16, 2, 2))


def test_retrieve_ranks_by_distance():
    refs = torch.eye(4)
    query = torch.tensor([0.1, 0.0, 0.99, 0.0])
    assert retrieve(query, refs)[0] == 2
    assert retrieve(query.numpy(), refs.numpy()).tolist()[0] == 2


def test_batch_embedding_matches_single():
    geomap = _geomap()
    images = [_pair(seed)[1] for seed in range(3)]
    batch = geomap.embed_satellites(images)
    for i, image in enumerate(images):
        np.testing.assert_allclose(batch[i].numpy(), geomap.embed_satellite(image).numpy(), atol=1e-5)
