import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from spawnnet.backbone import BackboneSpec, DenseFeatureGrid
from spawnnet.encoders import (Adapter, AdapterSpec, EncoderConfig, LfSEncoder, SpawnNetEncoder,
                               adapter_forward, adapter_norm_map, bilinear_resize, control_schedule,
                               make_encoder_config, make_variant)
from spawnnet.errors import ConfigError, InputError

from conftest import tiny_backbone_spec


def bilinear_oracle(src: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear interpolation with edge clamping."""
    in_h, in_w = src.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        y = min(max((i + 0.5) * in_h / out_h - 0.5, 0.0), in_h - 1)
        y0 = int(np.floor(y)); y1 = min(y0 + 1, in_h - 1); wy = y - y0
        for j in range(out_w):
            x = min(max((j + 0.5) * in_w / out_w - 0.5, 0.0), in_w - 1)
            x0 = int(np.floor(x)); x1 = min(x0 + 1, in_w - 1); wx = x - x0
            out[i, j] = ((1 - wy) * ((1 - wx) * src[y0, x0] + wx * src[y0, x1])
                         + wy * ((1 - wx) * src[y1, x0] + wx * src[y1, x1]))
    return out


def test_bilinear_2x2_to_4x4_hand_values():
    src = np.array([[0.0, 1.0], [2.0, 3.0]])
    got = bilinear_resize(torch.tensor(src, dtype=torch.float32)[None, None], (4, 4))[0, 0].numpy()
    expected = bilinear_oracle(src, 4, 4)
    np.testing.assert_allclose(got, expected, atol=1e-6)
    # corners clamp to the source corners, the centre 2x2 mixes 3:1
    assert got[0, 0] == 0.0 and got[3, 3] == 3.0
    np.testing.assert_allclose(got[1, 1], 0.75, atol=1e-6)
    np.testing.assert_allclose(got[1, 2], 1.25, atol=1e-6)


@pytest.mark.parametrize("shape", [(3, 5, 7, 4), (5, 2, 3, 9)])
def test_bilinear_matches_oracle_on_random_grids(shape):
    h, w, oh, ow = shape
    src = np.random.default_rng(0).normal(size=(h, w))
    got = bilinear_resize(torch.tensor(src)[None, None], (oh, ow))[0, 0].numpy()
    np.testing.assert_allclose(got, bilinear_oracle(src, oh, ow), atol=1e-6)


def make_adapter(C=6, D=3, ch=2, hl=4, wl=4, seed=0):
    torch.manual_seed(seed)
    return Adapter(AdapterSpec(6, D, hl, wl, 1), C, ch)


def test_adapter_pipeline_order():
    a = make_adapter()
    grid = torch.randn(1, 6, 2, 2)
    learned = torch.randn(1, 2, 4, 4)
    with torch.no_grad():
        p = F.relu(F.conv2d(grid, a.proj.weight, a.proj.bias))  # 1x1 conv C -> D
        p = F.interpolate(p, size=(4, 4), mode="bilinear", align_corners=False)  # resize
        x = torch.cat([learned, p], dim=1)  # learned first, then pretrained
        for res in (a.res1, a.res2):
            r = F.conv2d(F.relu(x), res.conv1.weight, res.conv1.bias, padding=1)
            x = x + F.conv2d(F.relu(r), res.conv2.weight, res.conv2.bias, padding=1)
        got = a(grid, learned)
    assert got.shape == (1, 5, 4, 4)
    torch.testing.assert_close(got, x, atol=1e-6, rtol=0)


def test_adapter_reference_widths():
    a = Adapter(AdapterSpec(6, 64, 28, 28, 1), 384, 64)
    out = adapter_forward(torch.randn(28, 28, 384), torch.randn(28, 28, 64), a)
    assert out.shape == (28, 28, 128)
    assert a.res1.conv1.in_channels == 128 and torch.isfinite(out).all()


def test_zero_grid_zero_bias_gives_zero_pretrained_half():
    a = make_adapter()
    with torch.no_grad():
        a.proj.bias.zero_()
    assert torch.count_nonzero(a.project(torch.zeros(1, 6, 2, 2))) == 0
    with torch.no_grad():
        a.proj.bias.copy_(torch.tensor([0.5, -1.0, 2.0]))
    tile = a.project(torch.zeros(1, 6, 2, 2))
    # post-ReLU bias tile
    torch.testing.assert_close(tile[0, :, 0, 0], torch.tensor([0.5, 0.0, 2.0]))
    assert torch.equal(tile, tile[:, :, :1, :1].expand_as(tile))


def test_adapter_rejects_wrong_learned_map():
    a = make_adapter()
    with pytest.raises(ConfigError):
        a(torch.randn(1, 6, 2, 2), torch.randn(1, 2, 3, 4))
    with pytest.raises(ConfigError):
        a(torch.randn(1, 6, 2, 2), torch.randn(1, 3, 4, 4))


def test_norm_map_single_position_by_hand():
    a = make_adapter(hl=1, wl=1)
    g = DenseFeatureGrid(torch.randn(1, 1, 6), 6)
    v = F.relu(a.proj.weight[:, :, 0, 0] @ g.data[0, 0] + a.proj.bias)
    m = adapter_norm_map(g, a)
    assert m.shape == (1, 1, 1)
    np.testing.assert_allclose(m.item(), float(np.sqrt((v.detach().numpy() ** 2).sum())), rtol=1e-6)


def test_norm_map_zero_and_nonnegative():
    a = make_adapter()
    with torch.no_grad():
        a.proj.bias.zero_()
    assert torch.count_nonzero(adapter_norm_map(torch.zeros(2, 6, 2, 2), a)) == 0
    m = adapter_norm_map(torch.randn(3, 6, 5, 5) * 10, a)
    assert m.shape == (3, 4, 4) and (m >= 0).all()
    assert adapter_norm_map(torch.randn(3, 6, 5, 5), a, resize=False).shape == (3, 5, 5)


# -- full encoders ------------------------------------------------------------

def tiny_config(variant="spawnnet", ablation="none", size=32, **kw):
    return make_encoder_config(variant, tiny_backbone_spec(), size, ablation=ablation,
                               projection_width=4, control_width=4, lfs_width=8, **kw)


def features_for(cfg: EncoderConfig, B, n, seed=0):
    g = torch.Generator().manual_seed(seed)
    C, (h, w) = cfg.feature_dim, cfg.grid_size
    f = {a.source_layer: torch.randn(B, n, C, h, w, generator=g) for a in cfg.adapters}
    f["cls"] = torch.randn(B, n, C, generator=g)
    return f


def test_full_size_schedule_at_224():
    cfg = make_encoder_config("spawnnet", BackboneSpec(), 224)
    assert [(a.source_layer, a.target_height, a.insertion_point) for a in cfg.adapters] == \
        [(6, 28, 1), (9, 14, 2), (12, 7, 3)]
    assert cfg.grid_size == (28, 28)


def test_spawnnet_end_to_end_embedding_width():
    cfg = tiny_config()
    enc = make_variant(cfg)
    x = torch.rand(2, 3, 3, 32, 32)
    out = enc(x, features_for(cfg, 2, 3))
    assert out.shape == (2, 3 * enc.image_dim) and torch.isfinite(out).all()
    maps = enc.stage_maps(x, features_for(cfg, 2, 3))
    assert [tuple(m.shape[1:]) for m in maps] == [(8, 4, 4), (8, 2, 2), (8, 1, 1)]


def test_missing_grid_is_input_error():
    cfg = tiny_config()
    f = features_for(cfg, 1, 1)
    del f[2]
    with pytest.raises(InputError):
        make_variant(cfg)(torch.rand(1, 1, 3, 32, 32), f)


def test_zero_pretrained_ignores_backbone_features():
    cfg = tiny_config(ablation="zero_pretrained")
    enc = make_variant(cfg)
    x = torch.rand(1, 2, 3, 32, 32)
    assert enc.required_layers() == ()
    a = enc(x, features_for(cfg, 1, 2, seed=0))
    b = enc(x, features_for(cfg, 1, 2, seed=1))
    assert torch.equal(a, b)
    assert torch.equal(a, enc(x, {}))


def test_zero_pretrained_differs_from_full():
    full = make_variant(tiny_config())
    zero = make_variant(tiny_config(ablation="zero_pretrained"))
    zero.load_state_dict(full.state_dict())
    x = torch.rand(1, 1, 3, 32, 32)
    f = features_for(full.config, 1, 1)
    assert not torch.allclose(full(x, f), zero(x, f))


def test_last_layer_only_ignores_earlier_grids():
    cfg = tiny_config(ablation="last_layer_only")
    enc = make_variant(cfg)
    assert enc.required_layers() == (3,)
    x = torch.rand(1, 2, 3, 32, 32)
    f = features_for(cfg, 1, 2)
    g = dict(f)
    g[1] = g[1] + 5 * torch.randn_like(g[1])
    g[2] = torch.randn_like(g[2])
    assert torch.equal(enc(x, f), enc(x, g))
    h = dict(f)
    h[3] = torch.randn_like(h[3])
    assert not torch.equal(enc(x, f), enc(x, h))


def test_cls_tiled_branch_is_spatially_constant():
    cfg = tiny_config(ablation="cls_tiled")
    enc = make_variant(cfg)
    f = features_for(cfg, 1, 2)
    grids = enc._pretrained_inputs(f, 2)
    for g, adapter in zip(grids, enc.adapters):
        assert g.shape == (2, cfg.feature_dim, *cfg.grid_size)
        p = adapter.project(g)
        assert (p - p[..., :1, :1]).abs().max() <= 1e-6


def test_ablation_only_on_spawnnet():
    with pytest.raises(ConfigError):
        tiny_config("lfs", ablation="cls_tiled")
    cfg = tiny_config("lfs")
    cfg.ablation = "zero_pretrained"
    with pytest.raises(ConfigError):
        make_variant(cfg)


def test_config_invariants():
    with pytest.raises(ConfigError):
        EncoderConfig(variant="spawnnet", adapters=[])
    with pytest.raises(ConfigError):
        EncoderConfig(variant="lfs", adapters=[AdapterSpec(6)])
    with pytest.raises(ConfigError):
        EncoderConfig(variant="bogus")
    with pytest.raises(ConfigError):
        AdapterSpec(6, projection_width=0)
    bad = tiny_config()
    bad.adapters[1].target_height = 3
    with pytest.raises(ConfigError):
        EncoderConfig(**{**bad.__dict__})


def test_depth_variants_take_four_channels():
    assert tiny_config("spawnnet_depth").input_channels == 4
    assert tiny_config("lfs_depth").input_channels == 4
    enc = make_variant(tiny_config("spawnnet_depth"))
    assert enc.stem[0].in_channels == 4


def test_lfs_zero_input_zero_bias_gives_zero_embedding():
    enc = make_variant(tiny_config("lfs"))
    with torch.no_grad():
        for m in enc.modules():
            if isinstance(m, torch.nn.Conv2d):
                m.bias.zero_()
    out = enc(torch.zeros(2, 4, 3, 32, 32))
    assert out.shape == (2, 4 * enc.image_dim) and torch.count_nonzero(out) == 0
    assert isinstance(enc, LfSEncoder)


def test_lfs_stacked_frames_train():
    enc = make_variant(tiny_config("lfs"))
    out = enc(torch.rand(1, 4, 3, 32, 32))
    out.sum().backward()
    assert all(p.grad is not None for p in enc.parameters())


def test_frozen_cls_uses_only_cls():
    cfg = tiny_config("frozen_cls")
    enc = make_variant(cfg)
    f = features_for(cfg, 2, 3)
    out = enc(None, f)
    torch.testing.assert_close(out, f["cls"].reshape(2, -1))
    assert sum(p.numel() for p in enc.parameters()) == 0


@settings(max_examples=25, deadline=None)
@given(size=st.integers(16, 120), n_layers=st.integers(1, 4), cw=st.integers(1, 6), D=st.integers(1, 6))
def test_shape_schedule_property(size, n_layers, cw, D):
    spec = BackboneSpec(embed_dim=6, num_heads=2, num_layers=4, extraction_layers=tuple(range(1, n_layers + 1)))
    cfg = make_encoder_config("spawnnet", spec, size, projection_width=D, control_width=cw)
    enc = SpawnNetEncoder(cfg)
    x = torch.rand(1, 1, 3, size, size)
    C, (h, w) = cfg.feature_dim, cfg.grid_size
    f = {l: torch.rand(1, 1, C, h, w) for l in spec.extraction_layers}
    maps = enc.stage_maps(x, f)
    sched = control_schedule(size, n_layers)
    assert [tuple(m.shape[-2:]) for m in maps] == sched
    assert all(m.shape[1] == cw + D and torch.isfinite(m).all() for m in maps)
    assert enc(x, f).shape[1] == (cw + D) * sched[-1][0] * sched[-1][1]
