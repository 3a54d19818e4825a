import numpy as np
import pytest
import torch

from models.conditioning import Conditioning, build_conditioning
from models.dem_encoder import dem_batch
from models.text_conditioning import embed
from models.unet_mca import (
    INJECTED_LEVELS,
    CrossAttention,
    MCAMode,
    SEFuse,
    SelfAttention,
    UNetConfig,
    build_unet,
    count_parameters,
    time_embedding,
    unet_config_for,
)
from tests.conftest import randomize_parameters, tiny_unet_config


def _conditioning(encoder, text_provider, dem_value=None, seed=0):
    if dem_value is None:
        rng = np.random.default_rng(seed)
        grids = [rng.random((32, 32)) for _ in range(2)]
    else:
        grids = [np.full((32, 32), dem_value) for _ in range(2)]
    dems = dem_batch(grids)
    embeddings = [embed("snow-capped ridges", text_provider), embed("sandy desert flats", text_provider)]
    return build_conditioning(embeddings, pyramid=encoder.encode(dems), dem=dems * 2 - 1)


def _x_t(seed=0):
    return torch.randn(2, 3, 32, 32, generator=torch.Generator().manual_seed(seed))


def test_se_fuse_gate_identity():
    fuse = randomize_parameters(SEFuse(8, 4, se_reduction=2), seed=1)
    with torch.no_grad():
        last = fuse.excite[2]
        last.weight.zero_()
        last.bias.fill_(1000.0)
    bypass = SEFuse(8, 4, se_reduction=2, bypass_gates=True)
    bypass.load_state_dict(fuse.state_dict())

    unet_feat = torch.randn(2, 8, 6, 6, generator=torch.Generator().manual_seed(2))
    dem_feat = torch.randn(2, 4, 6, 6, generator=torch.Generator().manual_seed(3))
    assert torch.equal(fuse(unet_feat, dem_feat), bypass(unet_feat, dem_feat))


def test_se_fuse_zero_injection_preserves_unet_path():
    fuse = randomize_parameters(SEFuse(8, 4, se_reduction=2, bypass_gates=True), seed=4)
    with torch.no_grad():
        fuse.proj.weight[:, 8:].zero_()
    unet_feat = torch.randn(1, 8, 4, 4, generator=torch.Generator().manual_seed(5))
    with_zero = fuse(unet_feat, torch.zeros(1, 4, 4, 4))
    with_noise = fuse(unet_feat, torch.randn(1, 4, 4, 4, generator=torch.Generator().manual_seed(6)))
    assert torch.allclose(with_zero, with_noise)


def test_se_fuse_fresh_projection_contributes_nothing():
    fuse = SEFuse(8, 4)
    out = fuse(torch.randn(1, 8, 4, 4), torch.randn(1, 4, 4, 4))
    assert torch.count_nonzero(out) == 0


def test_se_fuse_shape_fuzz():
    rng = np.random.default_rng(0)
    for i in range(20):
        cu, cd = int(rng.integers(1, 33)), int(rng.integers(1, 33))
        size = int(rng.choice([2, 4, 8, 16]))
        fuse = randomize_parameters(SEFuse(cu, cd, se_reduction=int(rng.integers(1, 5))), seed=i)
        out = fuse(torch.randn(2, cu, size, size), torch.randn(2, cd, size, size))
        assert out.shape == (2, cu, size, size)
        assert torch.isfinite(out).all()


def test_se_fuse_rejects_spatial_mismatch():
    with pytest.raises(ValueError, match="spatial mismatch"):
        SEFuse(8, 4)(torch.zeros(1, 8, 4, 4), torch.zeros(1, 4, 8, 8))


def test_injected_levels_per_mode():
    for mode, levels in INJECTED_LEVELS.items():
        model = build_unet(tiny_unet_config(mode), seed=0)
        assert sorted(int(k) for k in model.fusers) == list(levels)


def test_forward_shape_and_finiteness(encoder, text_provider):
    for mode in MCAMode:
        model = randomize_parameters(build_unet(tiny_unet_config(mode), seed=0), seed=1)
        v = model(_x_t(), torch.tensor([0.1, 0.9]), _conditioning(encoder, text_provider))
        assert v.shape == (2, 3, 32, 32)
        assert torch.isfinite(v).all()


def test_full_with_zeroed_outer_projections_equals_single(encoder, text_provider):
    full = randomize_parameters(build_unet(tiny_unet_config(MCAMode.FULL), seed=0), seed=7)
    with torch.no_grad():
        for key in ("0", "2"):
            full.fusers[key].proj.weight.zero_()
            full.fusers[key].proj.bias.zero_()
    single = build_unet(tiny_unet_config(MCAMode.SINGLE_16), seed=0)
    single.load_state_dict(full.state_dict(), strict=False)

    cond = _conditioning(encoder, text_provider)
    t = torch.tensor([0.3, 0.6])
    assert torch.equal(full.eval()(_x_t(), t, cond), single.eval()(_x_t(), t, cond))


def test_none_mode_responds_to_raw_dem(encoder, text_provider):
    model = randomize_parameters(build_unet(tiny_unet_config(MCAMode.NONE), seed=0), seed=8)
    low = model(_x_t(), 0.5, _conditioning(encoder, text_provider, dem_value=0.0))
    high = model(_x_t(), 0.5, _conditioning(encoder, text_provider, dem_value=1.0))
    assert not torch.allclose(low, high)


def test_missing_conditioning_is_rejected(encoder, text_provider):
    cond = _conditioning(encoder, text_provider)
    full = build_unet(tiny_unet_config(MCAMode.FULL), seed=0)
    with pytest.raises(ValueError, match="pyramid"):
        full(_x_t(), 0.5, Conditioning(text=cond.text, text_mask=cond.text_mask, dem=cond.dem))
    with pytest.raises(ValueError, match="text"):
        full(_x_t(), 0.5, None)
    none = build_unet(tiny_unet_config(MCAMode.NONE), seed=0)
    with pytest.raises(ValueError, match="raw DEM"):
        none(_x_t(), 0.5, Conditioning(text=cond.text, text_mask=cond.text_mask, pyramid=cond.pyramid))


def test_unconditional_branch_uses_null_text(encoder, text_provider):
    model = randomize_parameters(build_unet(tiny_unet_config(MCAMode.FULL), seed=0), seed=9)
    cond = _conditioning(encoder, text_provider)
    v_c = model(_x_t(), 0.5, cond)
    v_u = model(_x_t(), 0.5, cond.unconditional())
    assert v_u.shape == v_c.shape
    assert not torch.allclose(v_c, v_u)


def test_unconditional_matches_text_length(encoder, text_provider):
    cond = _conditioning(encoder, text_provider)
    uncond = cond.unconditional()
    assert uncond.text.shape == cond.text.shape
    assert uncond.text.dtype == cond.text.dtype
    assert torch.count_nonzero(uncond.text) == 0
    assert uncond.text_mask.shape == cond.text_mask.shape
    assert not uncond.text_mask.any()
    assert uncond.pyramid is cond.pyramid


def test_self_attention_rows_sum_to_one():
    attn = randomize_parameters(SelfAttention(8, num_heads=2), seed=3)
    x = torch.randn(2, 8, 4, 4, generator=torch.Generator().manual_seed(4))
    with torch.no_grad():
        weights = attn.attention_weights(x)
    assert weights.shape == (2, 16, 16)
    assert torch.all(weights >= 0)
    assert torch.allclose(weights.sum(dim=-1), torch.ones(2, 16), atol=1e-5)


def test_cross_attention_rows_sum_to_one_with_padding():
    attn = randomize_parameters(CrossAttention(8, text_dim=12, num_heads=2), seed=5)
    gen = torch.Generator().manual_seed(6)
    x = torch.randn(2, 8, 4, 4, generator=gen)
    text = torch.randn(2, 5, 12, generator=gen)
    mask = torch.tensor([[False, False, False, True, True], [False] * 5])
    with torch.no_grad():
        unmasked = attn.attention_weights(x, text)
        masked = attn.attention_weights(x, text, mask)
    for weights in (unmasked, masked):
        assert weights.shape == (2, 16, 5)
        assert torch.allclose(weights.sum(dim=-1), torch.ones(2, 16), atol=1e-5)
    assert torch.all(masked[0, :, 3:] == 0)


def test_time_embedding_separates_fine_grid():
    t = torch.linspace(0.0, 1.0, 1001, dtype=torch.float64)
    emb = time_embedding(t, 32)
    assert emb.shape == (1001, 32)
    dist = torch.cdist(emb, emb)
    dist.fill_diagonal_(float("inf"))
    assert float(dist.min()) > 1e-4


def test_time_embedding_contract():
    zero = time_embedding(0.0, 32)
    assert torch.equal(zero, time_embedding(0.0, 32))
    assert float((zero - time_embedding(1.0, 32)).norm()) > 0.1
    assert time_embedding(torch.tensor([0.0, 0.5]), 32).shape == (2, 32)
    with pytest.raises(ValueError):
        time_embedding(0.5, 31)


def test_parameter_counts_grow_with_size():
    counts = [count_parameters(unet_config_for(size)) for size in ("S", "M", "L")]
    assert counts[0] < counts[1] < counts[2]
    assert count_parameters(unet_config_for("S")) == counts[0]


def test_doubling_base_channels_roughly_quadruples_count():
    small = count_parameters(tiny_unet_config(MCAMode.NONE, base_channels=32))
    large = count_parameters(tiny_unet_config(MCAMode.NONE, base_channels=64))
    assert 3.0 < large / small < 4.5


def test_config_validation():
    with pytest.raises(ValueError):
        UNetConfig(channel_mults=(1, 2))
    with pytest.raises(ValueError):
        UNetConfig(mca_mode="sometimes")
    with pytest.raises(ValueError):
        UNetConfig(attention_levels=(5,))
    with pytest.raises(ValueError):
        unet_config_for("XL")
