import numpy as np
import pytest
import torch

from models.dem_encoder import (
    EncoderWeightsError,
    FeaturePyramid,
    build_seeded_encoder,
    dem_batch,
    encode_dem,
    load_encoder_weights,
    parameter_checksum,
    save_encoder_weights,
)
from utils.tiles import TerrainTile


def _ramp_dem() -> TerrainTile:
    return TerrainTile(np.tile(np.linspace(0.0, 1.0, 32), (32, 1)))


def test_pyramid_levels_follow_downsampling(encoder):
    pyramid = encode_dem(_ramp_dem(), encoder)
    assert [tuple(level.shape) for level in pyramid.levels] == [(1, 16, 32, 32), (1, 32, 16, 16), (1, 64, 8, 8)]
    assert pyramid.channels == encoder.preset.channels


def test_encode_is_pure_and_seeded_weights_are_stable(encoder):
    zero = TerrainTile(np.zeros((32, 32)))
    first = encode_dem(zero, encoder)
    second = encode_dem(zero, build_seeded_encoder("tiny-seeded"))
    for a, b in zip(first.levels, second.levels):
        assert torch.equal(a, b)


def test_single_pixel_change_stays_in_receptive_field(encoder):
    base = np.zeros((32, 32))
    changed = base.copy()
    changed[16, 16] = 1.0
    f_base = encode_dem(TerrainTile(base), encoder).f32
    f_changed = encode_dem(TerrainTile(changed), encoder).f32

    # two 3×3 convolutions before the first tap: radius 2
    diff = (f_base - f_changed).abs().sum(dim=(0, 1))
    rows, cols = torch.nonzero(diff > 0, as_tuple=True)
    assert len(rows) > 0
    assert int(rows.min()) >= 14 and int(rows.max()) <= 18
    assert int(cols.min()) >= 14 and int(cols.max()) <= 18


def test_wrong_spatial_size_is_rejected(encoder):
    with pytest.raises(ValueError, match="no implicit resize"):
        encoder.encode(torch.zeros(1, 1, 16, 16))
    with pytest.raises(ValueError):
        encoder.encode(torch.zeros(1, 3, 32, 32))


def test_encoder_outputs_stay_finite_on_random_tiles(encoder):
    gen = torch.Generator().manual_seed(21)
    tiles = torch.rand(1000, 1, 32, 32, generator=gen)
    tiles[:10] = 0.0
    tiles[10:20] = 1.0
    tiles[20:30] = (tiles[20:30] > 0.5).float()
    with torch.no_grad():
        for batch in tiles.split(250):
            pyramid = encoder.encode(batch)
            for level in pyramid.levels:
                assert torch.isfinite(level).all()


def test_encoder_is_frozen(encoder):
    assert all(not p.requires_grad for p in encoder.parameters())
    assert not encoder.training


def test_weights_round_trip_preserves_checksum(tmp_path, encoder):
    path = save_encoder_weights(encoder, tmp_path / "encoder.pt")
    loaded = load_encoder_weights(path, preset="tiny-seeded")
    assert parameter_checksum(loaded) == parameter_checksum(encoder)


def test_mismatched_weights_name_first_bad_layer(tmp_path, encoder):
    path = save_encoder_weights(encoder, tmp_path / "encoder.pt")
    payload = torch.load(path, weights_only=True)
    first = sorted(payload["tensors"])[0]
    payload["tensors"][first] = payload["tensors"][first][:1]
    torch.save(payload, path)
    with pytest.raises(EncoderWeightsError, match=first.replace(".", r"\.")):
        load_encoder_weights(path, preset="tiny-seeded")


def test_corrupted_weights_fail_checksum(tmp_path, encoder):
    path = save_encoder_weights(encoder, tmp_path / "encoder.pt")
    payload = torch.load(path, weights_only=True)
    name = sorted(payload["tensors"])[0]
    payload["tensors"][name] = payload["tensors"][name] + 1.0
    torch.save(payload, path)
    with pytest.raises(EncoderWeightsError, match="Checksum"):
        load_encoder_weights(path, preset="tiny-seeded")


def test_absent_file_falls_back_only_for_tiny_preset(tmp_path, encoder):
    fallback = load_encoder_weights(tmp_path / "missing.pt", preset="tiny-seeded")
    assert parameter_checksum(fallback) == parameter_checksum(encoder)
    with pytest.raises(FileNotFoundError):
        load_encoder_weights(tmp_path / "missing.pt", preset="vgg16")


def test_feature_pyramid_cat_and_select(encoder):
    dems = dem_batch([np.zeros((32, 32)), np.ones((32, 32))])
    pyramid = encoder.encode(dems)
    joined = FeaturePyramid.cat([pyramid.select(1), pyramid.select(0)])
    assert torch.equal(joined.f8[0], pyramid.f8[1])
    assert torch.equal(joined.f8[1], pyramid.f8[0])
