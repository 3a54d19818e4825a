import json

import numpy as np
import pytest

from utils.metrics import (
    DCOR_GT,
    FID_KEY,
    DegenerateSampleError,
    MetricsConfig,
    MetricsReport,
    compute_report,
    dcor_image_pair,
    delta_dcor,
    distance_correlation,
    frechet_distance,
    gap_closure,
    get_perceptual_model,
    hsv_to_rgb,
    mean_dcor,
    mse,
    register_perceptual_model,
    relative_reduction,
    rgb_to_hsv,
)
from utils.tiles import TerrainTile, TextureTile


def _naive_dcor(X, Y) -> float:
    X = np.asarray(X, dtype=float).reshape(len(X), -1)
    Y = np.asarray(Y, dtype=float).reshape(len(Y), -1)
    n = len(X)
    a = np.zeros((n, n))
    b = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            a[i, j] = np.sqrt(np.sum((X[i] - X[j]) ** 2))
            b[i, j] = np.sqrt(np.sum((Y[i] - Y[j]) ** 2))
    a_row, a_col, a_all = a.mean(axis=1), a.mean(axis=0), a.mean()
    b_row, b_col, b_all = b.mean(axis=1), b.mean(axis=0), b.mean()
    A = np.zeros((n, n))
    B = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            A[i, j] = a[i, j] - a_row[i] - a_col[j] + a_all
            B[i, j] = b[i, j] - b_row[i] - b_col[j] + b_all
    dcov2 = (A * B).sum() / n ** 2
    dvar_x = (A * A).sum() / n ** 2
    dvar_y = (B * B).sum() / n ** 2
    return float(np.sqrt(max(dcov2, 0.0) / np.sqrt(dvar_x * dvar_y)))


def _rotation(theta: float) -> np.ndarray:
    return np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])


def test_rgb_to_hsv_known_colours():
    assert np.allclose(rgb_to_hsv(np.array([[[1.0, 0.0, 0.0]]]))[0, 0], [0.0, 1.0, 1.0])
    assert np.allclose(rgb_to_hsv(np.array([[[0.5, 0.5, 0.5]]]))[0, 0], [0.0, 0.0, 0.5])


def test_hsv_round_trip():
    rgb = np.random.default_rng(0).random((100, 100, 3))
    assert np.abs(hsv_to_rgb(rgb_to_hsv(rgb)) - rgb).max() < 1 / 255


def test_rgb_to_hsv_clamps_out_of_range(caplog):
    hsv = rgb_to_hsv(np.array([[[1.5, -0.2, 0.0]]]))
    assert np.allclose(hsv[0, 0], [0.0, 1.0, 1.0])
    assert "clamping" in caplog.text


def test_dcor_two_point_example():
    assert distance_correlation([0.0, 1.0], [0.0, 1.0]) == pytest.approx(1.0)


def test_dcor_affine_dependence_is_one():
    x = np.random.default_rng(1).normal(size=50)
    assert abs(distance_correlation(x, 3 * x + 7) - 1.0) < 1e-8


def test_dcor_matches_naive_oracle():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(2, 65))
        X = rng.normal(size=(n, int(rng.integers(1, 4))))
        Y = rng.normal(size=(n, int(rng.integers(1, 4))))
        assert abs(distance_correlation(X, Y) - _naive_dcor(X, Y)) < 1e-10


def test_dcor_invariances():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(40, 2))
    Y = X[:, :1] ** 2 + 0.1 * rng.normal(size=(40, 1))
    base = distance_correlation(X, Y)
    assert abs(distance_correlation(X + [5.0, -2.0], Y) - base) < 1e-8
    assert abs(distance_correlation(X @ _rotation(0.7).T, Y) - base) < 1e-8
    assert abs(distance_correlation(3.5 * X, 0.2 * Y) - base) < 1e-8


def test_dcor_of_independent_samples_is_small():
    values = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        values.append(distance_correlation(rng.normal(size=512), rng.normal(size=512)))
    assert np.mean(values) < 0.2


def test_dcor_rejects_constant_samples():
    with pytest.raises(DegenerateSampleError, match="degenerate sample"):
        distance_correlation(np.ones(10), np.arange(10.0))
    with pytest.raises(ValueError):
        distance_correlation(np.arange(3.0), np.arange(4.0))


def test_dcor_image_pair_value_channel_equals_elevation():
    elevation = np.random.default_rng(4).random((16, 16))
    rgb = np.repeat(elevation[..., None], 3, axis=2)  # grey: h = s = 0, v = elevation
    dem = TerrainTile(elevation)
    assert abs(dcor_image_pair(rgb, dem, drop_constant_channels=True) - 1.0) < 1e-8

    hsv = rgb_to_hsv(rgb).reshape(-1, 3)
    assert abs(dcor_image_pair(rgb, dem) - _naive_dcor(hsv, elevation.reshape(-1, 1))) < 1e-8


def test_dcor_image_pair_independent_noise_is_small():
    rng = np.random.default_rng(5)
    assert dcor_image_pair(rng.random((32, 32, 3)), TerrainTile(rng.random((32, 32)))) < 0.25


def test_dcor_image_pair_is_repeatable_and_subsampled():
    rng = np.random.default_rng(6)
    texture, dem = rng.random((64, 64, 3)), TerrainTile(rng.random((64, 64)))
    assert dcor_image_pair(texture, dem, seed=3) == dcor_image_pair(texture, dem, seed=3)


def test_dcor_image_pair_flat_dem_is_degenerate():
    with pytest.raises(DegenerateSampleError):
        dcor_image_pair(np.random.default_rng(7).random((8, 8, 3)), TerrainTile(np.full((8, 8), 0.5)))


def _pair_with_dcor(seed: int):
    rng = np.random.default_rng(seed)
    elevation = rng.random((16, 16))
    texture = rng.random((16, 16, 3))
    return texture, TerrainTile(elevation)


def test_delta_dcor_definition():
    pairs = [_pair_with_dcor(s) for s in range(3)]
    d = np.mean([dcor_image_pair(t, dem) for t, dem in pairs])
    assert abs(delta_dcor(pairs) - abs(d - DCOR_GT)) < 1e-12

    gt_cfg = MetricsConfig(dcor_gt=float(d))
    assert delta_dcor(pairs, gt_cfg) == pytest.approx(0.0, abs=1e-12)


def test_delta_dcor_published_gap():
    assert abs(0.4572 - MetricsConfig().dcor_gt) == pytest.approx(0.0756)


def test_mean_dcor_skips_degenerate_pairs(caplog):
    good = _pair_with_dcor(8)
    flat = (np.random.default_rng(9).random((16, 16, 3)), TerrainTile(np.zeros((16, 16))))
    mean, used = mean_dcor([good, flat])
    assert used == 1
    assert mean == pytest.approx(dcor_image_pair(*good))
    assert "Skipping pair 1" in caplog.text
    with pytest.raises(DegenerateSampleError):
        mean_dcor([flat])


def test_mse_values():
    a = np.random.default_rng(10).random((4, 4, 3))
    assert mse(a, a) == 0.0
    assert mse(np.zeros((2, 2, 3)), np.full((2, 2, 3), 0.1)) == pytest.approx(0.01)
    b = np.random.default_rng(11).random((4, 4, 3))
    naive = sum((a[i, j, k] - b[i, j, k]) ** 2 for i in range(4) for j in range(4) for k in range(3)) / 48
    assert abs(mse(a, b) - naive) < 1e-12
    with pytest.raises(ValueError):
        mse(a, np.zeros((2, 2, 3)))


def test_frechet_distance_gaussians():
    rng = np.random.default_rng(12)
    mu = np.array([1.0, -0.5, 0.5, 2.0])
    a = rng.normal(size=(10_000, 4))
    b = rng.normal(size=(10_000, 4)) + mu
    expected = float(mu @ mu)
    assert abs(frechet_distance(a, b) - expected) / expected < 0.05
    assert frechet_distance(a, a) < 1e-6
    assert abs(frechet_distance(a, b) - frechet_distance(b, a)) < 1e-8


def test_frechet_distance_rejects_non_finite():
    a = np.random.default_rng(13).normal(size=(20, 2))
    bad = a.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        frechet_distance(a, bad)


def test_relative_reduction_and_gap_closure():
    assert relative_reduction(10.29, 20.24) == pytest.approx(0.4916, abs=1e-4)
    assert gap_closure(0.0016, 0.0756) == pytest.approx(0.9788, abs=1e-4)
    with pytest.raises(ValueError):
        relative_reduction(1.0, 0.0)


def test_compute_report_for_reference_textures():
    rng = np.random.default_rng(14)
    dems = [TerrainTile(rng.random((32, 32))) for _ in range(6)]
    refs = [TextureTile(rng.random((32, 32, 3))) for _ in range(6)]
    report = compute_report(refs, refs, dems)
    assert report.mse == 0.0
    assert report.n_tiles == 6
    assert report.fid == pytest.approx(0.0, abs=1e-3)
    assert report.lpips is None
    assert report.delta_dcor == pytest.approx(abs(report.dcor - DCOR_GT))


def test_compute_report_records_failed_tiles():
    rng = np.random.default_rng(15)
    dems = [TerrainTile(rng.random((32, 32))) for _ in range(3)]
    refs = [TextureTile(rng.random((32, 32, 3))) for _ in range(3)]
    report = compute_report([refs[0], None, refs[2]], refs, dems, errors=["r1: sampler diverged"])
    assert report.n_tiles == 2
    assert "r1: sampler diverged" in report.errors
    with pytest.raises(ValueError, match="All 2 tiles failed"):
        compute_report([None, None], refs[:2], dems[:2])


def test_perceptual_plugin_is_used():
    class MeanAbs:
        def distance(self, a, b):
            return float(np.abs(a - b).mean())

    register_perceptual_model("mean-abs", MeanAbs)
    assert get_perceptual_model("none") is None

    rng = np.random.default_rng(16)
    dems = [TerrainTile(rng.random((32, 32))) for _ in range(3)]
    refs = [TextureTile(rng.random((32, 32, 3))) for _ in range(3)]
    gens = [TextureTile(np.clip(r.rgb + 0.1, 0, 1)) for r in refs]
    report = compute_report(gens, refs, dems, MetricsConfig(perceptual_model="mean-abs"))
    assert 0.0 < report.lpips <= 0.1


def test_report_serialization_labels_fid():
    report = MetricsReport(mse=0.01, dcor=0.4, delta_dcor=0.0184, fid=3.2, n_tiles=4)
    data = json.loads(report.to_json(MetricsConfig()))
    assert data[FID_KEY] == 3.2
    assert data["config"]["feature_extractor"] == "desk"
    with pytest.raises(ValueError):
        MetricsReport(mse=float("nan"), dcor=0.1, delta_dcor=0.1)


def test_metrics_config_validation():
    with pytest.raises(ValueError):
        MetricsConfig(dcor_gt=1.5)
