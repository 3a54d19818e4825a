import numpy as np
import pytest

from utils.render25d import (
    ZENITH,
    bicubic_upsample,
    build_heightfield_mesh,
    compose_preview,
    export_mesh,
    hillshade_render,
    register_upsampler,
    subdivide_dem,
    surface_figure,
    upscale_texture,
)
from utils.tiles import TerrainTile, TextureTile


def _keys_kernel(x: float, a: float = -0.75) -> float:
    x = abs(x)
    if x <= 1:
        return (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1
    if x < 2:
        return a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a
    return 0.0


def _naive_bicubic_1d(values: np.ndarray, factor: int) -> np.ndarray:
    n = len(values)
    out = np.zeros(n * factor)
    for o in range(n * factor):
        src = (o + 0.5) / factor - 0.5
        base = int(np.floor(src))
        t = src - base
        for k in range(-1, 3):
            idx = min(max(base + k, 0), n - 1)
            out[o] += values[idx] * _keys_kernel(t - k)
    return out


def _ramp(h: int = 8, w: int = 8, west_high: bool = True) -> TerrainTile:
    cols = np.linspace(1.0, 0.0, w) if west_high else np.linspace(0.0, 1.0, w)
    return TerrainTile(np.tile(cols, (h, 1)))


def test_subdivide_two_by_two_ramp():
    out = subdivide_dem(TerrainTile(np.array([[0.0, 1.0], [0.0, 1.0]])), 2)
    assert out.shape == (4, 4)
    assert np.allclose(out.elevation[0], [0.0, 0.5, 1.0, 1.0])
    assert np.allclose(out.elevation[:, 1], 0.5)


def test_subdivide_preserves_lattice_points():
    dem = TerrainTile(np.random.default_rng(0).random((8, 8)))
    for factor in (2, 4, 8):
        out = subdivide_dem(dem, factor)
        assert np.array_equal(out.elevation[::factor, ::factor], dem.elevation)


def test_subdivide_constant_and_bilinear_tiles():
    assert np.all(subdivide_dem(TerrainTile(np.full((4, 4), 0.3)), 4).elevation == 0.3)

    i, j = np.meshgrid(np.arange(5), np.arange(5), indexing="ij")
    dem = TerrainTile((0.05 * i + 0.1 * j + 0.01 * i * j) / 1.0)
    out = subdivide_dem(dem, 2)
    fi, fj = np.meshgrid(np.arange(9) / 2, np.arange(9) / 2, indexing="ij")
    assert np.allclose(out.elevation[:9, :9], 0.05 * fi + 0.1 * fj + 0.01 * fi * fj, atol=1e-12)


def test_subdivide_constant_tile_is_exact_at_every_factor():
    for value in (0.3, 0.1, 0.7, 1.0 / 3.0):
        dem = TerrainTile(np.full((5, 7), value))
        for factor in (2, 4, 8):
            out = subdivide_dem(dem, factor)
            assert np.all(out.elevation == value)
            assert np.all(subdivide_dem(out, 2).elevation == value)


def test_subdivide_rejects_bad_factor():
    with pytest.raises(ValueError):
        subdivide_dem(TerrainTile(np.zeros((2, 2))), 3)


def test_bicubic_constant_and_shape():
    constant = TextureTile(np.full((32, 32, 3), 0.4))
    out = upscale_texture(constant, 4)
    assert out.shape == (128, 128, 3)
    assert np.allclose(out.rgb, 0.4, atol=1e-12)


def test_bicubic_matches_separable_oracle():
    rgb = np.random.default_rng(1).random((6, 5, 3))
    out = bicubic_upsample(rgb, 2)
    expected = np.zeros((12, 10, 3))
    for c in range(3):
        rows = np.stack([_naive_bicubic_1d(rgb[:, j, c], 2) for j in range(5)], axis=1)
        expected[..., c] = np.stack([_naive_bicubic_1d(rows[i], 2) for i in range(12)])
    assert np.abs(out - expected).max() < 1e-6


def test_failing_upsampler_falls_back_to_bicubic(caplog):
    def broken(rgb, factor):
        raise RuntimeError("no weights")

    register_upsampler("broken", broken)
    texture = TextureTile(np.random.default_rng(2).random((8, 8, 3)))
    out = upscale_texture(texture, 2, "broken")
    assert np.allclose(out.rgb, upscale_texture(texture, 2).rgb)
    assert "falling back to bicubic" in caplog.text

    wrong_shape = upscale_texture(texture, 2, lambda rgb, f: rgb)
    assert wrong_shape.shape == (16, 16, 3)


def test_plugin_upsampler_is_used():
    texture = TextureTile(np.random.default_rng(3).random((4, 4, 3)))
    nearest = upscale_texture(texture, 2, lambda rgb, f: rgb.repeat(f, axis=0).repeat(f, axis=1))
    assert np.array_equal(nearest.rgb[::2, ::2], texture.rgb)


def test_flat_zenith_hillshade_is_identity():
    texture = TextureTile(np.random.default_rng(4).random((16, 16, 3)))
    image = hillshade_render(TerrainTile(np.full((16, 16), 0.5)), texture, light_dir=ZENITH)
    assert np.abs(image.astype(int) - texture.to_uint8().astype(int)).max() <= 1


def test_flat_grazing_light_darkens_uniformly():
    texture = TextureTile(np.full((8, 8, 3), 0.8))
    image = hillshade_render(TerrainTile(np.zeros((8, 8))), texture, light_dir=(1.0, 0.0, 0.2))
    assert len(np.unique(image)) == 1
    expected = 0.8 * 0.2 / np.hypot(1.0, 0.2)
    assert abs(int(image[0, 0, 0]) - round(expected * 255)) <= 1


def test_east_facing_slope_is_brighter_from_the_east():
    texture = TextureTile(np.full((8, 8, 3), 0.9))
    east = hillshade_render(_ramp(), texture, light_dir=(1.0, 0.0, 1.0), z_scale=4.0)
    west = hillshade_render(_ramp(), texture, light_dir=(-1.0, 0.0, 1.0), z_scale=4.0)
    assert east.mean() > west.mean()


def test_hillshade_rejects_zero_light_and_grid_mismatch():
    texture = TextureTile(np.zeros((4, 4, 3)))
    with pytest.raises(ValueError):
        hillshade_render(TerrainTile(np.zeros((4, 4))), texture, light_dir=(0.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        hillshade_render(TerrainTile(np.zeros((8, 8))), texture)


def test_mesh_counts_and_uv_range():
    tiny = build_heightfield_mesh(TerrainTile(np.array([[0.0, 1.0], [0.5, 0.2]])))
    assert (tiny.n_vertices, tiny.n_faces) == (4, 2)

    mesh = build_heightfield_mesh(TerrainTile(np.random.default_rng(5).random((7, 9))), z_scale=3.0)
    assert mesh.n_vertices == 63
    assert mesh.n_faces == 2 * 6 * 8
    assert mesh.uv.min() >= 0.0 and mesh.uv.max() <= 1.0


def test_mesh_has_no_degenerate_triangles():
    mesh = build_heightfield_mesh(TerrainTile(np.random.default_rng(6).random((5, 5))))
    v = mesh.vertices[mesh.faces]
    areas = np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
    assert areas.min() > 0


def test_mesh_topology_depends_only_on_grid_size():
    a = build_heightfield_mesh(TerrainTile(np.zeros((4, 6))))
    b = build_heightfield_mesh(TerrainTile(np.random.default_rng(7).random((4, 6))), z_scale=11.0)
    assert np.array_equal(a.faces, b.faces)


def test_export_mesh_round_trips_elevations(tmp_path):
    dem = TerrainTile(np.random.default_rng(8).random((4, 5)))
    texture = TextureTile(np.random.default_rng(9).random((4, 5, 3)))
    files = export_mesh(dem, texture, 6.0, tmp_path / "terrain.obj")
    assert all(p.exists() for p in files.values())

    lines = files["obj"].read_text(encoding="utf-8").splitlines()
    vertices = np.array([[float(x) for x in line.split()[1:]] for line in lines if line.startswith("v ")])
    faces = [line for line in lines if line.startswith("f ")]
    uvs = [line for line in lines if line.startswith("vt ")]
    assert len(vertices) == 20 and len(faces) == 24 and len(uvs) == 20
    assert np.array_equal(vertices[:, 2], (dem.elevation * 6.0).ravel())
    assert f"map_Kd {files['texture'].name}" in files["mtl"].read_text(encoding="utf-8")


def test_compose_preview_shapes():
    dem = TerrainTile(np.random.default_rng(10).random((8, 8)))
    texture = TextureTile(np.random.default_rng(11).random((8, 8, 3)))
    preview = compose_preview(dem, texture, factor=2)
    assert preview.image.shape == (16, 16, 3)
    assert preview.image.dtype == np.uint8
    assert preview.dem.shape == (16, 16)


def test_surface_figure_has_one_mesh():
    dem = TerrainTile(np.random.default_rng(12).random((6, 6)))
    texture = TextureTile(np.random.default_rng(13).random((12, 12, 3)))
    fig = surface_figure(dem, texture, title="test tile")
    assert len(fig.data) == 1
    assert len(fig.data[0].x) == 36
    assert len(fig.data[0].vertexcolor) == 36
