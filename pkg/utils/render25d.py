"""
2.5D terrain preview: DEM subdivision, texture upscaling, hillshaded orthographic
render, heightfield mesh export and an interactive plotly surface
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Union

import numpy as np
import plotly.graph_objects as go
import torch
import torch.nn.functional as F
from PIL import Image

from utils.tiles import TerrainTile, TextureTile

logger = logging.getLogger(__name__)

SUBDIVISION_FACTORS = (2, 4, 8)
DEFAULT_Z_SCALE = 8.0
DEFAULT_LIGHT = (-1.0, -1.0, 1.414)
ZENITH = (0.0, 0.0, 1.0)

Upsampler = Callable[[np.ndarray, int], np.ndarray]

_UPSAMPLERS: Dict[str, Upsampler] = {}


def subdivide_dem(dem: TerrainTile, factor: int) -> TerrainTile:
    """
    Bilinear subdivision to (factor·H)×(factor·W)

    Output pixel (i, j) samples the input at (i/factor, j/factor), so
    out[i·f, j·f] equals in[i, j] exactly; samples past the last row/column clamp.

    Args:
        dem (TerrainTile): Input tile
        factor (int): 2, 4 or 8

    Returns:
        TerrainTile: Subdivided tile (meta and normalization kept)
    """
    if factor not in SUBDIVISION_FACTORS:
        raise ValueError(f"Subdivision factor must be one of {SUBDIVISION_FACTORS}, got {factor}")
    out = _lerp_axis(_lerp_axis(dem.elevation, factor, axis=0), factor, axis=1)
    return TerrainTile(np.clip(out, 0.0, 1.0), meta=dem.meta, normalization=dict(dem.normalization))


def _lerp_axis(values: np.ndarray, factor: int, axis: int) -> np.ndarray:
    # a + w·(b − a) keeps constant runs and lattice samples bit-exact
    n = values.shape[axis]
    idx = np.arange(n * factor)
    lo = idx // factor
    hi = np.minimum(lo + 1, n - 1)
    frac = (idx % factor) / factor
    a = np.take(values, lo, axis=axis)
    b = np.take(values, hi, axis=axis)
    weight = frac[:, None] if axis == 0 else frac[None, :]
    return a + weight * (b - a)


def bicubic_upsample(rgb: np.ndarray, factor: int) -> np.ndarray:
    """Bicubic (a = −0.75, half-pixel centres) upsampling of an H×W×3 array"""
    x = torch.from_numpy(np.ascontiguousarray(rgb.transpose(2, 0, 1)[None])).double()
    y = F.interpolate(x, scale_factor=factor, mode="bicubic", align_corners=False)
    return y[0].numpy().transpose(1, 2, 0)


def register_upsampler(name: str, fn: Upsampler):
    """Register a super-resolution plug-in: fn(rgb H×W×3, factor) -> (f·H)×(f·W)×3"""
    if name == "bicubic":
        raise ValueError("'bicubic' is the built-in upsampler")
    _UPSAMPLERS[name] = fn


def upscale_texture(
    texture: TextureTile,
    factor: int,
    upsampler: Union[str, Upsampler] = "bicubic",
) -> TextureTile:
    """
    Upscale a texture by an integer factor

    Args:
        texture (TextureTile): Input texture
        factor (int): Scale factor
        upsampler: 'bicubic', a registered plug-in name or a callable

    Returns:
        TextureTile: (factor·H)×(factor·W)×3 texture clamped to [0,1]
    """
    if int(factor) < 1:
        raise ValueError(f"Upscale factor must be >= 1, got {factor}")
    h, w, _ = texture.shape
    expected = (h * factor, w * factor, 3)

    if upsampler != "bicubic":
        fn = _UPSAMPLERS.get(upsampler) if isinstance(upsampler, str) else upsampler
        try:
            if fn is None:
                raise KeyError(f"no upsampler registered as '{upsampler}'")
            out = np.asarray(fn(texture.rgb, factor), dtype=np.float64)
            if out.shape != expected:
                raise ValueError(f"plug-in returned shape {out.shape}, expected {expected}")
            if not np.all(np.isfinite(out)):
                raise ValueError("plug-in returned non-finite values")
            return TextureTile(np.clip(out, 0.0, 1.0))
        except Exception as e:
            logger.warning(f"Upsampler '{upsampler}' failed ({e}), falling back to bicubic")

    return TextureTile(np.clip(bicubic_upsample(texture.rgb, factor), 0.0, 1.0))


def surface_normals(elevation: np.ndarray, z_scale: float) -> np.ndarray:
    """Unit normals (x = column, y = row, z = up) from central differences"""
    gy, gx = np.gradient(np.asarray(elevation, dtype=np.float64) * z_scale)
    normals = np.stack([-gx, -gy, np.ones_like(gx)], axis=-1)
    return normals / np.linalg.norm(normals, axis=-1, keepdims=True)


def hillshade_render(
    dem: TerrainTile,
    texture: TextureTile,
    light_dir: Sequence[float] = DEFAULT_LIGHT,
    z_scale: float = DEFAULT_Z_SCALE,
) -> np.ndarray:
    """
    Lambertian hillshade multiplied onto the texture

    Args:
        dem (TerrainTile): Heightfield on the texture grid
        texture (TextureTile): Texture to shade
        light_dir: Light direction (towards the light), need not be unit length
        z_scale (float): Vertical exaggeration in pixel units

    Returns:
        np.ndarray: H×W×3 uint8 image
    """
    light = np.asarray(light_dir, dtype=np.float64)
    if light.shape != (3,) or not np.any(light):
        raise ValueError(f"light_dir must be a non-zero 3-vector, got {light_dir}")
    if texture.shape[:2] != dem.shape:
        raise ValueError(f"Texture grid {texture.shape[:2]} differs from DEM grid {dem.shape}")
    light = light / np.linalg.norm(light)

    shade = np.clip(surface_normals(dem.elevation, z_scale) @ light, 0.0, 1.0)
    shaded = TextureTile(np.clip(texture.rgb * shade[..., None], 0.0, 1.0))
    return shaded.to_uint8()


@dataclass
class HeightfieldMesh:
    vertices: np.ndarray
    faces: np.ndarray
    uv: np.ndarray
    grid_shape: tuple

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)


def grid_faces(h: int, w: int) -> np.ndarray:
    """Two triangles per grid quad, 0-based vertex indices"""
    ii, jj = np.meshgrid(np.arange(h - 1), np.arange(w - 1), indexing="ij")
    v00 = (ii * w + jj).ravel()
    v01 = v00 + 1
    v10 = v00 + w
    v11 = v10 + 1
    upper = np.stack([v00, v10, v11], axis=1)
    lower = np.stack([v00, v11, v01], axis=1)
    return np.stack([upper, lower], axis=1).reshape(-1, 3)


def build_heightfield_mesh(dem: TerrainTile, z_scale: float = DEFAULT_Z_SCALE) -> HeightfieldMesh:
    """
    Heightfield mesh: one vertex per pixel at (column, flipped row, elevation·z_scale)

    Returns:
        HeightfieldMesh: H·W vertices, 2(H−1)(W−1) faces, uv in [0,1]²
    """
    h, w = dem.shape
    if h < 2 or w < 2:
        raise ValueError(f"Mesh needs a grid of at least 2×2, got {h}×{w}")
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    vertices = np.stack([jj.ravel().astype(np.float64),
                         (h - 1 - ii).ravel().astype(np.float64),
                         (dem.elevation * z_scale).ravel()], axis=1)
    uv = np.stack([jj.ravel() / (w - 1), 1.0 - ii.ravel() / (h - 1)], axis=1)
    return HeightfieldMesh(vertices=vertices, faces=grid_faces(h, w), uv=uv, grid_shape=(h, w))


def export_mesh(
    dem: TerrainTile,
    texture: TextureTile,
    z_scale: float,
    path: Union[str, Path],
) -> Dict[str, Path]:
    """
    Write a Wavefront OBJ with UVs, its MTL material and the texture PNG

    Args:
        dem (TerrainTile): Heightfield
        texture (TextureTile): Draped texture (any resolution)
        z_scale (float): Vertical scale
        path: Target .obj path

    Returns:
        dict: {'obj', 'mtl', 'texture'} written paths
    """
    path = Path(path)
    if path.suffix.lower() != ".obj":
        path = path.with_suffix(".obj")
    path.parent.mkdir(parents=True, exist_ok=True)
    mtl_path = path.with_suffix(".mtl")
    tex_path = path.with_name(f"{path.stem}_texture.png")
    material = path.stem

    mesh = build_heightfield_mesh(dem, z_scale)
    lines = [f"mtllib {mtl_path.name}", f"o {material}"]
    lines += [f"v {repr(float(x))} {repr(float(y))} {repr(float(z))}" for x, y, z in mesh.vertices]
    lines += [f"vt {repr(float(u))} {repr(float(v))}" for u, v in mesh.uv]
    lines.append(f"usemtl {material}")
    lines += [f"f {a + 1}/{a + 1} {b + 1}/{b + 1} {c + 1}/{c + 1}" for a, b, c in mesh.faces]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    mtl_path.write_text(
        "\n".join([
            f"newmtl {material}",
            "Ka 1.000 1.000 1.000",
            "Kd 1.000 1.000 1.000",
            "Ks 0.000 0.000 0.000",
            "illum 1",
            f"map_Kd {tex_path.name}",
        ]) + "\n",
        encoding="utf-8",
    )
    Image.fromarray(texture.to_uint8()).save(tex_path, format="PNG")
    logger.info(f"Mesh exported: {path} ({mesh.n_vertices} vertices, {mesh.n_faces} faces)")
    return {"obj": path, "mtl": mtl_path, "texture": tex_path}


@dataclass
class Preview:
    dem: TerrainTile
    texture: TextureTile
    image: np.ndarray


def compose_preview(
    dem: TerrainTile,
    texture: TextureTile,
    factor: int = 4,
    upsampler: Union[str, Upsampler] = "bicubic",
    light_dir: Sequence[float] = DEFAULT_LIGHT,
    z_scale: float = DEFAULT_Z_SCALE,
) -> Preview:
    """
    Subdivide the DEM, upscale the texture and hillshade the result

    z_scale refers to the input grid; it is multiplied by the factor so slopes
    keep their steepness on the finer grid.
    """
    if texture.shape[:2] != dem.shape:
        raise ValueError(f"Texture grid {texture.shape[:2]} differs from DEM grid {dem.shape}")
    fine_dem = subdivide_dem(dem, factor)
    fine_texture = upscale_texture(texture, factor, upsampler)
    image = hillshade_render(fine_dem, fine_texture, light_dir=light_dir, z_scale=z_scale * factor)
    return Preview(dem=fine_dem, texture=fine_texture, image=image)


def write_preview_png(path: Union[str, Path], image: np.ndarray) -> Path:
    path = Path(path)
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path, format="PNG")
    return path


def surface_figure(
    dem: TerrainTile,
    texture: TextureTile,
    z_scale: float = DEFAULT_Z_SCALE,
    title: Optional[str] = None,
) -> go.Figure:
    """Interactive Mesh3d of the heightfield with per-vertex texture colours"""
    mesh = build_heightfield_mesh(dem, z_scale)
    h, w = dem.shape
    th, tw = texture.shape[:2]
    rows = np.arange(h) * th // h
    cols = np.arange(w) * tw // w
    colors = texture.to_uint8()[np.ix_(rows, cols)].reshape(-1, 3)

    fig = go.Figure(data=[go.Mesh3d(
        x=mesh.vertices[:, 0],
        y=mesh.vertices[:, 1],
        z=mesh.vertices[:, 2],
        i=mesh.faces[:, 0],
        j=mesh.faces[:, 1],
        k=mesh.faces[:, 2],
        vertexcolor=[f"rgb({r},{g},{b})" for r, g, b in colors],
        flatshading=False,
        hoverinfo="skip",
    )])
    fig.update_layout(
        title=title or "2.5D terrain preview",
        scene=dict(aspectmode="data", xaxis_visible=False, yaxis_visible=False, zaxis_visible=False),
        margin=dict(l=0, r=0, t=40, b=0),
        height=500,
    )
    return fig
