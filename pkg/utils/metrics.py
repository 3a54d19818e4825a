"""
Evaluation metrics: MSE, distance correlation and ΔdCor, Fréchet distance,
and the perceptual-distance plug-in interface
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
from matplotlib import colors as mcolors
from scipy import linalg
from scipy.spatial.distance import cdist

from utils.tiles import TerrainTile, TextureTile

logger = logging.getLogger(__name__)

DCOR_GT = 0.3816
DCOR_MAX_PIXELS = 1024
FID_KEY = "fid(desk)"

ImageLike = Union[TextureTile, np.ndarray]


class DegenerateSampleError(ValueError):
    """Zero distance variance: a constant sample"""


class PerceptualModel(Protocol):
    def distance(self, image_a: np.ndarray, image_b: np.ndarray) -> float:
        ...


@dataclass
class MetricsConfig:
    dcor_gt: float = DCOR_GT
    feature_extractor: str = "desk"
    perceptual_model: str = "none"
    dcor_max_pixels: int = DCOR_MAX_PIXELS
    dcor_seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.dcor_gt < 1.0:
            raise ValueError(f"dcor_gt must lie in (0,1), got {self.dcor_gt}")


@dataclass
class MetricsReport:
    mse: float
    dcor: float
    delta_dcor: float
    fid: Optional[float] = None
    lpips: Optional[float] = None
    n_tiles: int = 0
    dcor_gt: float = DCOR_GT
    errors: List[str] = field(default_factory=list)

    def __post_init__(self):
        for name in ("mse", "dcor", "delta_dcor", "fid", "lpips"):
            value = getattr(self, name)
            if value is not None and not np.isfinite(value):
                raise ValueError(f"Metric '{name}' is not finite: {value}")

    def to_dict(self, config: Optional[MetricsConfig] = None) -> dict:
        data = {
            "mse": self.mse,
            "dcor": self.dcor,
            "delta_dcor": self.delta_dcor,
            FID_KEY: self.fid,
            "lpips": self.lpips,
            "n_tiles": self.n_tiles,
            "dcor_gt": self.dcor_gt,
            "errors": list(self.errors),
        }
        if config is not None:
            data["config"] = {
                "dcor_gt": config.dcor_gt,
                "feature_extractor": config.feature_extractor,
                "perceptual_model": config.perceptual_model,
                "dcor_max_pixels": config.dcor_max_pixels,
                "dcor_seed": config.dcor_seed,
            }
        return data

    def to_json(self, config: Optional[MetricsConfig] = None) -> str:
        return json.dumps(self.to_dict(config), indent=2, sort_keys=True)


def _rgb_array(image: ImageLike) -> np.ndarray:
    return image.rgb if isinstance(image, TextureTile) else np.asarray(image, dtype=np.float64)


def rgb_to_hsv(image: ImageLike) -> np.ndarray:
    """
    RGB -> HSV with hue scaled to [0,1]

    Args:
        image: TextureTile or H×W×3 array in [0,1]

    Returns:
        np.ndarray: H×W×3 HSV grid
    """
    rgb = _rgb_array(image)
    if rgb.min() < 0.0 or rgb.max() > 1.0:
        logger.warning(f"RGB input outside [0,1] (range [{rgb.min():.4f}, {rgb.max():.4f}]), clamping")
        rgb = np.clip(rgb, 0.0, 1.0)
    return mcolors.rgb_to_hsv(rgb)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    """Inverse of rgb_to_hsv"""
    return mcolors.hsv_to_rgb(np.clip(np.asarray(hsv, dtype=np.float64), 0.0, 1.0))


def _as_samples(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError(f"Samples must be n×p, got shape {x.shape}")
    return x


def _double_center(d: np.ndarray) -> np.ndarray:
    return d - d.mean(axis=0)[None, :] - d.mean(axis=1)[:, None] + d.mean()


def distance_correlation(X, Y) -> float:
    """
    Distance correlation (V-statistic, double-centred distance matrices)

    Args:
        X: n×p samples
        Y: n×q samples

    Returns:
        float: dCor in [0,1]
    """
    X = _as_samples(X)
    Y = _as_samples(Y)
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"Sample counts differ: {X.shape[0]} vs {Y.shape[0]}")
    if X.shape[0] < 2:
        raise ValueError("Distance correlation needs at least 2 samples")

    A = _double_center(cdist(X, X))
    B = _double_center(cdist(Y, Y))
    dcov2 = np.mean(A * B)
    dvar_x = np.mean(A * A)
    dvar_y = np.mean(B * B)
    if dvar_x <= 0.0 or dvar_y <= 0.0:
        raise DegenerateSampleError("degenerate sample: X or Y is constant across samples")

    dcor2 = dcov2 / np.sqrt(dvar_x * dvar_y)
    return float(np.sqrt(max(dcor2, 0.0)))


def dcor_image_pair(
    texture: ImageLike,
    dem: Union[TerrainTile, np.ndarray],
    max_pixels: int = DCOR_MAX_PIXELS,
    seed: int = 0,
    drop_constant_channels: bool = False,
) -> float:
    """
    dCor between per-pixel HSV vectors of a texture and the DEM elevations

    Args:
        texture: H×W×3 texture
        dem: H×W elevation grid
        max_pixels (int): Seeded subsample cap on the number of pixels
        seed (int): Subsample seed
        drop_constant_channels (bool): Exclude HSV channels constant over the tile

    Returns:
        float: dCor of the tile
    """
    hsv = rgb_to_hsv(texture)
    elevation = dem.elevation if isinstance(dem, TerrainTile) else np.asarray(dem, dtype=np.float64)
    if hsv.shape[:2] != elevation.shape:
        raise ValueError(f"Texture {hsv.shape[:2]} and DEM {elevation.shape} grids differ")

    X = hsv.reshape(-1, 3)
    Y = elevation.reshape(-1, 1)
    if X.shape[0] > max_pixels:
        idx = np.sort(np.random.default_rng(seed).choice(X.shape[0], size=max_pixels, replace=False))
        X, Y = X[idx], Y[idx]
    if drop_constant_channels:
        keep = np.ptp(X, axis=0) > 0
        if not keep.any():
            raise DegenerateSampleError("degenerate sample: texture is constant")
        X = X[:, keep]
    return distance_correlation(X, Y)


def mean_dcor(
    pairs: Sequence[Tuple[ImageLike, Union[TerrainTile, np.ndarray]]],
    cfg: Optional[MetricsConfig] = None,
) -> Tuple[float, int]:
    """
    Mean per-pair dCor, skipping degenerate pairs

    Returns:
        Tuple[float, int]: (mean dCor, number of pairs used)
    """
    cfg = cfg or MetricsConfig()
    if not pairs:
        raise ValueError("No (texture, DEM) pairs given")

    values = []
    for i, (texture, dem) in enumerate(pairs):
        try:
            values.append(dcor_image_pair(texture, dem, max_pixels=cfg.dcor_max_pixels, seed=cfg.dcor_seed))
        except DegenerateSampleError as e:
            logger.warning(f"Skipping pair {i}: {e}")
    if not values:
        raise DegenerateSampleError("degenerate sample: every pair was skipped")
    return float(np.mean(values)), len(values)


def delta_dcor(pairs, cfg: Optional[MetricsConfig] = None) -> float:
    """|mean dCor(HSV(texture), DEM) - dcor_gt|"""
    cfg = cfg or MetricsConfig()
    mean, _ = mean_dcor(pairs, cfg)
    return abs(mean - cfg.dcor_gt)


def dataset_dcor_gt(pairs, cfg: Optional[MetricsConfig] = None) -> float:
    """Measured ground-truth dependence of real (texture, DEM) pairs"""
    return mean_dcor(pairs, cfg)[0]


def mse(a: ImageLike, b: ImageLike) -> float:
    """Mean squared difference over all elements"""
    a = _rgb_array(a)
    b = _rgb_array(b)
    if a.shape != b.shape:
        raise ValueError(f"Shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def _sym_sqrt(m: np.ndarray) -> np.ndarray:
    evals, evecs = linalg.eigh(m)
    evals = np.clip(evals, 0.0, None)
    return (evecs * np.sqrt(evals)) @ evecs.T


def frechet_distance(feats_a, feats_b) -> float:
    """
    Fréchet distance between Gaussian fits of two feature sets

    ‖μa−μb‖² + Tr(Σa + Σb − 2(Σa Σb)^{1/2}); the trace term uses the eigenvalues
    of the symmetric matrix Σa^{1/2} Σb Σa^{1/2}.

    Args:
        feats_a: n×d features
        feats_b: m×d features

    Returns:
        float: Distance >= 0
    """
    a = _as_samples(feats_a)
    b = _as_samples(feats_b)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("Non-finite features")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"Feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("Fréchet distance needs at least 2 samples per set")
    if a.shape[0] <= a.shape[1] or b.shape[0] <= b.shape[1]:
        logger.warning(f"Few samples ({a.shape[0]}, {b.shape[0]}) for feature width {a.shape[1]}; covariance is rank-deficient")

    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    sigma_a = np.atleast_2d(np.cov(a, rowvar=False))
    sigma_b = np.atleast_2d(np.cov(b, rowvar=False))
    sigma_a = (sigma_a + sigma_a.T) / 2
    sigma_b = (sigma_b + sigma_b.T) / 2

    root_a = _sym_sqrt(sigma_a)
    middle = root_a @ sigma_b @ root_a
    evals = linalg.eigh((middle + middle.T) / 2, eigvals_only=True)
    if evals.min() < -1e-8:
        logger.warning(f"Covariance product has negative eigenvalue {evals.min():.3e}, clipping")
    tr_covmean = np.sum(np.sqrt(np.clip(evals, 0.0, None)))

    diff = mu_a - mu_b
    fd = diff @ diff + np.trace(sigma_a) + np.trace(sigma_b) - 2.0 * tr_covmean
    return float(max(fd, 0.0))


def relative_reduction(value: float, baseline: float) -> float:
    """Fractional improvement of a lower-is-better metric over a baseline"""
    if baseline == 0:
        raise ValueError("Baseline is zero")
    return (baseline - value) / baseline


def gap_closure(variant_delta: float, baseline_delta: float) -> float:
    """Share of the baseline's ΔdCor gap closed by a variant"""
    return relative_reduction(variant_delta, baseline_delta)


# Plug-in registries

_FEATURE_EXTRACTORS: Dict[str, Callable[[], Callable[[Sequence[ImageLike]], np.ndarray]]] = {}
_PERCEPTUAL_MODELS: Dict[str, Callable[[], PerceptualModel]] = {}


def register_feature_extractor(name: str, factory: Callable[[], Callable[[Sequence[ImageLike]], np.ndarray]]):
    _FEATURE_EXTRACTORS[name] = factory


def get_feature_extractor(name: str) -> Callable[[Sequence[ImageLike]], np.ndarray]:
    if name not in _FEATURE_EXTRACTORS:
        raise ValueError(f"Unknown feature extractor '{name}', registered: {sorted(_FEATURE_EXTRACTORS)}")
    return _FEATURE_EXTRACTORS[name]()


def register_perceptual_model(name: str, factory: Callable[[], PerceptualModel]):
    if name == "none":
        raise ValueError("'none' is reserved")
    _PERCEPTUAL_MODELS[name] = factory


def get_perceptual_model(name: str) -> Optional[PerceptualModel]:
    if name == "none":
        return None
    if name not in _PERCEPTUAL_MODELS:
        raise ValueError(f"Unknown perceptual model '{name}', registered: {sorted(_PERCEPTUAL_MODELS)}")
    return _PERCEPTUAL_MODELS[name]()


def _desk_feature_extractor() -> Callable[[Sequence[ImageLike]], np.ndarray]:
    """Frozen tiny-seeded encoder trunk applied to RGB textures"""
    import torch

    from models.dem_encoder import build_seeded_encoder

    encoder = build_seeded_encoder("tiny-seeded")

    def extract(images: Sequence[ImageLike]) -> np.ndarray:
        arr = np.stack([_rgb_array(img) for img in images]).transpose(0, 3, 1, 2)
        rgb = torch.from_numpy(np.ascontiguousarray(np.clip(arr, 0.0, 1.0))).float()
        return encoder.pooled_features(rgb).double().numpy()

    return extract


register_feature_extractor("desk", _desk_feature_extractor)


def compute_report(
    generated: Sequence[Optional[TextureTile]],
    references: Sequence[TextureTile],
    dems: Sequence[TerrainTile],
    cfg: Optional[MetricsConfig] = None,
    errors: Optional[List[str]] = None,
) -> MetricsReport:
    """
    Metrics for a generated set against its reference textures and DEMs

    Tiles whose generation failed are passed as None and recorded as errors;
    per-tile metric failures are recorded too. Fails only if no tile survives.

    Returns:
        MetricsReport: Aggregated metrics
    """
    cfg = cfg or MetricsConfig()
    errors = list(errors or [])
    if not (len(generated) == len(references) == len(dems)):
        raise ValueError("generated, references and dems must have equal lengths")

    mses, dcors, kept = [], [], []
    for i, (gen, ref, dem) in enumerate(zip(generated, references, dems)):
        if gen is None:
            continue
        try:
            tile_mse = mse(gen, ref)
            tile_dcor = dcor_image_pair(gen, dem, max_pixels=cfg.dcor_max_pixels, seed=cfg.dcor_seed)
        except (ValueError, FloatingPointError) as e:
            errors.append(f"tile {i}: {e}")
            logger.warning(f"Metrics failed for tile {i}: {e}")
            continue
        mses.append(tile_mse)
        dcors.append(tile_dcor)
        kept.append(i)

    if not kept:
        raise ValueError(f"All {len(generated)} tiles failed evaluation: {errors[:3]}")

    mean_dcor_value = float(np.mean(dcors))
    fid = None
    try:
        extractor = get_feature_extractor(cfg.feature_extractor)
        fid = frechet_distance(extractor([references[i] for i in kept]), extractor([generated[i] for i in kept]))
    except ValueError as e:
        errors.append(f"fid: {e}")
        logger.warning(f"FID skipped: {e}")

    lpips = None
    perceptual = get_perceptual_model(cfg.perceptual_model)
    if perceptual is not None:
        distances = [perceptual.distance(_rgb_array(generated[i]), _rgb_array(references[i])) for i in kept]
        lpips = float(np.mean(distances))

    return MetricsReport(
        mse=float(np.mean(mses)),
        dcor=mean_dcor_value,
        delta_dcor=abs(mean_dcor_value - cfg.dcor_gt),
        fid=fid,
        lpips=lpips,
        n_tiles=len(kept),
        dcor_gt=cfg.dcor_gt,
        errors=errors,
    )
