"""
Tile containers shared by the data pipeline, metrics and renderer
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

BASE_TILE_SIZE = 32


@dataclass
class TerrainTile:
    """Normalized single-channel elevation grid (the conditioning DEM)"""

    elevation: np.ndarray
    meta: Optional[Tuple[float, float]] = None
    normalization: dict = field(default_factory=lambda: {"mode": "per_tile_minmax"})

    def __post_init__(self):
        self.elevation = np.asarray(self.elevation, dtype=np.float64)
        if self.elevation.ndim != 2:
            raise ValueError(f"DEM must be a 2D grid, got shape {self.elevation.shape}")
        if not np.all(np.isfinite(self.elevation)):
            raise ValueError("DEM contains non-finite values")
        if self.elevation.min() < 0.0 or self.elevation.max() > 1.0:
            raise ValueError(
                f"DEM values must lie in [0,1], got [{self.elevation.min():.4f}, {self.elevation.max():.4f}]"
            )

    @property
    def shape(self) -> Tuple[int, int]:
        return self.elevation.shape

    def denormalize(self) -> np.ndarray:
        """
        Map the normalized grid back to elevation units

        Returns:
            np.ndarray: Elevation grid in the units of the raw input
        """
        if self.meta is None:
            raise ValueError("DEM has no (min_elev_m, max_elev_m) meta to de-normalize with")

        mode = self.normalization.get("mode", "per_tile_minmax")
        if mode == "global_affine":
            a, b = self.normalization["a"], self.normalization["b"]
            return (self.elevation - b) / a

        lo, hi = self.meta
        if hi == lo:
            return np.full_like(self.elevation, lo)
        return self.elevation * (hi - lo) + lo


@dataclass
class TextureTile:
    """H×W×3 colour grid in [0,1] (the generation target)"""

    rgb: np.ndarray

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if self.rgb.ndim != 3 or self.rgb.shape[-1] != 3:
            raise ValueError(f"Texture must be H×W×3, got shape {self.rgb.shape}")
        if not np.all(np.isfinite(self.rgb)):
            raise ValueError("Texture contains non-finite values")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.rgb.shape

    def to_uint8(self) -> np.ndarray:
        return np.round(np.clip(self.rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
