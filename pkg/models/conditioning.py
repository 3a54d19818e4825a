"""
Conditioning bundle passed to the velocity model, plus tile <-> tensor helpers
"""

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import torch

from models.dem_encoder import FeaturePyramid, dem_batch
from models.text_conditioning import TextEmbedding, null_embedding, stack_embeddings
from utils.tiles import TerrainTile, TextureTile


@dataclass
class Conditioning:
    """Text tokens (B×L×D + padding mask) and the DEM pathway (pyramid and/or raw DEM)"""

    text: torch.Tensor
    text_mask: Optional[torch.Tensor] = None
    pyramid: Optional[FeaturePyramid] = None
    dem: Optional[torch.Tensor] = None

    @property
    def batch_size(self) -> int:
        return self.text.shape[0]

    def to(self, device: Optional[torch.device] = None, dtype: Optional[torch.dtype] = None) -> "Conditioning":
        return Conditioning(
            text=self.text.to(device=device, dtype=dtype),
            text_mask=self.text_mask.to(device=device) if self.text_mask is not None else None,
            pyramid=self.pyramid.to(device=device, dtype=dtype) if self.pyramid is not None else None,
            dem=self.dem.to(device=device, dtype=dtype) if self.dem is not None else None,
        )

    def select(self, index) -> "Conditioning":
        return Conditioning(
            text=self.text[index],
            text_mask=self.text_mask[index] if self.text_mask is not None else None,
            pyramid=self.pyramid.select(index) if self.pyramid is not None else None,
            dem=self.dem[index] if self.dem is not None else None,
        )

    def unconditional(self) -> "Conditioning":
        """Same DEM pathway, text replaced by the null embedding at the same sequence length"""
        batch, length, dim = self.text.shape
        tokens, mask = stack_embeddings([null_embedding(dim, length)] * batch)
        return replace(self, text=tokens.to(device=self.text.device, dtype=self.text.dtype),
                       text_mask=mask.to(self.text.device))


def build_conditioning(
    embeddings: Sequence[TextEmbedding],
    pyramid: Optional[FeaturePyramid] = None,
    dem: Optional[torch.Tensor] = None,
    dtype: torch.dtype = torch.float32,
) -> Conditioning:
    tokens, mask = stack_embeddings(embeddings)
    return Conditioning(
        text=tokens.to(dtype),
        text_mask=mask,
        pyramid=pyramid.to(dtype) if pyramid is not None else None,
        dem=dem.to(dtype) if dem is not None else None,
    )


def to_model_range(x: torch.Tensor) -> torch.Tensor:
    """[0,1] storage range -> [-1,1] model range"""
    return x * 2.0 - 1.0


def to_unit_range(x: torch.Tensor) -> torch.Tensor:
    """[-1,1] model range -> [0,1] storage range"""
    return (x + 1.0) / 2.0


def texture_to_tensor(textures: Sequence[TextureTile], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Stack H×W×3 tiles into a B×3×H×W tensor in [0,1]"""
    arr = np.stack([t.rgb for t in textures]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def tensor_to_texture(x: torch.Tensor) -> list:
    """B×3×H×W tensor in [0,1] -> list of TextureTile"""
    arr = x.detach().cpu().double().numpy().transpose(0, 2, 3, 1)
    return [TextureTile(a) for a in arr]


def dem_to_tensor(dems: Sequence[TerrainTile], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Stack tiles into a B×1×H×W tensor"""
    return dem_batch(dems).to(dtype)
