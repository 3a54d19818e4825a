"""
Frozen VGG-style DEM encoder producing the multi-scale feature pyramid
"""

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from utils.tiles import BASE_TILE_SIZE, TerrainTile

logger = logging.getLogger(__name__)

WEIGHTS_FORMAT = "geodiffussr-encoder"
WEIGHTS_VERSION = 1


class EncoderWeightsError(ValueError):
    """Weight file does not match the preset layer layout"""


@dataclass(frozen=True)
class EncoderPreset:
    name: str
    channels: Tuple[int, int, int]
    convs_per_block: Tuple[int, int, int]
    mean: Tuple[float, float, float]
    std: Tuple[float, float, float]
    seed: int = 0


ENCODER_PRESETS: Dict[str, EncoderPreset] = {
    "vgg16": EncoderPreset(
        name="vgg16",
        channels=(64, 128, 256),
        convs_per_block=(2, 2, 3),
        mean=(0.485, 0.456, 0.406),
        std=(0.229, 0.224, 0.225),
    ),
    "tiny-seeded": EncoderPreset(
        name="tiny-seeded",
        channels=(16, 32, 64),
        convs_per_block=(2, 2, 2),
        mean=(0.5, 0.5, 0.5),
        std=(0.5, 0.5, 0.5),
        seed=0,
    ),
}


@dataclass
class FeaturePyramid:
    """Encoder taps at the three MCA scales, stored NCHW (B×C×h×w)"""

    f32: torch.Tensor
    f16: torch.Tensor
    f8: torch.Tensor

    @property
    def levels(self) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return (self.f32, self.f16, self.f8)

    @property
    def channels(self) -> Tuple[int, int, int]:
        return tuple(level.shape[1] for level in self.levels)

    def to(self, *args, **kwargs) -> "FeaturePyramid":
        return FeaturePyramid(*(level.to(*args, **kwargs) for level in self.levels))

    def select(self, index: Union[int, Sequence[int], torch.Tensor]) -> "FeaturePyramid":
        if isinstance(index, int):
            index = [index]
        return FeaturePyramid(*(level[index] for level in self.levels))

    @staticmethod
    def cat(pyramids: Sequence["FeaturePyramid"]) -> "FeaturePyramid":
        if not pyramids:
            raise ValueError("Cannot concatenate an empty list of pyramids")
        return FeaturePyramid(
            *(torch.cat([p.levels[i] for p in pyramids], dim=0) for i in range(3))
        )


def resolve_preset(preset: Union[str, EncoderPreset]) -> EncoderPreset:
    if isinstance(preset, EncoderPreset):
        return preset
    if preset not in ENCODER_PRESETS:
        raise ValueError(f"Unknown encoder preset '{preset}', expected one of {sorted(ENCODER_PRESETS)}")
    return ENCODER_PRESETS[preset]


class DemEncoder(nn.Module):
    """VGG-style convolution stack tapped before each pooling stage"""

    def __init__(self, preset: Union[str, EncoderPreset] = "tiny-seeded"):
        super().__init__()
        self.preset = resolve_preset(preset)

        blocks = []
        in_ch = 3
        for out_ch, n_convs in zip(self.preset.channels, self.preset.convs_per_block):
            layers: List[nn.Module] = []
            for _ in range(n_convs):
                layers.append(nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1))
                layers.append(nn.ReLU(inplace=False))
                in_ch = out_ch
            blocks.append(nn.Sequential(*layers))
        self.blocks = nn.ModuleList(blocks)

        self.register_buffer("mean", torch.tensor(self.preset.mean).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(self.preset.std).view(1, 3, 1, 1), persistent=False)

    def set_normalization(self, mean: Sequence[float], std: Sequence[float]):
        self.mean.copy_(torch.tensor(mean, dtype=self.mean.dtype).view(1, 3, 1, 1))
        self.std.copy_(torch.tensor(std, dtype=self.std.dtype).view(1, 3, 1, 1))

    def freeze(self) -> "DemEncoder":
        for param in self.parameters():
            param.requires_grad_(False)
        self.eval()
        return self

    def forward(self, rgb: torch.Tensor) -> List[torch.Tensor]:
        """
        Run the stack on a 3-channel image in [0,1]

        Args:
            rgb (torch.Tensor): B×3×H×W input

        Returns:
            List[torch.Tensor]: One tap per block, before pooling
        """
        x = (rgb - self.mean) / self.std
        taps = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            taps.append(x)
            if i < len(self.blocks) - 1:
                x = F.max_pool2d(x, kernel_size=2, stride=2)
        return taps

    def encode(self, dem: torch.Tensor) -> FeaturePyramid:
        """Encode a B×1×32×32 DEM batch in [0,1]"""
        if dem.dim() != 4 or dem.shape[1] != 1:
            raise ValueError(f"DEM batch must be B×1×H×W, got {tuple(dem.shape)}")
        if dem.shape[-2:] != (BASE_TILE_SIZE, BASE_TILE_SIZE):
            raise ValueError(
                f"DEM must be {BASE_TILE_SIZE}×{BASE_TILE_SIZE}, got {tuple(dem.shape[-2:])} (no implicit resize)"
            )
        if dem.min() < 0 or dem.max() > 1:
            raise ValueError("DEM values must lie in [0,1]")

        param = next(self.parameters())
        rgb = dem.to(dtype=param.dtype, device=param.device).expand(-1, 3, -1, -1)
        with torch.no_grad():
            taps = self.forward(rgb)
        return FeaturePyramid(*taps)

    def pooled_features(self, rgb: torch.Tensor) -> torch.Tensor:
        """Global-average-pooled taps concatenated to one B×(C1+C2+C3) vector"""
        param = next(self.parameters())
        with torch.no_grad():
            taps = self.forward(rgb.to(dtype=param.dtype, device=param.device))
        return torch.cat([tap.mean(dim=(2, 3)) for tap in taps], dim=1)


def parameter_checksum(tensors: Union[nn.Module, Mapping[str, torch.Tensor]]) -> str:
    """
    SHA-256 over tensors in name order

    Args:
        tensors: Module (its state dict is used) or name -> tensor mapping

    Returns:
        str: Hex digest
    """
    if isinstance(tensors, nn.Module):
        tensors = tensors.state_dict()
    digest = hashlib.sha256()
    for name in sorted(tensors):
        value = tensors[name].detach().cpu().contiguous()
        digest.update(name.encode("utf-8"))
        digest.update(str(tuple(value.shape)).encode("utf-8"))
        digest.update(str(value.dtype).encode("utf-8"))
        digest.update(value.numpy().tobytes())
    return digest.hexdigest()


def build_seeded_encoder(preset: Union[str, EncoderPreset] = "tiny-seeded") -> DemEncoder:
    """Deterministic seeded-random frozen weights for hermetic runs"""
    chosen = resolve_preset(preset)
    encoder = DemEncoder(chosen)
    generator = torch.Generator().manual_seed(chosen.seed)
    with torch.no_grad():
        for module in encoder.modules():
            if isinstance(module, nn.Conv2d):
                nn.init.kaiming_normal_(module.weight, nonlinearity="relu", generator=generator)
                nn.init.zeros_(module.bias)
    logger.info(f"Built seeded '{chosen.name}' encoder (seed={chosen.seed})")
    return encoder.freeze()


def save_encoder_weights(encoder: DemEncoder, path: Union[str, Path]) -> Path:
    """
    Write the encoder weight container

    Args:
        encoder (DemEncoder): Encoder to save
        path: Target file

    Returns:
        Path: Written file
    """
    path = Path(path)
    tensors = {name: t.detach().cpu().clone() for name, t in encoder.state_dict().items()}
    header = {
        "format": WEIGHTS_FORMAT,
        "version": WEIGHTS_VERSION,
        "preset": encoder.preset.name,
        "layers": [
            {"name": name, "shape": list(t.shape), "dtype": str(t.dtype)} for name, t in tensors.items()
        ],
        "normalization": {
            "mean": encoder.mean.flatten().tolist(),
            "std": encoder.std.flatten().tolist(),
        },
        "checksum": parameter_checksum(tensors),
    }
    torch.save({"header": header, "tensors": tensors}, path)
    logger.info(f"Saved encoder weights to {path} ({len(tensors)} tensors)")
    return path


def load_encoder_weights(
    path: Optional[Union[str, Path]], preset: Union[str, EncoderPreset] = "tiny-seeded"
) -> DemEncoder:
    """
    Load a frozen encoder from a weight container

    An absent file is only allowed for the 'tiny-seeded' preset, which then
    falls back to deterministic seeded weights.

    Args:
        path: Weight file or None
        preset: Preset whose layer layout the file must match

    Returns:
        DemEncoder: Frozen encoder
    """
    chosen = resolve_preset(preset)
    path = Path(path) if path is not None else None

    if path is None or not path.exists():
        if chosen.name == "tiny-seeded":
            return build_seeded_encoder(chosen)
        raise FileNotFoundError(f"Encoder weight file not found: {path}")

    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
        header = payload["header"]
        tensors = payload["tensors"]
    except Exception as e:
        raise EncoderWeightsError(f"Unreadable encoder weight file {path}: {e}") from e

    if header.get("format") != WEIGHTS_FORMAT:
        raise EncoderWeightsError(f"{path} is not an encoder weight container")

    encoder = DemEncoder(chosen)
    expected = encoder.state_dict()
    for name, tensor in expected.items():
        if name not in tensors:
            raise EncoderWeightsError(f"Layer '{name}' missing from {path}")
        if tuple(tensors[name].shape) != tuple(tensor.shape):
            raise EncoderWeightsError(
                f"Layer '{name}' shape {tuple(tensors[name].shape)} does not match preset shape {tuple(tensor.shape)}"
            )
    unexpected = [name for name in tensors if name not in expected]
    if unexpected:
        raise EncoderWeightsError(f"Layer '{unexpected[0]}' is not part of preset '{chosen.name}'")

    checksum = parameter_checksum(tensors)
    if checksum != header.get("checksum"):
        raise EncoderWeightsError(f"Checksum mismatch for {path}: header {header.get('checksum')} != {checksum}")

    encoder.load_state_dict(tensors)
    norm = header.get("normalization", {})
    if norm:
        encoder.set_normalization(norm["mean"], norm["std"])
    logger.info(f"Loaded '{chosen.name}' encoder from {path}")
    return encoder.freeze()


def dem_batch(dems: Sequence[Union[TerrainTile, np.ndarray]]) -> torch.Tensor:
    """Stack tiles into a B×1×H×W float32 tensor"""
    grids = [d.elevation if isinstance(d, TerrainTile) else np.asarray(d, dtype=np.float64) for d in dems]
    return torch.from_numpy(np.stack(grids)[:, None].astype(np.float32))


def encode_dem(dem: Union[TerrainTile, np.ndarray, torch.Tensor], encoder: DemEncoder) -> FeaturePyramid:
    """
    Encode one DEM tile (or a B×1×32×32 batch) into its feature pyramid

    Args:
        dem: TerrainTile, H×W array or batched tensor
        encoder (DemEncoder): Frozen encoder

    Returns:
        FeaturePyramid: Taps at 32², 16² and 8²
    """
    if isinstance(dem, torch.Tensor):
        batch = dem if dem.dim() == 4 else dem.reshape(1, 1, *dem.shape[-2:])
    else:
        batch = dem_batch([dem])
    return encoder.encode(batch)
