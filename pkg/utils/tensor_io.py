"""
File I/O: model checkpoints, tile PNGs and JSON result files
"""

import json
import logging
import os
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import pytz
import torch
from PIL import Image

from models.dem_encoder import parameter_checksum
from utils.tiles import TerrainTile, TextureTile

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "geodiffussr-checkpoint"
CHECKPOINT_VERSION = 1
DEM_PNG_SCALE = 65535.0


def utc_now_iso() -> str:
    """Current UTC time, ISO-8601"""
    return datetime.now(pytz.utc).isoformat()


def write_json(path: Union[str, Path], payload: Dict[str, Any]) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def read_json(path: Union[str, Path]) -> Dict[str, Any]:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _atomic_torch_save(payload: dict, path: Path):
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def save_checkpoint(
    path: Union[str, Path],
    model: torch.nn.Module,
    config: Dict[str, Any],
    step: int,
    rng_state: Dict[str, Any],
    optimizer: Optional[torch.optim.Optimizer] = None,
    extra_state: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Write a checkpoint: tensors plus a JSON-style header

    Args:
        path: Target file
        model: Model whose state dict is stored
        config (dict): Config echo
        step (int): Optimizer steps taken
        rng_state (dict): Seeds/counters needed to resume bit-exactly
        optimizer: Optimizer whose state is stored alongside
        extra_state (dict): Additional tensor state (e.g. EMA weights)

    Returns:
        Path: Written file
    """
    path = Path(path)
    state = {name: t.detach().cpu().clone() for name, t in model.state_dict().items()}
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": config,
        "step": int(step),
        "rng_state": rng_state,
        "parameter_checksum": parameter_checksum(state),
        "saved_at": utc_now_iso(),
    }
    payload = {
        "header": header,
        "model": state,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra_state or {},
    }
    _atomic_torch_save(payload, path)
    logger.info(f"Checkpoint written: {path} (step {step})")
    return path


def load_checkpoint(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Read a checkpoint and verify its parameter checksum

    Returns:
        dict: {'header', 'model', 'optimizer', 'extra'}
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    header = payload.get("header", {})
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a model checkpoint")
    checksum = parameter_checksum(payload["model"])
    if checksum != header.get("parameter_checksum"):
        raise ValueError(f"Checkpoint {path} is corrupt: parameter checksum mismatch")
    return payload


def write_texture_png(path: Union[str, Path], texture: TextureTile) -> Path:
    path = Path(path)
    Image.fromarray(texture.to_uint8()).save(path, format="PNG")
    return path


def read_texture_png(path: Union[str, Path]) -> TextureTile:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return TextureTile(arr)


def write_dem_png(path: Union[str, Path], dem: TerrainTile) -> Path:
    """16-bit grayscale PNG of the normalized grid"""
    path = Path(path)
    arr = np.round(np.clip(dem.elevation, 0.0, 1.0) * DEM_PNG_SCALE).astype(np.uint16)
    Image.fromarray(arr).save(path, format="PNG")
    return path


def read_dem_png(path: Union[str, Path]) -> np.ndarray:
    """Normalized grid in [0,1] from a 16-bit (or 8-bit) grayscale PNG"""
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr[..., 0]
    scale = 255.0 if arr.dtype == np.uint8 else DEM_PNG_SCALE
    return arr.astype(np.float64) / scale
