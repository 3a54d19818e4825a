from pathlib import Path

import pytest
import torch

from models.dem_encoder import build_seeded_encoder
from models.flow_core import SamplerConfig
from models.text_conditioning import get_text_provider
from models.unet_mca import MCAMode, UNetConfig
from training.trainer import TrainConfig
from utils.data_pipeline import synthesize_dataset

# 12 triplets over two biomes: 3/2/1 train/val/test per biome
SMALL_PRESETS = ("alpine", "desert")
SMALL_RATIOS = (0.5, 0.25, 0.25)


def tiny_unet_config(mode=MCAMode.FULL, **overrides) -> UNetConfig:
    params = {
        "base_channels": 16,
        "channel_mults": (1, 2, 2),
        "attention_levels": (2,),
        "num_heads": 1,
        "text_dim": 64,
        "mca_mode": MCAMode(mode).value,
    }
    params.update(overrides)
    return UNetConfig(**params)


def tiny_train_config(mode=MCAMode.FULL, **overrides) -> TrainConfig:
    params = {
        "batch_size": 4,
        "max_steps": 3,
        "eval_every": 2,
        "unet": tiny_unet_config(mode),
        "sampler": SamplerConfig(steps=4, cfg_scale=2.0),
    }
    params.update(overrides)
    return TrainConfig(**params)


def randomize_parameters(module: torch.nn.Module, seed: int = 0, std: float = 0.1) -> torch.nn.Module:
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for param in module.parameters():
            param.copy_(torch.randn(param.shape, generator=generator, dtype=param.dtype) * std)
    return module


@pytest.fixture(scope="session")
def encoder():
    return build_seeded_encoder("tiny-seeded")


@pytest.fixture(scope="session")
def text_provider():
    return get_text_provider("hash", dim=64)


@pytest.fixture(scope="session")
def small_dataset_dir(tmp_path_factory) -> Path:
    out_dir = tmp_path_factory.mktemp("synthetic")
    synthesize_dataset(12, SMALL_PRESETS, out_dir, seed=0, ratios=SMALL_RATIOS)
    return out_dir


@pytest.fixture
def small_manifest(small_dataset_dir):
    from utils.data_pipeline import load_manifest

    return load_manifest(small_dataset_dir / "manifest.json")
