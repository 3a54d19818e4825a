"""
Velocity-prediction UNet with self/cross attention and multi-scale DEM injection (MCA)

Encoder levels run at 32², 16² and 8² for a 32×32 input. Each encoder block
applies: residual conv -> pixel self-attention (attention levels only) ->
text cross-attention -> SE fusion of the DEM pyramid level (injected levels only).
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from models.conditioning import Conditioning
from models.dem_encoder import ENCODER_PRESETS

logger = logging.getLogger(__name__)

NUM_LEVELS = 3


class MCAMode(str, Enum):
    FULL = "full"
    SINGLE_16 = "single_16"
    NONE = "none"


INJECTED_LEVELS: Dict[MCAMode, Tuple[int, ...]] = {
    MCAMode.FULL: (0, 1, 2),
    MCAMode.SINGLE_16: (1,),
    MCAMode.NONE: (),
}

# Scaled mirror of the 45M/75M/102M models; only the ordering S < M < L matters
SIZE_PRESETS: Dict[str, dict] = {
    "S": {"base_channels": 32, "channel_mults": (1, 2, 2), "attention_levels": (2,), "num_heads": 1},
    "M": {"base_channels": 48, "channel_mults": (1, 2, 3), "attention_levels": (1, 2), "num_heads": 4},
    "L": {"base_channels": 64, "channel_mults": (1, 2, 4), "attention_levels": (1, 2), "num_heads": 4},
}


@dataclass
class UNetConfig:
    base_channels: int = 32
    channel_mults: Tuple[int, ...] = (1, 2, 2)
    attention_levels: Tuple[int, ...] = (2,)
    se_reduction: int = 4
    mca_mode: str = MCAMode.FULL.value
    text_dim: int = 64
    size_preset: str = "S"
    num_heads: int = 1
    dem_channels: Tuple[int, ...] = ENCODER_PRESETS["tiny-seeded"].channels

    def __post_init__(self):
        self.channel_mults = tuple(self.channel_mults)
        self.attention_levels = tuple(sorted(set(self.attention_levels)))
        self.dem_channels = tuple(self.dem_channels)
        self.mca_mode = MCAMode(self.mca_mode).value

        if len(self.channel_mults) != NUM_LEVELS:
            raise ValueError(f"channel_mults must have {NUM_LEVELS} levels (32→16→8), got {self.channel_mults}")
        if len(self.dem_channels) != NUM_LEVELS:
            raise ValueError(f"dem_channels must have {NUM_LEVELS} entries, got {self.dem_channels}")
        if any(level not in range(NUM_LEVELS) for level in self.attention_levels):
            raise ValueError(f"attention_levels must be within 0..{NUM_LEVELS - 1}, got {self.attention_levels}")
        if self.base_channels < 1 or self.base_channels % 2:
            raise ValueError(f"base_channels must be a positive even number, got {self.base_channels}")
        if self.se_reduction < 1:
            raise ValueError(f"se_reduction must be >= 1, got {self.se_reduction}")
        for mult in self.channel_mults:
            if (self.base_channels * mult) % self.num_heads:
                raise ValueError(f"{self.num_heads} heads do not divide {self.base_channels * mult} channels")

    @property
    def mode(self) -> MCAMode:
        return MCAMode(self.mca_mode)

    @property
    def level_channels(self) -> List[int]:
        return [self.base_channels * m for m in self.channel_mults]

    def to_dict(self) -> dict:
        data = asdict(self)
        for key in ("channel_mults", "attention_levels", "dem_channels"):
            data[key] = list(data[key])
        return data


def unet_config_for(size: str, mode: Union[str, MCAMode] = MCAMode.FULL, **overrides) -> UNetConfig:
    """Config for a size preset (S/M/L) and MCA mode"""
    if size not in SIZE_PRESETS:
        raise ValueError(f"Unknown size preset '{size}', expected one of {sorted(SIZE_PRESETS)}")
    params = dict(SIZE_PRESETS[size])
    params.update(overrides)
    return UNetConfig(size_preset=size, mca_mode=MCAMode(mode).value, **params)


def _groups(channels: int) -> int:
    return math.gcd(channels, 8)


def time_embedding(t: Union[float, torch.Tensor], dim: int) -> torch.Tensor:
    """
    Sinusoidal embedding of flow time

    Args:
        t: Scalar or (B,) times in [0,1]
        dim (int): Even embedding width

    Returns:
        torch.Tensor: (dim,) for scalar t, else (B, dim)
    """
    if dim % 2:
        raise ValueError(f"Time embedding dim must be even, got {dim}")
    t = torch.as_tensor(t)
    if not torch.is_floating_point(t):
        t = t.double()
    if t.min() < 0 or t.max() > 1:
        raise ValueError("Time must lie in [0,1]")

    scalar = t.dim() == 0
    t = t.reshape(-1)
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = (t * 1000.0)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    return emb[0] if scalar else emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    """Pixel-wise self-attention over the h·w tokens of a feature map"""

    def __init__(self, channels: int, num_heads: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.attn = nn.MultiheadAttention(channels, num_heads, batch_first=True)

    def _tokens(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x).flatten(2).transpose(1, 2)

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        q = self._tokens(x)
        return self.attn(q, q, q, need_weights=True)[1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q = self._tokens(x)
        out = self.attn(q, q, q, need_weights=False)[0]
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class CrossAttention(nn.Module):
    """Pixel queries attending over the text token sequence"""

    def __init__(self, channels: int, text_dim: int, num_heads: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.attn = nn.MultiheadAttention(channels, num_heads, kdim=text_dim, vdim=text_dim, batch_first=True)

    def attention_weights(self, x: torch.Tensor, text: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        q = self.norm(x).flatten(2).transpose(1, 2)
        return self.attn(q, text, text, key_padding_mask=mask, need_weights=True)[1]

    def forward(self, x: torch.Tensor, text: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        b, c, h, w = x.shape
        q = self.norm(x).flatten(2).transpose(1, 2)
        out = self.attn(q, text, text, key_padding_mask=mask, need_weights=False)[0]
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class SEFuse(nn.Module):
    """
    Squeeze-and-excitation fusion of a UNet feature map with a DEM feature map

    concat -> global average pool -> bottleneck excitation with sigmoid gates ->
    gate-scale channels -> 1×1 projection back to the UNet width.
    The projection starts at zero, so a fresh fusion contributes nothing.
    """

    def __init__(self, unet_channels: int, dem_channels: int, se_reduction: int = 4, bypass_gates: bool = False):
        super().__init__()
        total = unet_channels + dem_channels
        hidden = max(total // se_reduction, 1)
        self.unet_channels = unet_channels
        self.dem_channels = dem_channels
        self.bypass_gates = bypass_gates
        self.excite = nn.Sequential(
            nn.Linear(total, hidden),
            nn.ReLU(),
            nn.Linear(hidden, total),
            nn.Sigmoid(),
        )
        self.proj = nn.Conv2d(total, unet_channels, kernel_size=1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def gates(self, cat: torch.Tensor) -> torch.Tensor:
        return self.excite(cat.mean(dim=(2, 3)))

    def forward(self, unet_feat: torch.Tensor, dem_feat: torch.Tensor) -> torch.Tensor:
        if unet_feat.shape[-2:] != dem_feat.shape[-2:]:
            raise ValueError(
                f"MCA spatial mismatch: UNet {tuple(unet_feat.shape[-2:])} vs DEM {tuple(dem_feat.shape[-2:])}"
            )
        if dem_feat.shape[1] != self.dem_channels:
            raise ValueError(f"DEM feature has {dem_feat.shape[1]} channels, fusion expects {self.dem_channels}")
        cat = torch.cat([unet_feat, dem_feat.to(unet_feat.dtype)], dim=1)
        if not self.bypass_gates:
            cat = cat * self.gates(cat)[:, :, None, None]
        return self.proj(cat)


class UNetMCA(nn.Module):
    """Velocity predictor v(x_t, t, text, DEM)"""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.level_channels
        self.time_dim = cfg.base_channels
        temb_dim = cfg.base_channels * 4
        in_ch = 3 + (1 if cfg.mode is MCAMode.NONE else 0)

        self.time_mlp = nn.Sequential(nn.Linear(self.time_dim, temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.input_conv = nn.Conv2d(in_ch, chans[0], 3, padding=1)

        def attention(level: int, ch: int) -> nn.Module:
            return SelfAttention(ch, cfg.num_heads) if level in cfg.attention_levels else nn.Identity()

        self.down_res = nn.ModuleList()
        self.down_self = nn.ModuleList()
        self.down_cross = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = chans[0]
        for level, ch in enumerate(chans):
            self.down_res.append(ResBlock(prev, ch, temb_dim))
            self.down_self.append(attention(level, ch))
            self.down_cross.append(CrossAttention(ch, cfg.text_dim, cfg.num_heads))
            self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1) if level < NUM_LEVELS - 1 else nn.Identity())
            prev = ch

        self.fusers = nn.ModuleDict({
            str(level): SEFuse(chans[level], cfg.dem_channels[level], cfg.se_reduction)
            for level in INJECTED_LEVELS[cfg.mode]
        })

        self.mid_res1 = ResBlock(chans[-1], chans[-1], temb_dim)
        self.mid_self = SelfAttention(chans[-1], cfg.num_heads)
        self.mid_cross = CrossAttention(chans[-1], cfg.text_dim, cfg.num_heads)
        self.mid_res2 = ResBlock(chans[-1], chans[-1], temb_dim)

        self.up_res = nn.ModuleList()
        self.up_self = nn.ModuleList()
        self.up_cross = nn.ModuleList()
        self.upsample = nn.ModuleList()
        prev = chans[-1]
        for level in reversed(range(NUM_LEVELS)):
            ch = chans[level]
            self.up_res.append(ResBlock(prev + ch, ch, temb_dim))
            self.up_self.append(attention(level, ch))
            self.up_cross.append(CrossAttention(ch, cfg.text_dim, cfg.num_heads))
            self.upsample.append(nn.Conv2d(ch, ch, 3, padding=1) if level > 0 else nn.Identity())
            prev = ch

        self.out_norm = nn.GroupNorm(_groups(chans[0]), chans[0])
        self.out_conv = nn.Conv2d(chans[0], 3, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

    @property
    def injected_levels(self) -> Tuple[int, ...]:
        return INJECTED_LEVELS[self.cfg.mode]

    def trainable_parameters(self) -> List[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def _check_inputs(self, x_t: torch.Tensor, conditioning: Conditioning):
        if x_t.dim() != 4 or x_t.shape[1] != 3:
            raise ValueError(f"x_t must be B×3×H×W, got {tuple(x_t.shape)}")
        if x_t.shape[-1] % 4 or x_t.shape[-2] % 4:
            raise ValueError(f"Spatial size {tuple(x_t.shape[-2:])} must be divisible by 4")
        if conditioning is None or conditioning.text is None:
            raise ValueError("Missing text embedding; pass the null embedding explicitly for the unconditional branch")
        if self.cfg.mode is MCAMode.NONE:
            if conditioning.dem is None:
                raise ValueError("Mode 'none' concatenates the raw DEM, but no DEM was given")
        elif conditioning.pyramid is None:
            raise ValueError(f"Mode '{self.cfg.mca_mode}' needs a DEM feature pyramid")

    def forward(self, x_t: torch.Tensor, t: Union[float, torch.Tensor], conditioning: Conditioning) -> torch.Tensor:
        """
        Predict the flow velocity

        Args:
            x_t (torch.Tensor): B×3×H×W noisy input
            t: Scalar or (B,) flow times
            conditioning (Conditioning): Text tokens and DEM pathway

        Returns:
            torch.Tensor: B×3×H×W velocity
        """
        self._check_inputs(x_t, conditioning)
        t = torch.as_tensor(t, dtype=x_t.dtype, device=x_t.device)
        if t.dim() == 0:
            t = t.expand(x_t.shape[0])
        temb = self.time_mlp(time_embedding(t, self.time_dim))

        text = conditioning.text.to(x_t.dtype)
        mask = conditioning.text_mask

        h = x_t
        if self.cfg.mode is MCAMode.NONE:
            h = torch.cat([h, conditioning.dem.to(x_t.dtype)], dim=1)
        h = self.input_conv(h)

        skips = []
        for level in range(NUM_LEVELS):
            h = self.down_res[level](h, temb)
            h = self.down_self[level](h)
            h = self.down_cross[level](h, text, mask)
            key = str(level)
            if key in self.fusers:
                h = h + self.fusers[key](h, conditioning.pyramid.levels[level])
            skips.append(h)
            h = self.downsample[level](h)

        h = self.mid_res1(h, temb)
        h = self.mid_self(h)
        h = self.mid_cross(h, text, mask)
        h = self.mid_res2(h, temb)

        for i, level in enumerate(reversed(range(NUM_LEVELS))):
            h = torch.cat([h, skips[level]], dim=1)
            h = self.up_res[i](h, temb)
            h = self.up_self[i](h)
            h = self.up_cross[i](h, text, mask)
            if level > 0:
                h = self.upsample[i](F.interpolate(h, scale_factor=2.0, mode="nearest"))

        return self.out_conv(F.silu(self.out_norm(h)))


def build_unet(cfg: UNetConfig, seed: Optional[int] = None) -> UNetMCA:
    """Build a UNet; with a seed, initialization does not disturb the global RNG"""
    if seed is None:
        return UNetMCA(cfg)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return UNetMCA(cfg)


def count_parameters(cfg: Union[UNetConfig, nn.Module]) -> int:
    """
    Exact trainable parameter count (the frozen DEM encoder is never part of the UNet)

    Args:
        cfg: UNetConfig or an already-built model

    Returns:
        int: Number of trainable scalars
    """
    model = cfg if isinstance(cfg, nn.Module) else build_unet(cfg, seed=0)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
