"""
Conditional flow matching on the linear interpolant, with a guided Euler sampler

Path:      x_t = (1 - t) * x0 + t * x1,   x0 ~ N(0, I) (noise), x1 = data
Target:    u = x1 - x0
Sampling:  integrate dx/dt = v(x, t) from t=0 (noise) to t=1 (data)
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Union

import torch
import torch.nn.functional as F

from models.conditioning import tensor_to_texture, to_unit_range
from utils.tiles import TextureTile

logger = logging.getLogger(__name__)

VelocityModel = Callable[[torch.Tensor, torch.Tensor, object], torch.Tensor]

DEFAULT_STEPS = 50
DEFAULT_CFG_SCALE = 8.0


class NonFiniteError(FloatingPointError):
    """NaN/Inf in a model output or sampler state"""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


@dataclass
class SamplerConfig:
    steps: int = DEFAULT_STEPS
    cfg_scale: float = DEFAULT_CFG_SCALE
    seed: int = 0

    def __post_init__(self):
        if int(self.steps) < 1:
            raise ValueError(f"Sampler steps must be >= 1, got {self.steps}")
        if self.cfg_scale < 0:
            raise ValueError(f"CFG scale must be >= 0, got {self.cfg_scale}")


@dataclass
class FlowState:
    x_t: torch.Tensor
    t: float

    def __post_init__(self):
        _check_time(self.t)


def _check_time(t: Union[float, torch.Tensor]):
    t_min = float(torch.as_tensor(t).min())
    t_max = float(torch.as_tensor(t).max())
    if t_min < 0.0 or t_max > 1.0:
        raise ValueError(f"Flow time must lie in [0,1], got range [{t_min}, {t_max}]")


def _check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def _pad_t_like_x(t: Union[float, torch.Tensor], x: torch.Tensor) -> Union[float, torch.Tensor]:
    if isinstance(t, (float, int)):
        return float(t)
    t = torch.as_tensor(t, dtype=x.dtype, device=x.device)
    if t.dim() == 0:
        return t
    return t.reshape(-1, *([1] * (x.dim() - 1)))


def interpolate_path(x0: torch.Tensor, x1: torch.Tensor, t: Union[float, torch.Tensor]) -> torch.Tensor:
    """
    Point on the straight path between noise and data

    Args:
        x0 (torch.Tensor): Noise tile(s)
        x1 (torch.Tensor): Data tile(s), same shape
        t: Scalar time or per-sample (B,) times in [0,1]

    Returns:
        torch.Tensor: (1 - t) * x0 + t * x1
    """
    _check_same_shape(x0, x1, "interpolate_path")
    _check_time(t)
    t = _pad_t_like_x(t, x0)
    return (1 - t) * x0 + t * x1


def velocity_target(x0: torch.Tensor, x1: torch.Tensor) -> torch.Tensor:
    """Constant velocity of the straight path"""
    _check_same_shape(x0, x1, "velocity_target")
    return x1 - x0


def cfm_loss(
    model: VelocityModel,
    x1: torch.Tensor,
    conditioning,
    rng: torch.Generator,
    step: Optional[int] = None,
    x0: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Flow-matching regression loss for one batch

    Args:
        model: Velocity predictor called as model(x_t, t, conditioning)
        x1 (torch.Tensor): B×C×H×W data batch in model range
        conditioning: Passed through to the model
        rng (torch.Generator): Source of noise and times
        step (int): Training step, reported on failure
        x0 (torch.Tensor): Noise override (t is still drawn from rng)

    Returns:
        torch.Tensor: Scalar mean squared error
    """
    if x0 is None:
        x0 = torch.randn(x1.shape, generator=rng, dtype=x1.dtype, device=x1.device)
    t = torch.rand(x1.shape[0], generator=rng, dtype=x1.dtype, device=x1.device)

    x_t = interpolate_path(x0, x1, t)
    v = model(x_t, t, conditioning)
    if not torch.isfinite(v).all():
        raise NonFiniteError(f"Non-finite model output at step {step}", step=step)
    return F.mse_loss(v, velocity_target(x0, x1))


def validation_loss(model: VelocityModel, x1: torch.Tensor, conditioning, seed: int) -> float:
    """cfm_loss under a fixed seed, without gradients"""
    with torch.no_grad():
        return float(cfm_loss(model, x1, conditioning, torch.Generator().manual_seed(seed)))


def cfg_combine(v_uncond: torch.Tensor, v_cond: torch.Tensor, w: float) -> torch.Tensor:
    """
    Classifier-free guidance: v_uncond + w * (v_cond - v_uncond)

    w=0 and w=1 return the matching branch unchanged.
    """
    _check_same_shape(v_uncond, v_cond, "cfg_combine")
    if w == 0:
        return v_uncond
    if w == 1:
        return v_cond
    return v_uncond + w * (v_cond - v_uncond)


def initial_noise(shape: Sequence[int], seed: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Seeded standard-normal prior sample"""
    generator = torch.Generator().manual_seed(int(seed))
    return torch.randn(tuple(shape), generator=generator, dtype=dtype)


def _unconditional(conditioning):
    if hasattr(conditioning, "unconditional"):
        return conditioning.unconditional()
    return conditioning


def euler_integrate(
    model: VelocityModel,
    conditioning,
    cfg: SamplerConfig,
    x0: Optional[torch.Tensor] = None,
    shape: Sequence[int] = (1, 3, 32, 32),
) -> torch.Tensor:
    """
    Integrate the guided velocity field from t=0 to t=1 with uniform Euler steps

    Args:
        model: Velocity predictor
        conditioning: Conditional branch input (its .unconditional() feeds the other branch)
        cfg (SamplerConfig): Steps, guidance scale, seed
        x0 (torch.Tensor): Starting noise; drawn from cfg.seed when omitted
        shape: Noise shape when x0 is omitted

    Returns:
        torch.Tensor: Final state, unclamped, in model range
    """
    x = initial_noise(shape, cfg.seed) if x0 is None else x0
    w = cfg.cfg_scale
    dt = 1.0 / cfg.steps
    uncond = _unconditional(conditioning) if w != 1 else None

    with torch.no_grad():
        for i in range(cfg.steps):
            t = torch.full((x.shape[0],), i * dt, dtype=x.dtype, device=x.device)
            if w == 1:
                v = model(x, t, conditioning)
            elif w == 0:
                v = model(x, t, uncond)
            else:
                v = cfg_combine(model(x, t, uncond), model(x, t, conditioning), w)
            x = x + v * dt
            if not torch.isfinite(x).all():
                raise NonFiniteError(f"Non-finite sampler state at step {i}", step=i)

    logger.debug(f"Euler integration done: steps={cfg.steps}, w={w}")
    return x


def euler_sample(
    model: VelocityModel,
    conditioning,
    cfg: SamplerConfig,
    x0: Optional[torch.Tensor] = None,
    shape: Sequence[int] = (1, 3, 32, 32),
) -> List[TextureTile]:
    """
    Sample textures: integrate, map back to [0,1] and clamp

    Returns:
        List[TextureTile]: One texture per batch element
    """
    x = euler_integrate(model, conditioning, cfg, x0=x0, shape=shape)
    return tensor_to_texture(to_unit_range(x).clamp(0.0, 1.0))
