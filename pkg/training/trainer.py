"""
Training loop, checkpoint resume and the evaluation driver
"""

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from torch.optim.swa_utils import AveragedModel, get_ema_multi_avg_fn
from tqdm import tqdm

from models.conditioning import (
    Conditioning,
    build_conditioning,
    dem_to_tensor,
    texture_to_tensor,
    to_model_range,
)
from models.dem_encoder import DemEncoder, FeaturePyramid, load_encoder_weights, parameter_checksum
from models.flow_core import NonFiniteError, SamplerConfig, cfm_loss, euler_sample, initial_noise, validation_loss
from models.text_conditioning import DEFAULT_DROPOUT_P, TextEmbedding, cfg_dropout, embed, get_text_provider
from models.unet_mca import MCAMode, UNetConfig, UNetMCA, build_unet
from utils.data_pipeline import Manifest, TripletRecord, batch_iter, load_triplet
from utils.metrics import MetricsConfig, MetricsReport, compute_report
from utils.run_config import build_config, config_to_dict, derive_seed
from utils.tensor_io import load_checkpoint, save_checkpoint
from utils.tiles import TerrainTile, TextureTile

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.pt"
TRAIN_LOG_NAME = "train_log.csv"
LR_SCHEDULES = ("constant", "cosine")


class TrainingDivergedError(RuntimeError):
    """Non-finite loss; the last good checkpoint is left in place"""


@dataclass
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 32
    max_steps: int = 2000
    cfg_dropout_p: float = DEFAULT_DROPOUT_P
    seed: int = 0
    unet: UNetConfig = field(default_factory=UNetConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    eval_every: int = 500
    lr_schedule: str = "constant"
    ema_decay: Optional[float] = None
    text_provider: str = "hash"
    text_cache_dir: Optional[str] = None
    encoder_preset: str = "tiny-seeded"
    encoder_weights: Optional[str] = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1")
        if not 0.0 <= self.cfg_dropout_p <= 1.0:
            raise ValueError(f"cfg_dropout_p must lie in [0,1], got {self.cfg_dropout_p}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}, got '{self.lr_schedule}'")
        if self.ema_decay is not None and not 0.0 < self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must lie in (0,1), got {self.ema_decay}")


def build_optimizer(params, lr: float, weight_decay: float = 0.01,
                    betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> torch.optim.AdamW:
    """AdamW with decoupled weight decay"""
    return torch.optim.AdamW(params, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)


def make_conditioning(
    dems: Sequence[TerrainTile],
    embeddings: Sequence[TextEmbedding],
    encoder: DemEncoder,
    mode: MCAMode,
) -> Conditioning:
    """
    Conditioning for a batch of DEMs and caption embeddings

    Mode NONE carries only the raw DEM (model range); the MCA modes carry the pyramid too.
    """
    dem = dem_to_tensor(dems)
    pyramid = encoder.encode(dem) if mode is not MCAMode.NONE else None
    return build_conditioning(embeddings, pyramid=pyramid, dem=to_model_range(dem))


@dataclass
class _RecordTensors:
    x1: torch.Tensor
    dem: torch.Tensor
    pyramid: Optional[FeaturePyramid]
    text: TextEmbedding


class TripletTensors:
    """Per-record model tensors (texture, DEM, pyramid, caption embedding), computed once"""

    def __init__(self, manifest: Manifest, encoder: DemEncoder, text_provider, mode: MCAMode):
        self.manifest = manifest
        self.encoder = encoder
        self.text_provider = text_provider
        self.mode = mode
        self._cache: Dict[str, _RecordTensors] = {}

    def record(self, record: TripletRecord) -> _RecordTensors:
        cached = self._cache.get(record.record_id)
        if cached is None:
            dem, texture, caption = load_triplet(self.manifest, record)
            dem_t = dem_to_tensor([dem])
            cached = _RecordTensors(
                x1=to_model_range(texture_to_tensor([texture]))[0],
                dem=to_model_range(dem_t)[0],
                pyramid=self.encoder.encode(dem_t) if self.mode is not MCAMode.NONE else None,
                text=embed(caption, self.text_provider),
            )
            self._cache[record.record_id] = cached
        return cached

    def batch(
        self,
        records: Sequence[TripletRecord],
        dropout_p: float = 0.0,
        rng: Optional[np.random.Generator] = None,
    ) -> Tuple[torch.Tensor, Conditioning]:
        """
        Stack records into (x1, conditioning), dropping captions with probability dropout_p

        Returns:
            Tuple[torch.Tensor, Conditioning]: B×3×H×W targets in model range and their conditioning
        """
        items = [self.record(r) for r in records]
        if dropout_p > 0:
            embeddings = [cfg_dropout(item.text, dropout_p, rng) for item in items]
        else:
            embeddings = [item.text for item in items]
        pyramid = FeaturePyramid.cat([item.pyramid for item in items]) if self.mode is not MCAMode.NONE else None
        cond = build_conditioning(embeddings, pyramid=pyramid, dem=torch.stack([item.dem for item in items]))
        return torch.stack([item.x1 for item in items]), cond


def _cosine_factor(max_steps: int):
    def factor(step: int) -> float:
        return 0.5 * (1.0 + math.cos(math.pi * min(step, max_steps) / max_steps))
    return factor


def resolve_text_provider(cfg: TrainConfig, text_provider=None):
    """Given provider or the configured one; its width must equal unet.text_dim"""
    provider = text_provider if text_provider is not None else get_text_provider(
        cfg.text_provider, cfg.text_cache_dir, dim=cfg.unet.text_dim
    )
    if provider.dim != cfg.unet.text_dim:
        raise ValueError(
            f"UNet text_dim {cfg.unet.text_dim} does not match text provider "
            f"'{cfg.text_provider}' width {provider.dim}"
        )
    return provider


class Trainer:
    """
    Owns the model, optimizer and per-step random substreams

    Every random draw of step s comes from streams derived from (seed, s), and
    batch order from (seed, epoch), so resuming from a checkpoint replays the
    uninterrupted run exactly.
    """

    def __init__(
        self,
        cfg: TrainConfig,
        manifest: Manifest,
        out_dir: Optional[Union[str, Path]] = None,
        encoder: Optional[DemEncoder] = None,
        text_provider=None,
    ):
        n_train = len(manifest.by_split("train"))
        if n_train == 0:
            raise ValueError("Dataset has no 'train' split")

        self.cfg = cfg
        self.manifest = manifest
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

        self.encoder = encoder if encoder is not None else load_encoder_weights(
            cfg.encoder_weights, preset=cfg.encoder_preset
        )
        if tuple(self.encoder.preset.channels) != tuple(cfg.unet.dem_channels):
            raise ValueError(
                f"UNet dem_channels {cfg.unet.dem_channels} do not match encoder "
                f"'{self.encoder.preset.name}' channels {self.encoder.preset.channels}"
            )
        self.encoder_checksum = parameter_checksum(self.encoder)
        self.text_provider = resolve_text_provider(cfg, text_provider)

        self.model: UNetMCA = build_unet(cfg.unet, seed=derive_seed(cfg.seed, "init"))
        self.optimizer = build_optimizer(
            self.model.trainable_parameters(), cfg.lr, cfg.weight_decay, cfg.betas, cfg.eps
        )
        self.scheduler = None
        if cfg.lr_schedule == "cosine":
            self.scheduler = torch.optim.lr_scheduler.LambdaLR(self.optimizer, _cosine_factor(cfg.max_steps))
        self.ema = None
        if cfg.ema_decay is not None:
            self.ema = AveragedModel(self.model, multi_avg_fn=get_ema_multi_avg_fn(cfg.ema_decay))

        self.tensors = TripletTensors(manifest, self.encoder, self.text_provider, cfg.unet.mode)
        self.steps_per_epoch = math.ceil(n_train / cfg.batch_size)
        self.step = 0
        self.loss_history: List[float] = []
        self.last_checkpoint: Optional[Path] = None
        self._epoch_batches: Tuple[int, List[List[TripletRecord]]] = (-1, [])

    @property
    def checkpoint_path(self) -> Optional[Path]:
        return self.out_dir / CHECKPOINT_NAME if self.out_dir is not None else None

    def current_lr(self) -> float:
        return float(self.optimizer.param_groups[0]["lr"])

    def _batch_records(self, step: int) -> List[TripletRecord]:
        epoch = step // self.steps_per_epoch
        if self._epoch_batches[0] != epoch:
            batches = list(batch_iter(self.manifest, "train", self.cfg.batch_size,
                                      seed=derive_seed(self.cfg.seed, "data"), epoch=epoch))
            self._epoch_batches = (epoch, batches)
        return self._epoch_batches[1][step % self.steps_per_epoch]

    def train_step(self) -> float:
        """
        One optimizer step on the batch scheduled for the current step

        Returns:
            float: Batch loss before the update
        """
        step = self.step
        records = self._batch_records(step)
        dropout_rng = np.random.default_rng(derive_seed(self.cfg.seed, "dropout", step))
        x1, cond = self.tensors.batch(records, self.cfg.cfg_dropout_p, dropout_rng)
        noise_rng = torch.Generator().manual_seed(derive_seed(self.cfg.seed, "noise", step))

        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        loss = cfm_loss(self.model, x1, cond, noise_rng, step=step)
        if not torch.isfinite(loss):
            raise NonFiniteError(f"Non-finite loss at step {step}", step=step)
        loss.backward()
        self.optimizer.step()
        if self.scheduler is not None:
            self.scheduler.step()
        if self.ema is not None:
            self.ema.update_parameters(self.model)

        self.step += 1
        value = float(loss.detach())
        self.loss_history.append(value)
        return value

    def save(self) -> Optional[Path]:
        if self.checkpoint_path is None:
            return None
        extra = {}
        if self.scheduler is not None:
            extra["scheduler"] = self.scheduler.state_dict()
        if self.ema is not None:
            extra["ema"] = self.ema.state_dict()
        self.last_checkpoint = save_checkpoint(
            self.checkpoint_path,
            self.model,
            config=config_to_dict(self.cfg),
            step=self.step,
            rng_state={"seed": self.cfg.seed, "step": self.step},
            optimizer=self.optimizer,
            extra_state=extra,
        )
        return self.last_checkpoint

    def load_state(self, payload: dict):
        """Restore model, optimizer, schedule and EMA state from a checkpoint payload"""
        self.model.load_state_dict(payload["model"])
        if payload.get("optimizer") is not None:
            self.optimizer.load_state_dict(payload["optimizer"])
        extra = payload.get("extra") or {}
        if self.scheduler is not None and "scheduler" in extra:
            self.scheduler.load_state_dict(extra["scheduler"])
        if self.ema is not None and "ema" in extra:
            self.ema.load_state_dict(extra["ema"])
        self.step = int(payload["header"]["step"])

    @classmethod
    def resume(
        cls,
        checkpoint: Union[str, Path],
        manifest: Manifest,
        out_dir: Optional[Union[str, Path]] = None,
        max_steps: Optional[int] = None,
        encoder: Optional[DemEncoder] = None,
        text_provider=None,
    ) -> "Trainer":
        """Rebuild a trainer from a checkpoint's config echo and state"""
        payload = load_checkpoint(checkpoint)
        data = dict(payload["header"]["config"])
        if max_steps is not None:
            data["max_steps"] = max_steps
        cfg = build_config(TrainConfig, data)
        trainer = cls(cfg, manifest, out_dir or Path(checkpoint).parent, encoder=encoder, text_provider=text_provider)
        trainer.load_state(payload)
        logger.info(f"Resumed from {checkpoint} at step {trainer.step}")
        return trainer

    def _flush_log(self, rows: List[dict]):
        if self.out_dir is None or not rows:
            return
        path = self.out_dir / TRAIN_LOG_NAME
        pd.DataFrame(rows, columns=["step", "loss", "lr", "wall_time"]).to_csv(
            path, mode="a", header=not path.exists(), index=False
        )
        rows.clear()

    def fit(self) -> Optional[Path]:
        """
        Train until cfg.max_steps, checkpointing every eval_every steps and at the end

        Returns:
            Path: Final checkpoint (None without an output directory)
        """
        cfg = self.cfg
        logger.info(
            f"Training {cfg.unet.size_preset}/{cfg.unet.mca_mode} from step {self.step} to {cfg.max_steps} "
            f"(batch {cfg.batch_size}, lr {cfg.lr})"
        )
        rows: List[dict] = []
        start = time.perf_counter()
        with tqdm(total=cfg.max_steps, initial=self.step, desc="Training", unit="step") as bar:
            while self.step < cfg.max_steps:
                lr = self.current_lr()
                try:
                    loss = self.train_step()
                except NonFiniteError as e:
                    self._flush_log(rows)
                    logger.error(f"Training diverged at step {self.step}: {e}")
                    raise TrainingDivergedError(
                        f"Loss became non-finite at step {self.step}; last good checkpoint: {self.last_checkpoint}"
                    ) from e
                rows.append({"step": self.step, "loss": loss, "lr": lr, "wall_time": time.perf_counter() - start})
                logger.debug(f"step {self.step}: loss={loss:.6f} lr={lr:.3e}")
                bar.update(1)
                bar.set_postfix(loss=f"{loss:.4f}")
                if self.step % cfg.eval_every == 0 or self.step == cfg.max_steps:
                    self._flush_log(rows)
                    self.save()

        self._flush_log(rows)
        if parameter_checksum(self.encoder) != self.encoder_checksum:
            raise RuntimeError("Frozen DEM encoder weights changed during training")
        final = self.loss_history[-1] if self.loss_history else float("nan")
        logger.info(f"Training complete at step {self.step}, final loss {final:.6f}")
        return self.last_checkpoint

    def validation_loss(self, split: str = "val", seed: Optional[int] = None) -> float:
        """Mean fixed-seed flow-matching loss over a split"""
        records = self.manifest.by_split(split) or self.manifest.by_split("train")
        seed = derive_seed(self.cfg.seed, "val") if seed is None else seed
        model = self.ema.module if self.ema is not None else self.model
        model.eval()
        losses = []
        for i in range(0, len(records), self.cfg.batch_size):
            x1, cond = self.tensors.batch(records[i:i + self.cfg.batch_size])
            losses.append(validation_loss(model, x1, cond, seed=derive_seed(seed, i)) * len(x1))
        return float(sum(losses) / len(records))


def train(
    cfg: TrainConfig,
    dataset: Manifest,
    out_dir: Optional[Union[str, Path]] = None,
    encoder: Optional[DemEncoder] = None,
    text_provider=None,
) -> Trainer:
    """
    Train a model on the dataset's train split

    Returns:
        Trainer: Finished trainer (its last_checkpoint holds the written checkpoint)
    """
    trainer = Trainer(cfg, dataset, out_dir, encoder=encoder, text_provider=text_provider)
    trainer.fit()
    return trainer


def load_model(checkpoint: Union[str, Path], use_ema: bool = False) -> Tuple[UNetMCA, TrainConfig]:
    """Model and training config from a checkpoint"""
    payload = load_checkpoint(checkpoint)
    cfg = build_config(TrainConfig, payload["header"]["config"])
    model = build_unet(cfg.unet)
    state = payload["model"]
    ema_state = (payload.get("extra") or {}).get("ema")
    if use_ema and ema_state is not None:
        state = {k[len("module."):]: v for k, v in ema_state.items() if k.startswith("module.")}
    model.load_state_dict(state)
    model.eval()
    return model, cfg


# Generators for evaluation

@dataclass
class EvalItem:
    record_id: str
    dem: TerrainTile
    caption: str
    reference: TextureTile


class CheckpointGenerator:
    """Samples with a trained model; each record's noise is seeded by its id"""

    name = "checkpoint"

    def __init__(self, model: UNetMCA, cfg: TrainConfig, encoder: Optional[DemEncoder] = None,
                 text_provider=None, sampler: Optional[SamplerConfig] = None):
        self.model = model.eval()
        self.cfg = cfg
        self.encoder = encoder if encoder is not None else load_encoder_weights(
            cfg.encoder_weights, preset=cfg.encoder_preset
        )
        self.text_provider = resolve_text_provider(cfg, text_provider)
        self.sampler = sampler or cfg.sampler

    @classmethod
    def from_checkpoint(cls, checkpoint: Union[str, Path], sampler: Optional[SamplerConfig] = None,
                        use_ema: bool = False, **kwargs) -> "CheckpointGenerator":
        model, cfg = load_model(checkpoint, use_ema=use_ema)
        return cls(model, cfg, sampler=sampler, **kwargs)

    def sample(self, dems: Sequence[TerrainTile], captions: Sequence[str], seeds: Sequence[int]) -> List[TextureTile]:
        """
        One texture per (DEM, caption), starting from noise seeded per item

        Returns:
            List[TextureTile]: Generated textures
        """
        h, w = dems[0].shape
        x0 = torch.cat([initial_noise((1, 3, h, w), seed) for seed in seeds])
        embeddings = [embed(c, self.text_provider) for c in captions]
        cond = make_conditioning(dems, embeddings, self.encoder, self.cfg.unet.mode)
        return euler_sample(self.model, cond, self.sampler, x0=x0)

    def generate(self, items: Sequence[EvalItem]) -> List[TextureTile]:
        seeds = [derive_seed(self.sampler.seed, item.record_id) for item in items]
        return self.sample([i.dem for i in items], [i.caption for i in items], seeds)


class GroundTruthGenerator:
    """Returns the reference texture: the upper-bound fixture"""

    name = "ground-truth"

    def generate(self, items: Sequence[EvalItem]) -> List[TextureTile]:
        return [TextureTile(item.reference.rgb.copy()) for item in items]


class NoiseGenerator:
    """Uniform random textures, seeded per record"""

    name = "noise"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def generate(self, items: Sequence[EvalItem]) -> List[TextureTile]:
        out = []
        for item in items:
            rng = np.random.default_rng(derive_seed(self.seed, "noise", item.record_id))
            out.append(TextureTile(rng.random(item.reference.shape)))
        return out


def evaluate(
    generator,
    dataset: Manifest,
    split: str = "val",
    metrics_cfg: Optional[MetricsConfig] = None,
    batch_size: int = 16,
) -> MetricsReport:
    """
    Generate one texture per record of a split and compute the metrics report

    Args:
        generator: Generator object or a checkpoint path
        dataset (Manifest): Dataset
        split (str): Split to evaluate
        metrics_cfg (MetricsConfig): Metric settings
        batch_size (int): Records per generation call

    Returns:
        MetricsReport: Aggregated metrics; per-tile failures are listed in errors
    """
    if isinstance(generator, (str, Path)):
        generator = CheckpointGenerator.from_checkpoint(generator)
    records = dataset.by_split(split)
    if not records:
        raise ValueError(f"Split '{split}' is empty")

    logger.info(f"Evaluating {getattr(generator, 'name', type(generator).__name__)} on {len(records)} '{split}' records")
    generated: List[Optional[TextureTile]] = []
    references, dems, errors = [], [], []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        items = []
        for r in chunk:
            dem, texture, caption = load_triplet(dataset, r)
            items.append(EvalItem(r.record_id, dem, caption, texture))
            references.append(texture)
            dems.append(dem)
        try:
            generated.extend(generator.generate(items))
        except (NonFiniteError, ValueError) as e:
            logger.warning(f"Generation failed for records {chunk[0].record_id}..{chunk[-1].record_id}: {e}")
            errors.extend(f"{item.record_id}: {e}" for item in items)
            generated.extend([None] * len(items))

    return compute_report(generated, references, dems, metrics_cfg, errors=errors)
