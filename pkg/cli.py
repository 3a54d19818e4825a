"""
geodiffussr command-line entry point

    geodiffussr {dataset-synth|train|sample|eval|ablate|render} [--config FILE] [--seed N] [--out DIR]

Precedence: dataclass defaults < config file section < command-line flags.
Every command writes effective_config.json and result.json into --out.
"""

import argparse
import hashlib
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from models.flow_core import SamplerConfig
from models.unet_mca import unet_config_for
from training.ablation import ablation_run, ablation_tables, render_table, write_ablation_tables
from training.trainer import (
    CheckpointGenerator,
    GroundTruthGenerator,
    NoiseGenerator,
    TrainConfig,
    Trainer,
    evaluate,
)
from utils.data_pipeline import (
    BIOME_PRESETS,
    DEFAULT_RATIOS,
    SPLITS,
    SynthParams,
    calibrate_coupling,
    load_dem_file,
    load_manifest,
    synthesize_dataset,
)
from utils.metrics import MetricsConfig
from utils.render25d import (
    DEFAULT_LIGHT,
    DEFAULT_Z_SCALE,
    compose_preview,
    export_mesh,
    surface_figure,
    write_preview_png,
)
from utils.run_config import (
    ConfigError,
    build_config,
    config_to_dict,
    derive_seed,
    load_run_config,
    merge_overrides,
    write_effective_config,
)
from utils.tensor_io import read_texture_png, utc_now_iso, write_json, write_texture_png

logger = logging.getLogger(__name__)

GENERATORS = ("checkpoint", "ground-truth", "noise")


@dataclass
class SynthCommandConfig:
    n: int = 64
    presets: List[str] = field(default_factory=lambda: list(BIOME_PRESETS))
    params: SynthParams = field(default_factory=SynthParams)
    ratios: Tuple[float, float, float] = DEFAULT_RATIOS
    calibrate: bool = False
    seed: int = 0


@dataclass
class SampleCommandConfig:
    checkpoint: Optional[str] = None
    dem: Optional[str] = None
    prompt: Optional[str] = None
    steps: Optional[int] = None
    cfg_scale: Optional[float] = None
    use_ema: bool = False
    seed: int = 0


@dataclass
class EvalCommandConfig:
    dataset: Optional[str] = None
    checkpoint: Optional[str] = None
    split: str = "val"
    generator: str = "checkpoint"
    steps: Optional[int] = None
    cfg_scale: Optional[float] = None
    use_ema: bool = False
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    seed: int = 0

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"generator must be one of {GENERATORS}, got '{self.generator}'")
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got '{self.split}'")


@dataclass
class AblateCommandConfig:
    dataset: Optional[str] = None
    modes: List[str] = field(default_factory=lambda: ["full", "single_16", "none"])
    sizes: List[str] = field(default_factory=lambda: ["S", "M", "L"])
    seeds: int = 3
    steps: Optional[int] = None
    eval_split: str = "val"
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    seed: int = 0


@dataclass
class RenderCommandConfig:
    dem: Optional[str] = None
    texture: Optional[str] = None
    factor: int = 4
    upsampler: str = "bicubic"
    z_scale: float = DEFAULT_Z_SCALE
    light_dir: Tuple[float, float, float] = DEFAULT_LIGHT
    mesh: bool = True
    seed: int = 0


def _csv_list(value: Optional[str]) -> Optional[List[str]]:
    if value is None:
        return None
    return [v.strip() for v in value.split(",") if v.strip()]


def _csv_floats(value: Optional[str]) -> Optional[List[float]]:
    items = _csv_list(value)
    return [float(v) for v in items] if items is not None else None


def _require(value: Any, flag: str) -> Any:
    if value is None:
        raise ConfigError(f"Missing required setting '{flag}'")
    return value


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _finish(out_dir: Path, command: str, config: Any, result: Dict[str, Any]) -> Dict[str, Any]:
    write_effective_config(out_dir, command, config)
    result = {"command": command, "finished_at": utc_now_iso(), **result}
    write_json(out_dir / "result.json", result)
    logger.info(f"{command} finished, results in {out_dir}")
    return result


# Commands

def cmd_dataset_synth(section: Dict[str, Any], args: argparse.Namespace, out_dir: Path) -> Dict[str, Any]:
    """Synthesize a triplet dataset round-robin over biome presets"""
    data = merge_overrides(section, {"n": args.n, "presets": _csv_list(args.presets), "seed": args.seed,
                                     "calibrate": True if args.calibrate else None})
    if args.coupling is not None or args.chroma_noise is not None:
        data["params"] = merge_overrides(data.get("params") or {},
                                         {"coupling": args.coupling, "chroma_noise": args.chroma_noise})
    cfg = build_config(SynthCommandConfig, data)

    params = cfg.params
    if cfg.calibrate:
        params = replace(params, coupling=calibrate_coupling(presets=cfg.presets, params=params))
        cfg = replace(cfg, params=params)

    manifest = synthesize_dataset(cfg.n, cfg.presets, out_dir, seed=cfg.seed, params=params, ratios=cfg.ratios)
    per_preset = {name: sum(1 for r in manifest.records if r.biome == name) for name in cfg.presets}
    return _finish(out_dir, "dataset-synth", cfg, {
        "manifest": str(out_dir / "manifest.json"),
        "n": len(manifest),
        "per_preset": per_preset,
        "splits": {s: len(manifest.by_split(s)) for s in SPLITS},
        "coupling": params.coupling,
    })


def cmd_train(section: Dict[str, Any], args: argparse.Namespace, out_dir: Path) -> Dict[str, Any]:
    """Train (or resume) a model on a manifest's train split"""
    section = dict(section)
    dataset = args.dataset or section.get("dataset")
    resume = args.resume or section.get("resume")
    section.pop("dataset", None)
    section.pop("resume", None)

    data = merge_overrides(section, {
        "max_steps": args.steps,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "eval_every": args.eval_every,
        "seed": args.seed,
    })
    cfg = build_config(TrainConfig, data)
    if args.size is not None or args.mode is not None:
        cfg = replace(cfg, unet=unet_config_for(
            args.size or cfg.unet.size_preset,
            args.mode or cfg.unet.mca_mode,
            text_dim=cfg.unet.text_dim,
            se_reduction=cfg.unet.se_reduction,
            dem_channels=cfg.unet.dem_channels,
        ))

    manifest = load_manifest(_require(dataset, "dataset"))
    if resume:
        trainer = Trainer.resume(resume, manifest, out_dir, max_steps=cfg.max_steps)
        cfg = trainer.cfg
    else:
        trainer = Trainer(cfg, manifest, out_dir)
    checkpoint = trainer.fit()

    return _finish(out_dir, "train", {"dataset": str(dataset), "resume": resume, **config_to_dict(cfg)}, {
        "checkpoint": str(checkpoint),
        "step": trainer.step,
        "initial_loss": trainer.loss_history[0] if trainer.loss_history else None,
        "final_loss": trainer.loss_history[-1] if trainer.loss_history else None,
        "val_loss": trainer.validation_loss("val"),
    })


def _sampler(cfg_sampler: SamplerConfig, steps: Optional[int], cfg_scale: Optional[float], seed: int) -> SamplerConfig:
    return SamplerConfig(
        steps=steps if steps is not None else cfg_sampler.steps,
        cfg_scale=cfg_scale if cfg_scale is not None else cfg_sampler.cfg_scale,
        seed=seed,
    )


def cmd_sample(section: Dict[str, Any], args: argparse.Namespace, out_dir: Path) -> Dict[str, Any]:
    """Sample one texture for a DEM and prompt"""
    data = merge_overrides(section, {
        "checkpoint": args.checkpoint, "dem": args.dem, "prompt": args.prompt,
        "steps": args.steps, "cfg_scale": args.cfg_scale, "seed": args.seed,
        "use_ema": True if args.use_ema else None,
    })
    cfg = build_config(SampleCommandConfig, data)
    generator = CheckpointGenerator.from_checkpoint(_require(cfg.checkpoint, "checkpoint"), use_ema=cfg.use_ema)
    generator.sampler = _sampler(generator.cfg.sampler, cfg.steps, cfg.cfg_scale, derive_seed(cfg.seed, "sample"))

    dem = load_dem_file(_require(cfg.dem, "dem"))
    prompt = _require(cfg.prompt, "prompt")
    texture = generator.sample([dem], [prompt], seeds=[generator.sampler.seed])[0]

    image_path = write_texture_png(out_dir / "sample.png", texture)
    return _finish(out_dir, "sample", cfg, {
        "image": str(image_path),
        "sha256": _sha256(image_path),
        "noise_seed": generator.sampler.seed,
        "sampler": config_to_dict(generator.sampler),
    })


def cmd_eval(section: Dict[str, Any], args: argparse.Namespace, out_dir: Path) -> Dict[str, Any]:
    """Evaluate a checkpoint (or a fixture generator) on a split"""
    data = merge_overrides(section, {
        "dataset": args.dataset, "checkpoint": args.checkpoint, "split": args.split,
        "generator": args.generator, "steps": args.steps, "cfg_scale": args.cfg_scale, "seed": args.seed,
        "use_ema": True if args.use_ema else None,
    })
    if args.dcor_gt is not None:
        data["metrics"] = merge_overrides(data.get("metrics") or {}, {"dcor_gt": args.dcor_gt})
    cfg = build_config(EvalCommandConfig, data)
    manifest = load_manifest(_require(cfg.dataset, "dataset"))

    if cfg.generator == "ground-truth":
        generator = GroundTruthGenerator()
    elif cfg.generator == "noise":
        generator = NoiseGenerator(seed=derive_seed(cfg.seed, "eval-noise"))
    else:
        generator = CheckpointGenerator.from_checkpoint(_require(cfg.checkpoint, "checkpoint"), use_ema=cfg.use_ema)
        generator.sampler = _sampler(generator.cfg.sampler, cfg.steps, cfg.cfg_scale, derive_seed(cfg.seed, "eval"))

    report = evaluate(generator, manifest, split=cfg.split, metrics_cfg=cfg.metrics)
    return _finish(out_dir, "eval", cfg, {"generator": cfg.generator, "split": cfg.split,
                                          **report.to_dict(cfg.metrics)})


def cmd_ablate(section: Dict[str, Any], args: argparse.Namespace, out_dir: Path) -> Dict[str, Any]:
    """Run the MCA-mode and model-size ablations and write their tables"""
    modes, sizes = _csv_list(args.modes), _csv_list(args.sizes)
    if modes is not None and sizes is None:
        sizes = []
    if sizes is not None and modes is None:
        modes = []
    data = merge_overrides(section, {
        "dataset": args.dataset, "modes": modes, "sizes": sizes,
        "seeds": args.seeds, "steps": args.steps, "seed": args.seed,
    })
    if args.batch_size is not None:
        data["train"] = merge_overrides(data.get("train") or {}, {"batch_size": args.batch_size})
    cfg = build_config(AblateCommandConfig, data)
    if cfg.seeds < 1:
        raise ConfigError(f"'seeds' must be >= 1, got {cfg.seeds}")

    manifest = load_manifest(_require(cfg.dataset, "dataset"))
    seeds = [cfg.seed + k for k in range(cfg.seeds)]
    df = ablation_run(cfg.train, manifest, modes=cfg.modes, sizes=cfg.sizes, seeds=seeds, steps=cfg.steps,
                      out_dir=out_dir / "runs", metrics_cfg=cfg.metrics, eval_split=cfg.eval_split)
    paths = write_ablation_tables(df, out_dir)
    summary = ablation_tables(df)["summary"]
    markdown = render_table(summary)
    (out_dir / "ablation_summary.md").write_text(markdown + "\n", encoding="utf-8")
    print(markdown)

    return _finish(out_dir, "ablate", cfg, {
        "runs": len(df),
        "failed": int((df["status"] != "ok").sum()),
        "tables": {name: str(p) for name, p in paths.items()},
        "summary": summary.reset_index().to_dict(orient="records"),
    })


def cmd_render(section: Dict[str, Any], args: argparse.Namespace, out_dir: Path) -> Dict[str, Any]:
    """Compose the 2.5D preview, export the mesh and an interactive HTML surface"""
    data = merge_overrides(section, {
        "dem": args.dem, "texture": args.texture, "factor": args.factor, "upsampler": args.upsampler,
        "z_scale": args.z_scale, "light_dir": _csv_floats(args.light), "seed": args.seed,
        "mesh": False if args.no_mesh else None,
    })
    cfg = build_config(RenderCommandConfig, data)
    dem = load_dem_file(_require(cfg.dem, "dem"))
    texture = read_texture_png(_require(cfg.texture, "texture"))

    preview = compose_preview(dem, texture, factor=cfg.factor, upsampler=cfg.upsampler,
                              light_dir=cfg.light_dir, z_scale=cfg.z_scale)
    preview_path = write_preview_png(out_dir / "preview.png", preview.image)
    figure_path = out_dir / "preview.html"
    surface_figure(dem, texture, z_scale=cfg.z_scale).write_html(figure_path, include_plotlyjs="cdn")

    result = {"preview": str(preview_path), "preview_sha256": _sha256(preview_path), "figure": str(figure_path)}
    if cfg.mesh:
        files = export_mesh(preview.dem, preview.texture, cfg.z_scale, out_dir / "terrain.obj")
        result["mesh"] = {k: str(v) for k, v in files.items()}
    return _finish(out_dir, "render", cfg, result)


HANDLERS = {
    "dataset-synth": cmd_dataset_synth,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "render": cmd_render,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file with one section per command")
    common.add_argument("--seed", type=int, help="Root seed for every random stream of the run")
    common.add_argument("--out", help="Output directory (default: runs/<command>)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="geodiffussr", description="DEM- and text-conditioned terrain texture generation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset-synth", parents=[common], help="Write a synthetic triplet dataset")
    p.add_argument("--n", type=int)
    p.add_argument("--presets", help=f"Comma-separated biome presets ({','.join(BIOME_PRESETS)})")
    p.add_argument("--coupling", type=float)
    p.add_argument("--chroma-noise", type=float)
    p.add_argument("--calibrate", action="store_true", help="Calibrate coupling to the configured dCor target")

    p = sub.add_parser("train", parents=[common], help="Train a model")
    p.add_argument("--dataset", help="manifest.json")
    p.add_argument("--resume", help="Checkpoint to resume from")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--size", choices=["S", "M", "L"])
    p.add_argument("--mode", choices=["full", "single_16", "none"])

    p = sub.add_parser("sample", parents=[common], help="Sample a texture for a DEM and prompt")
    p.add_argument("--checkpoint")
    p.add_argument("--dem", help="DEM PNG (normalized) or raw .npy grid")
    p.add_argument("--prompt")
    p.add_argument("--steps", type=int)
    p.add_argument("--cfg-scale", type=float)
    p.add_argument("--use-ema", action="store_true")

    p = sub.add_parser("eval", parents=[common], help="Compute the metrics report on a split")
    p.add_argument("--dataset")
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=list(SPLITS))
    p.add_argument("--generator", choices=list(GENERATORS))
    p.add_argument("--steps", type=int)
    p.add_argument("--cfg-scale", type=float)
    p.add_argument("--dcor-gt", type=float)
    p.add_argument("--use-ema", action="store_true")

    p = sub.add_parser("ablate", parents=[common], help="MCA-mode and model-size ablations")
    p.add_argument("--dataset")
    p.add_argument("--modes", help="Comma-separated MCA modes (full,single_16,none)")
    p.add_argument("--sizes", help="Comma-separated size presets (S,M,L)")
    p.add_argument("--seeds", type=int, help="Number of training seeds per variant")
    p.add_argument("--steps", type=int, help="Step budget per run")
    p.add_argument("--batch-size", type=int)

    p = sub.add_parser("render", parents=[common], help="2.5D preview, mesh export and interactive surface")
    p.add_argument("--dem")
    p.add_argument("--texture")
    p.add_argument("--factor", type=int)
    p.add_argument("--upsampler")
    p.add_argument("--z-scale", type=float)
    p.add_argument("--light", help="Light direction 'x,y,z'")
    p.add_argument("--no-mesh", action="store_true")
    return parser


def run(argv: Optional[Sequence[str]] = None) -> Dict[str, Any]:
    """Parse arguments and run one command; exceptions propagate"""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    sections = load_run_config(args.config)
    out_dir = Path(args.out or Path("runs") / args.command)
    out_dir.mkdir(parents=True, exist_ok=True)
    logger.info(f"Running '{args.command}' into {out_dir}")
    return HANDLERS[args.command](sections.get(args.command, {}), args, out_dir)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        run(argv)
    except (ConfigError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        logger.exception(f"Command failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
