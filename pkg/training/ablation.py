"""
Ablation harness: MCA injection modes and model sizes trained under identical budgets
"""

import logging
import re
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from models.dem_encoder import load_encoder_weights
from models.unet_mca import SIZE_PRESETS, MCAMode, count_parameters, unet_config_for
from training.trainer import CheckpointGenerator, TrainConfig, evaluate, resolve_text_provider, train
from utils.data_pipeline import Manifest
from utils.metrics import FID_KEY, MetricsConfig

logger = logging.getLogger(__name__)

METRIC_COLUMNS = (FID_KEY, "lpips", "mse", "delta_dcor")
DEFAULT_MODES = (MCAMode.FULL, MCAMode.SINGLE_16, MCAMode.NONE)
DEFAULT_SIZES = ("S", "M", "L")

MODE_LABELS = {
    MCAMode.FULL: "Full MCA",
    MCAMode.SINGLE_16: "Single MCA (16)",
    MCAMode.NONE: "Non-MCA",
}

# Published full-scale results (pretrained FID/LPIPS networks, 380K triplets)
PUBLISHED_TABLE_MCA = pd.DataFrame(
    {
        "fid": [10.29, 14.50, 20.24],
        "lpips": [0.066, 0.085, 0.098],
        "mse": [0.0166, 0.0144, 0.0184],
        "delta_dcor": [0.0016, 0.0196, 0.0756],
    },
    index=pd.Index(["Full MCA", "Single MCA (16)", "Non-MCA"], name="variant"),
)

PUBLISHED_TABLE_SIZE = pd.DataFrame(
    {
        "fid": [23.08, 14.50, 10.29],
        "lpips": [0.121, 0.085, 0.066],
        "mse": [0.0235, 0.0144, 0.0166],
        "delta_dcor": [0.0656, 0.0196, 0.0016],
    },
    index=pd.Index(["45M", "75M", "102M"], name="variant"),
)


def size_label(size: str) -> str:
    return f"Size {size}"


def _variants(modes: Sequence[Union[str, MCAMode]], sizes: Sequence[str], base_size: str) -> List[dict]:
    variants = []
    for mode in modes:
        mode = MCAMode(mode)
        variants.append({"variant": MODE_LABELS[mode], "group": "mca", "size": base_size, "mode": mode})
    for size in sizes:
        if size not in SIZE_PRESETS:
            raise ValueError(f"Unknown size preset '{size}', expected one of {sorted(SIZE_PRESETS)}")
        variants.append({"variant": size_label(size), "group": "size", "size": size, "mode": MCAMode.FULL})
    return variants


def ablation_run(
    base_cfg: TrainConfig,
    dataset: Manifest,
    modes: Sequence[Union[str, MCAMode]] = DEFAULT_MODES,
    sizes: Sequence[str] = DEFAULT_SIZES,
    seeds: Sequence[int] = (0, 1, 2),
    steps: Optional[int] = None,
    out_dir: Optional[Union[str, Path]] = None,
    metrics_cfg: Optional[MetricsConfig] = None,
    eval_split: str = "val",
) -> pd.DataFrame:
    """
    Train and evaluate every variant under the same budget, data and eval protocol

    Mode variants use the base config's size preset; size variants use full MCA.
    A (size, mode, seed) combination shared by both groups is trained once.
    Failed runs are recorded with their error in 'status' and the harness continues.

    Args:
        base_cfg (TrainConfig): Shared recipe (lr, batch size, sampler, ...)
        dataset (Manifest): Split dataset
        modes: MCA modes to compare
        sizes: Size presets to compare
        seeds: Training seeds per variant
        steps (int): Step budget per run (defaults to base_cfg.max_steps)
        out_dir: Directory for per-run checkpoints and logs
        metrics_cfg (MetricsConfig): Metric settings
        eval_split (str): Split used for metrics and validation loss

    Returns:
        pd.DataFrame: One row per (variant, seed)
    """
    base_size = base_cfg.unet.size_preset
    variants = _variants(modes, sizes, base_size)
    if not variants:
        raise ValueError("No ablation variants requested")
    if not seeds:
        raise ValueError("At least one seed is required")

    encoder = load_encoder_weights(base_cfg.encoder_weights, preset=base_cfg.encoder_preset)
    provider = resolve_text_provider(base_cfg)
    budget = steps or base_cfg.max_steps
    logger.info(f"Ablation: {len(variants)} variants × {len(seeds)} seeds, {budget} steps each")

    finished: Dict[tuple, dict] = {}
    rows = []
    for variant in variants:
        unet_cfg = unet_config_for(
            variant["size"],
            variant["mode"],
            text_dim=base_cfg.unet.text_dim,
            se_reduction=base_cfg.unet.se_reduction,
            dem_channels=encoder.preset.channels,
        )
        n_params = count_parameters(unet_cfg)
        for seed in seeds:
            key = (variant["size"], variant["mode"], seed)
            row = {
                "variant": variant["variant"],
                "group": variant["group"],
                "size": variant["size"],
                "mode": variant["mode"].value,
                "seed": seed,
                "params": n_params,
            }
            if key in finished:
                rows.append({**row, **finished[key]})
                continue

            result = {m: np.nan for m in METRIC_COLUMNS}
            result.update({"dcor": np.nan, "val_loss": np.nan, "status": "ok"})
            try:
                cfg = replace(base_cfg, seed=seed, max_steps=budget, unet=unet_cfg)
                run_dir = None
                if out_dir is not None:
                    run_dir = Path(out_dir) / f"{variant['size']}_{variant['mode'].value}" / f"seed_{seed}"
                trainer = train(cfg, dataset, run_dir, encoder=encoder, text_provider=provider)
                generator = CheckpointGenerator(trainer.model, cfg, encoder=encoder, text_provider=provider)
                report = evaluate(generator, dataset, split=eval_split, metrics_cfg=metrics_cfg)
                result.update({
                    FID_KEY: report.fid if report.fid is not None else np.nan,
                    "lpips": report.lpips if report.lpips is not None else np.nan,
                    "mse": report.mse,
                    "delta_dcor": report.delta_dcor,
                    "dcor": report.dcor,
                    "val_loss": trainer.validation_loss(eval_split),
                })
                logger.info(f"{variant['variant']} seed {seed}: mse={report.mse:.5f} delta_dcor={report.delta_dcor:.5f}")
            except Exception as e:
                logger.error(f"Ablation run {variant['variant']} seed {seed} failed: {e}")
                result["status"] = f"failed: {e}"
            finished[key] = result
            rows.append({**row, **result})

    df = pd.DataFrame(rows)
    n_failed = int((df["status"] != "ok").sum())
    logger.info(f"Ablation completed: {len(df)} runs, {n_failed} failed")
    return df


def _ordered_variants(df: pd.DataFrame) -> List[str]:
    return list(dict.fromkeys(df["variant"]))


def seed_table(df: pd.DataFrame, metric: str) -> pd.DataFrame:
    """Rows = variant, columns = seed_<k> plus their mean (failed runs are NaN)"""
    table = df.pivot(index="variant", columns="seed", values=metric)
    table = table.reindex(_ordered_variants(df))
    table.columns = [f"seed_{s}" for s in table.columns]
    table["mean"] = table.mean(axis=1, skipna=True)
    return table


def summary_table(df: pd.DataFrame) -> pd.DataFrame:
    """Rows = variant, columns = metric means over successful seeds"""
    ok = df[df["status"] == "ok"]
    summary = ok.groupby("variant", sort=False)[list(METRIC_COLUMNS) + ["val_loss"]].mean()
    summary = summary.reindex(_ordered_variants(df))
    summary["failed_runs"] = df.groupby("variant", sort=False)["status"].apply(lambda s: int((s != "ok").sum()))
    return summary


def ablation_tables(df: pd.DataFrame) -> Dict[str, pd.DataFrame]:
    """
    Pivot the long-form ablation frame into the summary and per-metric seed tables

    Returns:
        dict: 'summary' plus one entry per metric column and 'val_loss'
    """
    tables = {"summary": summary_table(df)}
    for metric in list(METRIC_COLUMNS) + ["val_loss"]:
        tables[metric] = seed_table(df, metric)
    return tables


def metric_slug(name: str) -> str:
    return re.sub(r"[^0-9a-zA-Z]+", "_", name).strip("_")


def write_ablation_tables(df: pd.DataFrame, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Write the long-form frame and every pivoted table as CSV"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"runs": out_dir / "ablation_runs.csv"}
    df.to_csv(paths["runs"], index=False)
    for name, table in ablation_tables(df).items():
        path = out_dir / f"ablation_{metric_slug(name)}.csv"
        table.to_csv(path)
        paths[name] = path
    return paths


def render_table(table: pd.DataFrame, floatfmt: str = ".4f") -> str:
    """Markdown rendering of a results table"""
    return table.to_markdown(floatfmt=floatfmt)
