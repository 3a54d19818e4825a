"""
Triplet dataset: manifest schema and I/O, DEM normalization, biome-stratified
splitting, seeded batching and the synthetic (DEM, texture, caption) generator
"""

import logging
import math
from functools import lru_cache
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from tqdm import tqdm

from utils.metrics import DCOR_GT, dcor_image_pair
from utils.run_config import derive_seed
from utils.tensor_io import read_dem_png, read_json, read_texture_png, write_dem_png, write_json, write_texture_png
from utils.tiles import BASE_TILE_SIZE, TerrainTile, TextureTile

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")
UNASSIGNED = "unassigned"
NORMALIZATION_MODES = ("per_tile_minmax", "global_affine")
DEFAULT_RATIOS = (0.8, 0.1, 0.1)

# Default coupling is calibrated on these seeds over every preset
CALIBRATION_SEEDS = (0, 1, 2, 3)
CALIBRATION_TOL = 2e-3


class ManifestError(ValueError):
    """Invalid manifest: duplicates, missing files or unsupported schema"""


@dataclass
class TripletRecord:
    record_id: str
    dem_path: str
    image_path: str
    caption: str
    biome: str
    aoi_id: str
    split: str = UNASSIGNED
    caption_path: Optional[str] = None

    def __post_init__(self):
        if not self.biome:
            raise ManifestError(f"Record '{self.record_id}' has an empty biome tag")
        if self.split not in SPLITS + (UNASSIGNED,):
            raise ManifestError(f"Record '{self.record_id}' has unknown split '{self.split}'")


@dataclass
class Manifest:
    records: List[TripletRecord]
    schema_version: int = SCHEMA_VERSION
    normalization: dict = field(default_factory=lambda: {"mode": "per_tile_minmax"})
    root: Optional[Path] = field(default=None, compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.records)

    def by_split(self, split: str) -> List[TripletRecord]:
        return [r for r in self.records if r.split == split]

    def biomes(self) -> List[str]:
        return sorted({r.biome for r in self.records})

    def resolve(self, relpath: str) -> Path:
        return (self.root or Path(".")) / relpath

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "normalization": dict(self.normalization),
            "records": [asdict(r) for r in self.records],
        }


# DEM normalization

def normalize_dem(
    raw: np.ndarray,
    mode: str = "per_tile_minmax",
    a: Optional[float] = None,
    b: Optional[float] = None,
) -> TerrainTile:
    """
    Map a raw elevation grid into [0,1]

    Args:
        raw (np.ndarray): H×W elevations
        mode (str): 'per_tile_minmax' or 'global_affine'
        a (float): Global affine scale (global_affine only)
        b (float): Global affine offset (global_affine only)

    Returns:
        TerrainTile: Normalized tile with the raw (min, max) in meta
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2:
        raise ValueError(f"Raw DEM must be 2D, got shape {raw.shape}")
    bad = np.argwhere(~np.isfinite(raw))
    if len(bad):
        raise ValueError(f"Raw DEM has a non-finite value at pixel {tuple(int(i) for i in bad[0])}")
    if mode not in NORMALIZATION_MODES:
        raise ValueError(f"Unknown normalization mode '{mode}', expected one of {NORMALIZATION_MODES}")

    lo, hi = float(raw.min()), float(raw.max())
    if mode == "global_affine":
        if a is None or b is None or a <= 0:
            raise ValueError(f"global_affine needs a > 0 and b, got a={a}, b={b}")
        elevation = np.clip(a * raw + b, 0.0, 1.0)
        return TerrainTile(elevation, meta=(lo, hi), normalization={"mode": mode, "a": float(a), "b": float(b)})

    if hi == lo:
        logger.warning(f"Flat DEM tile (elevation {lo}), normalizing to 0.5")
        elevation = np.full_like(raw, 0.5)
    else:
        elevation = (raw - lo) / (hi - lo)
    return TerrainTile(elevation, meta=(lo, hi), normalization={"mode": mode})


# Synthetic triplets

@dataclass
class SynthParams:
    """Procedural generator settings; coupling=None resolves to the calibrated default_coupling()"""

    coupling: Optional[float] = None
    chroma_noise: float = 0.03
    shading_strength: float = 0.6
    octaves: int = 4
    ridged: Optional[bool] = None
    size: int = BASE_TILE_SIZE
    relief_m: float = 1500.0

    def __post_init__(self):
        if self.chroma_noise < 0 or self.shading_strength < 0:
            raise ValueError("chroma_noise and shading_strength must be >= 0")
        if self.octaves < 1:
            raise ValueError(f"octaves must be >= 1, got {self.octaves}")
        if self.size < 2:
            raise ValueError(f"size must be >= 2, got {self.size}")
        if self.coupling is None:
            self.coupling = default_coupling(self.chroma_noise, self.shading_strength, self.octaves,
                                             self.ridged, self.size, self.relief_m)
        if not 0.0 <= self.coupling <= 1.0:
            raise ValueError(f"coupling must lie in [0,1], got {self.coupling}")


@dataclass(frozen=True)
class BiomePreset:
    name: str
    stops: Tuple[float, ...]
    colors: Tuple[Tuple[float, float, float], ...]
    ridged: bool
    base_cells: int
    persistence: float
    base_elevation_m: float
    covers: Tuple[str, ...]


BIOME_PRESETS: Dict[str, BiomePreset] = {
    "alpine": BiomePreset(
        name="alpine",
        stops=(0.0, 0.35, 0.7, 1.0),
        colors=((0.08, 0.20, 0.16), (0.20, 0.32, 0.30), (0.45, 0.50, 0.55), (0.93, 0.95, 1.00)),
        ridged=True, base_cells=3, persistence=0.55, base_elevation_m=1800.0,
        covers=(
            "snow-capped ridges above dark conifer valleys",
            "glaciated peaks with grey scree slopes and forested valley floors",
            "bare rock summits dusted with snow over dense spruce forest",
        ),
    ),
    "desert": BiomePreset(
        name="desert",
        stops=(0.0, 0.5, 1.0),
        colors=((0.78, 0.66, 0.45), (0.72, 0.50, 0.30), (0.55, 0.33, 0.20)),
        ridged=False, base_cells=2, persistence=0.45, base_elevation_m=400.0,
        covers=(
            "pale sand flats rising to rust-coloured mesas",
            "wind-swept dunes with reddish rocky outcrops",
            "dry ochre plains cut by dark eroded gullies",
        ),
    ),
    "forest": BiomePreset(
        name="forest",
        stops=(0.0, 0.6, 1.0),
        colors=((0.10, 0.30, 0.12), (0.22, 0.42, 0.18), (0.48, 0.50, 0.40)),
        ridged=False, base_cells=3, persistence=0.5, base_elevation_m=300.0,
        covers=(
            "dense broadleaf canopy over rolling hills",
            "continuous green forest with clearings on the higher ground",
            "mixed woodland thinning towards rocky hilltops",
        ),
    ),
    "tundra": BiomePreset(
        name="tundra",
        stops=(0.0, 0.5, 1.0),
        colors=((0.36, 0.40, 0.30), (0.55, 0.55, 0.45), (0.85, 0.86, 0.84)),
        ridged=False, base_cells=2, persistence=0.5, base_elevation_m=200.0,
        covers=(
            "olive moss and lichen plains with patchy late snow",
            "low shrub tundra fading into frost-bare uplands",
            "brownish wetland tundra below snow-streaked knolls",
        ),
    ),
    "coast": BiomePreset(
        name="coast",
        stops=(0.0, 0.3, 0.38, 0.6, 1.0),
        colors=((0.05, 0.18, 0.40), (0.15, 0.40, 0.55), (0.85, 0.80, 0.62), (0.30, 0.50, 0.25), (0.35, 0.40, 0.28)),
        ridged=False, base_cells=2, persistence=0.5, base_elevation_m=0.0,
        covers=(
            "turquoise shallows meeting a sandy shore and green hinterland",
            "deep blue sea along a beach backed by coastal scrub",
            "a lagoon coastline with pale sand and low vegetation",
        ),
    ),
    "volcanic": BiomePreset(
        name="volcanic",
        stops=(0.0, 0.5, 0.85, 1.0),
        colors=((0.25, 0.28, 0.18), (0.22, 0.18, 0.16), (0.12, 0.10, 0.10), (0.40, 0.16, 0.10)),
        ridged=True, base_cells=2, persistence=0.6, base_elevation_m=900.0,
        covers=(
            "black lava fields climbing to a reddish crater rim",
            "dark basalt slopes with sparse vegetation at the base",
            "ash-covered cones above scrubby lowlands",
        ),
    ),
}


def get_biome_preset(name: str) -> BiomePreset:
    if name not in BIOME_PRESETS:
        raise ValueError(f"Unknown biome preset '{name}', expected one of {sorted(BIOME_PRESETS)}")
    return BIOME_PRESETS[name]


def value_noise(size: int, rng: np.random.Generator, octaves: int = 4, base_cells: int = 2,
                persistence: float = 0.5, ridged: bool = False) -> np.ndarray:
    """
    Multi-octave value noise: random lattices, spline-interpolated onto the grid

    Returns:
        np.ndarray: size×size field (un-normalized)
    """
    out = np.zeros((size, size), dtype=np.float64)
    amplitude = 1.0
    for octave in range(octaves):
        cells = base_cells * 2 ** octave
        lattice = rng.random((cells + 1, cells + 1))
        coords = np.linspace(0.0, cells, size)
        rows, cols = np.meshgrid(coords, coords, indexing="ij")
        layer = ndimage.map_coordinates(lattice, [rows, cols], order=3, mode="nearest")
        if ridged:
            layer = 1.0 - np.abs(2.0 * layer - 1.0)
        out += amplitude * layer
        amplitude *= persistence
    return out


def palette_ramp(values: np.ndarray, preset: BiomePreset) -> np.ndarray:
    """Piecewise-linear colour ramp over [0,1], per channel"""
    colors = np.asarray(preset.colors)
    return np.stack([np.interp(values, preset.stops, colors[:, c]) for c in range(3)], axis=-1)


def _slope_shade(elevation: np.ndarray, relief: float) -> np.ndarray:
    gy, gx = np.gradient(elevation * relief)
    return 1.0 / np.sqrt(1.0 + gx ** 2 + gy ** 2)


def _relief_phrase(elevation_m: np.ndarray) -> str:
    spread = float(np.ptp(elevation_m))
    if spread < 300:
        return "gentle relief"
    if spread < 1000:
        return "moderate relief"
    return "steep, rugged relief"


def synth_triplet(
    seed: int,
    biome_preset: str,
    params: Optional[SynthParams] = None,
) -> Tuple[TerrainTile, TextureTile, str]:
    """
    Generate one deterministic (DEM, texture, caption) triplet

    The texture is driven by coupling·elevation + (1 − coupling)·independent noise
    through the biome palette, then slope-shaded and perturbed by chroma noise.

    Args:
        seed (int): Triplet seed
        biome_preset (str): One of BIOME_PRESETS
        params (SynthParams): Generator parameters

    Returns:
        Tuple[TerrainTile, TextureTile, str]: DEM, texture, caption
    """
    preset = get_biome_preset(biome_preset)
    params = params or SynthParams()
    ridged = preset.ridged if params.ridged is None else params.ridged

    dem_rng = np.random.default_rng(derive_seed(seed, preset.name, "dem"))
    driver_rng = np.random.default_rng(derive_seed(seed, preset.name, "driver"))
    chroma_rng = np.random.default_rng(derive_seed(seed, preset.name, "chroma"))
    caption_rng = np.random.default_rng(derive_seed(seed, preset.name, "caption"))

    field_ = value_noise(params.size, dem_rng, octaves=params.octaves, base_cells=preset.base_cells,
                         persistence=preset.persistence, ridged=ridged)
    raw = preset.base_elevation_m + params.relief_m * (field_ - field_.min()) / max(np.ptp(field_), 1e-12)
    dem = normalize_dem(raw)

    elevation = dem.elevation
    independent = driver_rng.random(elevation.shape)
    driver = params.coupling * elevation + (1.0 - params.coupling) * independent
    rgb = palette_ramp(driver, preset)

    shade = _slope_shade(elevation, relief=params.size / 4.0)
    rgb = rgb * (1.0 - params.coupling * params.shading_strength * (1.0 - shade))[..., None]
    if params.chroma_noise > 0:
        rgb = rgb + params.chroma_noise * chroma_rng.standard_normal(rgb.shape)
    texture = TextureTile(np.clip(rgb, 0.0, 1.0))

    cover = preset.covers[int(caption_rng.integers(len(preset.covers)))]
    caption = f"{cover}, {_relief_phrase(raw)}"
    return dem, texture, caption


def calibrate_coupling(
    target: float = DCOR_GT,
    presets: Optional[Sequence[str]] = None,
    seeds: Sequence[int] = tuple(range(8)),
    params: Optional[SynthParams] = None,
    tol: float = 1e-3,
    max_iter: int = 20,
) -> float:
    """
    Bisect the coupling so the mean dCor of generated triplets hits a target

    Relies on mean dCor increasing with coupling.

    Returns:
        float: Calibrated coupling in [0,1]
    """
    presets = list(presets or BIOME_PRESETS)
    params = params or SynthParams()

    def measure(coupling: float) -> float:
        p = replace(params, coupling=coupling)
        values = []
        for name in presets:
            for s in seeds:
                dem, texture, _ = synth_triplet(s, name, p)
                values.append(dcor_image_pair(texture, dem))
        return float(np.mean(values))

    lo, hi = 0.0, 1.0
    d_lo, d_hi = measure(lo), measure(hi)
    if not d_lo <= target <= d_hi:
        raise ValueError(f"Target dCor {target} outside the reachable range [{d_lo:.4f}, {d_hi:.4f}]")

    mid = (lo + hi) / 2
    for i in range(max_iter):
        mid = (lo + hi) / 2
        d_mid = measure(mid)
        logger.debug(f"calibrate_coupling iter {i}: coupling={mid:.5f} dcor={d_mid:.5f}")
        if abs(d_mid - target) < tol:
            break
        if d_mid < target:
            lo = mid
        else:
            hi = mid
    logger.info(f"Calibrated coupling {mid:.5f} for target dCor {target}")
    return mid


@lru_cache(maxsize=None)
def default_coupling(
    chroma_noise: float = 0.03,
    shading_strength: float = 0.6,
    octaves: int = 4,
    ridged: Optional[bool] = None,
    size: int = BASE_TILE_SIZE,
    relief_m: float = 1500.0,
) -> float:
    """Coupling whose corpus over all presets has mean dCor DCOR_GT; computed once per parameter set"""
    base = SynthParams(coupling=0.0, chroma_noise=chroma_noise, shading_strength=shading_strength,
                       octaves=octaves, ridged=ridged, size=size, relief_m=relief_m)
    return calibrate_coupling(DCOR_GT, presets=list(BIOME_PRESETS), seeds=CALIBRATION_SEEDS,
                              params=base, tol=CALIBRATION_TOL)


# Manifest I/O

def write_triplet(
    root: Union[str, Path],
    record_id: str,
    dem: TerrainTile,
    texture: TextureTile,
    caption: str,
    biome: str,
    aoi_id: Optional[str] = None,
) -> TripletRecord:
    """
    Write one triplet in the dataset layout (dems/, images/, captions/)

    Returns:
        TripletRecord: Record with manifest-relative paths
    """
    root = Path(root)
    for sub in ("dems", "images", "captions"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    dem_rel = f"dems/{record_id}.png"
    image_rel = f"images/{record_id}.png"
    caption_rel = f"captions/{record_id}.txt"

    write_dem_png(root / dem_rel, dem)
    write_json(root / f"dems/{record_id}.json", {
        "meta": list(dem.meta) if dem.meta is not None else None,
        "normalization": dem.normalization,
    })
    write_texture_png(root / image_rel, texture)
    (root / caption_rel).write_text(caption + "\n", encoding="utf-8")

    return TripletRecord(
        record_id=record_id,
        dem_path=dem_rel,
        image_path=image_rel,
        caption=caption,
        biome=biome,
        aoi_id=aoi_id or record_id,
        caption_path=caption_rel,
    )


def load_dem_file(path: Union[str, Path], normalization: Optional[dict] = None) -> TerrainTile:
    """
    DEM tile from a grayscale PNG (with its optional meta sidecar) or a raw .npy grid

    Raw grids are min-max normalized; PNGs are taken as already normalized.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"DEM file not found: {path}")
    if path.suffix.lower() == ".npy":
        return normalize_dem(np.load(path))

    elevation = read_dem_png(path)
    sidecar = path.with_suffix(".json")
    meta, normalization = None, dict(normalization or {"mode": "per_tile_minmax"})
    if sidecar.exists():
        data = read_json(sidecar)
        meta = tuple(data["meta"]) if data.get("meta") is not None else None
        normalization = data.get("normalization", normalization)
    return TerrainTile(elevation, meta=meta, normalization=normalization)


def load_triplet(manifest: Manifest, record: TripletRecord) -> Tuple[TerrainTile, TextureTile, str]:
    """Read the DEM (with its meta sidecar), texture and caption of a record"""
    dem = load_dem_file(manifest.resolve(record.dem_path), normalization=manifest.normalization)
    texture = read_texture_png(manifest.resolve(record.image_path))
    return dem, texture, record.caption


def validate_manifest(manifest: Manifest, check_files: bool = True) -> Manifest:
    """
    Check schema version, duplicate (dem, image) pairs and referenced files

    Raises:
        ManifestError: Listing every duplicate or missing path
    """
    if manifest.schema_version != SCHEMA_VERSION:
        raise ManifestError(f"Unsupported schema_version {manifest.schema_version}, expected {SCHEMA_VERSION}")
    if manifest.normalization.get("mode") not in NORMALIZATION_MODES:
        raise ManifestError(f"Unknown normalization {manifest.normalization}")

    seen, duplicates = set(), []
    ids, duplicate_ids = set(), []
    for r in manifest.records:
        pair = (r.dem_path, r.image_path)
        if pair in seen:
            duplicates.append(pair)
        seen.add(pair)
        if r.record_id in ids:
            duplicate_ids.append(r.record_id)
        ids.add(r.record_id)
    if duplicates:
        raise ManifestError(f"Duplicate (dem_path, image_path) pairs: {duplicates}")
    if duplicate_ids:
        raise ManifestError(f"Duplicate record ids: {duplicate_ids}")

    if check_files:
        missing = []
        for r in manifest.records:
            for rel in (r.dem_path, r.image_path, r.caption_path):
                if rel is not None and not manifest.resolve(rel).exists():
                    missing.append(str(manifest.resolve(rel)))
        if missing:
            raise ManifestError(f"{len(missing)} referenced files are missing: {missing}")
    return manifest


def write_manifest(manifest: Manifest, path: Union[str, Path]) -> Path:
    path = Path(path)
    if not path.parent.exists():
        raise FileNotFoundError(f"Manifest directory does not exist: {path.parent}")
    validate_manifest(manifest, check_files=False)
    return write_json(path, manifest.to_dict())


def load_manifest(path: Union[str, Path], check_files: bool = True) -> Manifest:
    """
    Read and validate a manifest; record paths resolve against its directory

    Returns:
        Manifest: Loaded manifest, records in file order
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Manifest not found: {path}")
    data = read_json(path)
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ManifestError(f"Unsupported schema_version {version}, expected {SCHEMA_VERSION}")
    try:
        records = [TripletRecord(**r) for r in data.get("records", [])]
    except TypeError as e:
        raise ManifestError(f"Malformed record in {path}: {e}") from e

    manifest = Manifest(
        records=records,
        schema_version=version,
        normalization=data.get("normalization", {"mode": "per_tile_minmax"}),
        root=path.parent,
    )
    validate_manifest(manifest, check_files=check_files)
    logger.info(f"Loaded manifest {path}: {len(records)} records, biomes {manifest.biomes()}")
    return manifest


# Splitting and batching

def largest_remainder(n: int, ratios: Sequence[float]) -> List[int]:
    """Integer counts summing to n, within one of n·ratio each"""
    quotas = [n * r for r in ratios]
    counts = [math.floor(q + 1e-9) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def stratified_split(
    manifest: Manifest,
    ratios: Sequence[float] = DEFAULT_RATIOS,
    by: str = "biome",
    seed: int = 0,
    strata: Optional[Sequence[str]] = None,
) -> Manifest:
    """
    Assign train/val/test within each stratum by seeded shuffle and largest-remainder counts

    Args:
        manifest (Manifest): Records to split
        ratios: (train, val, test) fractions summing to 1
        by (str): Record attribute defining the strata
        seed (int): Shuffle seed
        strata: Expected strata; any without records is an error

    Returns:
        Manifest: Copy with split fields assigned, record order unchanged
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != len(SPLITS):
        raise ValueError(f"Expected {len(SPLITS)} ratios (train, val, test), got {ratios}")
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"Split ratios must be non-negative and sum to 1, got {ratios}")
    if not manifest.records:
        raise ValueError("Cannot split an empty manifest")

    groups: Dict[str, List[int]] = {}
    for idx, record in enumerate(manifest.records):
        groups.setdefault(str(getattr(record, by)), []).append(idx)
    for name in strata or ():
        if name not in groups:
            raise ValueError(f"Stratum '{name}' has no records")

    assigned = list(manifest.records)
    for name in sorted(groups):
        members = groups[name]
        rng = np.random.default_rng(derive_seed(seed, "split", name))
        shuffled = [members[i] for i in rng.permutation(len(members))]
        start = 0
        for split, count in zip(SPLITS, largest_remainder(len(members), ratios)):
            for idx in shuffled[start:start + count]:
                assigned[idx] = replace(assigned[idx], split=split)
            start += count
        logger.debug(f"Stratum '{name}': {len(members)} records split")

    return replace(manifest, records=assigned)


def batch_iter(
    manifest: Manifest,
    split: str,
    batch_size: int,
    seed: int,
    epoch: int = 0,
) -> Iterator[List[TripletRecord]]:
    """
    Seeded shuffled batches of one split; the final partial batch is yielded

    Order is a function of (seed, epoch) only.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    records = manifest.by_split(split)
    if not records:
        raise ValueError(f"Split '{split}' is empty")
    order = np.random.default_rng(derive_seed(seed, "batches", epoch)).permutation(len(records))
    for start in range(0, len(records), batch_size):
        yield [records[i] for i in order[start:start + batch_size]]


def synthesize_dataset(
    n: int,
    presets: Sequence[str],
    out_dir: Union[str, Path],
    seed: int = 0,
    params: Optional[SynthParams] = None,
    ratios: Sequence[float] = DEFAULT_RATIOS,
) -> Manifest:
    """
    Write n synthetic triplets round-robin over presets, split them and write manifest.json

    Args:
        n (int): Number of triplets
        presets: Biome preset names
        out_dir: Dataset root
        seed (int): Root seed
        params (SynthParams): Generator parameters
        ratios: Split fractions

    Returns:
        Manifest: Written manifest (root set to out_dir)
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    presets = list(presets)
    if not presets:
        raise ValueError("At least one biome preset is required")
    for name in presets:
        get_biome_preset(name)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    logger.info(f"Synthesizing {n} triplets over {len(presets)} presets into {out_dir}")
    if n < len(presets):
        logger.warning(f"Only {n} triplets for {len(presets)} presets; {presets[n:]} get no records")

    records = []
    for i in tqdm(range(n), desc="Synthesizing", unit="triplet"):
        preset = presets[i % len(presets)]
        dem, texture, caption = synth_triplet(derive_seed(seed, "triplet", i), preset, params)
        records.append(write_triplet(out_dir, f"{preset}_{i:05d}", dem, texture, caption, preset,
                                     aoi_id=f"aoi_{i:05d}"))

    manifest = Manifest(records=records, root=out_dir)
    manifest = stratified_split(manifest, ratios=ratios, seed=derive_seed(seed, "split"),
                                strata=presets[:min(n, len(presets))])
    write_manifest(manifest, out_dir / "manifest.json")
    counts = {s: len(manifest.by_split(s)) for s in SPLITS}
    logger.info(f"Dataset written: {n} triplets, splits {counts}")
    return manifest
