"""
Data Cubes
MSC1 file format, band subsets, synthetic scenes with cloud masks,
TH30/TH70 datasets and the attack sets D and E
"""
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator
from scipy.ndimage import map_coordinates
from scipy.special import expit

from config import BAND_COUNT, CLOUD_BANDS, CONFIDENCE_THRESHOLD, DEFAULT_THREADS, THRESHOLDS, VISIBLE_BANDS
from grad import make_rng
from spectra import Spectrum
from utils import PipelineError, ensure_dir_exists

logger = logging.getLogger(__name__)

MSC1_MAGIC = b'MSC1'
MSC1_HEADER = struct.Struct('<4sIII')

TerrainKind = Literal['hills', 'desert', 'mixed']

# Per-band mean reflectance of the terrain presets (bands 1..13)
TERRAIN_PROFILES: Dict[str, np.ndarray] = {
    # vegetated: green peak, strong NIR plateau
    'hills': np.array([0.12, 0.09, 0.09, 0.07, 0.11, 0.22, 0.27, 0.28, 0.29, 0.10, 0.01, 0.18, 0.10]),
    # bare sand: rising red, bright SWIR
    'desert': np.array([0.16, 0.16, 0.22, 0.30, 0.33, 0.35, 0.37, 0.38, 0.39, 0.20, 0.02, 0.48, 0.42]),
}

# Dataset item seeds are offset per split so that splits never share a scene
SPLIT_SEED_OFFSETS = {
    'train': 0,
    'val': 1_000_000,
    'test': 2_000_000,
    'attack_train': 3_000_000,
    'attack_test': 4_000_000,
}


class CubeFormatError(PipelineError):
    """Raised on unreadable or invalid MSC1 files"""
    pass


class SceneError(PipelineError):
    """Raised on invalid scene generation or labelling requests"""
    pass


class AttackSetError(PipelineError):
    """Raised when not enough non-cloudy cubes pass the detector filter"""

    def __init__(self, message: str, achieved: int = 0, requested: int = 0):
        self.achieved = achieved
        self.requested = requested
        super().__init__(message)


# ============================================================
# TYPES
# ============================================================

@dataclass(frozen=True)
class BandSubset:
    """Sorted unique 1-based band indices"""
    indices: Tuple[int, ...]

    def __post_init__(self):
        idx = tuple(sorted(set(int(i) for i in self.indices)))
        if not idx:
            raise SceneError("band subset is empty")
        if idx[0] < 1 or idx[-1] > BAND_COUNT:
            raise SceneError(f"band subset {list(idx)} outside 1..{BAND_COUNT}")
        object.__setattr__(self, 'indices', idx)

    @property
    def positions(self) -> Tuple[int, ...]:
        return tuple(i - 1 for i in self.indices)

    def __len__(self) -> int:
        return len(self.indices)


BANDS_C = BandSubset(CLOUD_BANDS)
BANDS_V = BandSubset(VISIBLE_BANDS)
ALL_BANDS = BandSubset(tuple(range(1, BAND_COUNT + 1)))


@dataclass(frozen=True)
class DataCube:
    data: np.ndarray
    ground_resolution_m: float = 20.0
    terrain: str = ''
    seed: Optional[int] = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise CubeFormatError(f"data cube must be HxWxB, got shape {data.shape}")
        if not np.all(np.isfinite(data)) or data.min() < 0 or data.max() > 1:
            raise CubeFormatError("data cube values must lie in [0, 1]")
        object.__setattr__(self, 'data', data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class CloudMask:
    grid: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'grid', np.asarray(self.grid, dtype=bool))

    @property
    def cloud_fraction(self) -> float:
        return float(np.count_nonzero(self.grid)) / self.grid.size


class Label(str, Enum):
    CLOUDY = 'cloudy'
    NOT_CLOUDY = 'not_cloudy'

    @property
    def target(self) -> float:
        return 1.0 if self is Label.CLOUDY else 0.0


@dataclass
class LabeledDataset:
    items: List[Tuple[DataCube, Label]]
    threshold: float
    split: str = 'train'

    def __len__(self) -> int:
        return len(self.items)

    @property
    def targets(self) -> np.ndarray:
        return np.array([label.target for _, label in self.items])

    def class_counts(self) -> Dict[str, int]:
        t = self.targets
        return {Label.CLOUDY.value: int(t.sum()), Label.NOT_CLOUDY.value: int(len(t) - t.sum())}

    def band_stack(self, subset: BandSubset) -> np.ndarray:
        """N x H x W x |subset| float32 stack of every item"""
        return np.stack([extract_bands(cube, subset) for cube, _ in self.items])


# ============================================================
# MSC1 I/O
# ============================================================

def write_cube(cube: DataCube, path: str):
    """Header MSC1 + H, W, B as little-endian u32, then '<f4' samples, band fastest"""
    ensure_dir_exists(os.path.dirname(path))
    h, w, b = cube.data.shape
    with open(path, 'wb') as f:
        f.write(MSC1_HEADER.pack(MSC1_MAGIC, h, w, b))
        f.write(np.ascontiguousarray(cube.data, dtype='<f4').tobytes())


def read_cube(path: str, ground_resolution_m: float = 20.0) -> DataCube:
    if not os.path.exists(path):
        raise CubeFormatError(f"cube file not found: {path}")
    with open(path, 'rb') as f:
        raw = f.read()
    if len(raw) < MSC1_HEADER.size:
        raise CubeFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, h, w, b = MSC1_HEADER.unpack_from(raw)
    if magic != MSC1_MAGIC:
        raise CubeFormatError(f"{path}: bad magic {magic!r}")
    expected = h * w * b * 4
    payload = raw[MSC1_HEADER.size:]
    if len(payload) != expected:
        raise CubeFormatError(f"{path}: truncated payload, expected {expected} bytes for "
                              f"{h}x{w}x{b}, found {len(payload)}")
    data = np.frombuffer(payload, dtype='<f4').reshape(h, w, b).astype(np.float32)
    if not np.all(np.isfinite(data)) or (data.size and (data.min() < 0 or data.max() > 1)):
        raise CubeFormatError(f"{path}: values outside [0, 1]")
    return DataCube(data, ground_resolution_m)


def extract_bands(cube: Union[DataCube, np.ndarray], subset: BandSubset) -> np.ndarray:
    """H x W x |subset| view of the given bands, in sorted band order"""
    data = cube.data if isinstance(cube, DataCube) else np.asarray(cube)
    if data.shape[-1] < subset.indices[-1]:
        raise SceneError(f"cube has {data.shape[-1]} bands, subset needs band {subset.indices[-1]}")
    return data[..., list(subset.positions)]


# ============================================================
# SCENE GENERATION
# ============================================================

class SceneCounts(BaseModel):
    train: int = Field(400, ge=0)
    val: int = Field(100, ge=0)
    test: int = Field(100, ge=0)
    attack_train: int = Field(20, ge=0)
    attack_test: int = Field(100, ge=0)


class ScenegenConfig(BaseModel):
    size: int = Field(128, ge=0)
    # None draws a density uniformly per scene
    cloud_density: Optional[float] = Field(None, ge=0.0, le=1.0)
    terrain: Union[TerrainKind, List[TerrainKind]] = Field(default_factory=lambda: ['hills', 'desert', 'mixed'])
    seed: int = 0
    counts: SceneCounts = Field(default_factory=SceneCounts)
    cloud_margin: float = Field(0.25, ge=0.0, le=1.0)
    cloud_softness: float = Field(0.02, gt=0.0)
    noise_octaves: int = Field(4, ge=1)
    attack_max_density: float = Field(0.15, ge=0.0, le=1.0)
    ground_resolution_m: float = Field(20.0, gt=0.0)
    # stage-1 and stage-2 labelling thresholds on cloud fraction
    thresholds: Tuple[float, float] = THRESHOLDS

    @field_validator('thresholds')
    @classmethod
    def _check_thresholds(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        low, high = value
        if not 0.0 < low < high < 1.0:
            raise ValueError(f"thresholds must satisfy 0 < low < high < 1, got {list(value)}")
        return value

    def terrain_for(self, seed: int) -> str:
        kinds = [self.terrain] if isinstance(self.terrain, str) else list(self.terrain)
        if not kinds:
            raise SceneError("no terrain kind configured")
        return kinds[seed % len(kinds)]


def _value_noise(rng: np.random.Generator, size: int, octaves: int, base_cells: int = 3) -> np.ndarray:
    """Multi-octave value noise in [0, 1]: random lattices spline-upsampled and summed"""
    total = np.zeros((size, size))
    amplitude, norm = 1.0, 0.0
    for octave in range(octaves):
        cells = base_cells * 2 ** octave
        lattice = rng.random((cells + 1, cells + 1))
        coords = np.linspace(0.0, cells, size)
        rows, cols = np.meshgrid(coords, coords, indexing='ij')
        total += amplitude * map_coordinates(lattice, [rows, cols], order=3, mode='nearest')
        norm += amplitude
        amplitude *= 0.5
    return np.clip(total / norm, 0.0, 1.0)


def _terrain(rng: np.random.Generator, kind: str, size: int, octaves: int) -> np.ndarray:
    relief = _value_noise(rng, size, octaves)
    grain = _value_noise(rng, size, octaves, base_cells=8)
    if kind == 'mixed':
        blend = expit((_value_noise(rng, size, 2) - 0.5) * 12.0)[..., None]
        profile = blend * TERRAIN_PROFILES['hills'] + (1.0 - blend) * TERRAIN_PROFILES['desert']
    elif kind in TERRAIN_PROFILES:
        profile = np.broadcast_to(TERRAIN_PROFILES[kind], (size, size, BAND_COUNT))
    else:
        raise SceneError(f"unknown terrain kind '{kind}'")
    return profile * (0.75 + 0.5 * relief[..., None]) + 0.02 * (grain[..., None] - 0.5)


def _cloud_rank_field(rng: np.random.Generator, size: int, octaves: int) -> np.ndarray:
    """Cloud-likeness ranks in [0, 1); 0 is the most cloud-like pixel"""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    field_ = np.zeros((size, size))
    for _ in range(int(rng.integers(3, 8))):
        cy, cx = rng.uniform(0, size, 2)
        ry, rx = rng.uniform(0.1, 0.35, 2) * size
        theta = rng.uniform(0.0, np.pi)
        u = (yy - cy) * np.cos(theta) + (xx - cx) * np.sin(theta)
        v = -(yy - cy) * np.sin(theta) + (xx - cx) * np.cos(theta)
        field_ += np.exp(-0.5 * ((u / ry) ** 2 + (v / rx) ** 2))
    field_ += 0.3 * _value_noise(rng, size, octaves)
    order = np.argsort(-field_, axis=None, kind='stable')
    ranks = np.empty(size * size)
    ranks[order] = np.arange(size * size)
    return (ranks / (size * size)).reshape(size, size)


def synth_scene(seed: int, params: ScenegenConfig,
                cloud_density: Optional[float] = None) -> Tuple[DataCube, CloudMask]:
    """Deterministic synthetic scene: value-noise terrain under soft elliptical clouds.

    Cloud alpha is a sigmoid of (density - rank), so the mask (alpha > 0.5)
    covers the `density` share of most cloud-like pixels.
    """
    size = params.size
    if size <= 0:
        raise SceneError(f"scene size must be positive, got {size}")
    rng = make_rng(seed, 'scene')
    kind = params.terrain_for(seed)

    density = cloud_density if cloud_density is not None else params.cloud_density
    if density is None:
        density = float(rng.uniform(0.0, 1.0))
    if not 0.0 <= density <= 1.0:
        raise SceneError(f"cloud density {density} outside [0, 1]")

    terrain = np.clip(_terrain(rng, kind, size, params.noise_octaves), 0.0, 1.0)
    ranks = _cloud_rank_field(rng, size, params.noise_octaves)
    alpha = expit((density - ranks) / params.cloud_softness)

    cloud = np.full(BAND_COUNT, 0.55)
    bright = list(BANDS_C.positions)
    cloud[bright] = np.maximum(cloud[bright], terrain[..., bright].max(axis=(0, 1)) + params.cloud_margin)
    cloud = np.clip(cloud, 0.0, 1.0)

    data = (1.0 - alpha[..., None]) * terrain + alpha[..., None] * cloud
    cube = DataCube(np.clip(data, 0.0, 1.0).astype(np.float32), params.ground_resolution_m, kind, seed)
    return cube, CloudMask(alpha > 0.5)


def label_by_threshold(mask: CloudMask, threshold: float) -> Label:
    """cloudy iff cloud_fraction > threshold (strict)"""
    if not 0.0 < threshold < 1.0:
        raise SceneError(f"threshold {threshold} outside (0, 1)")
    return Label.CLOUDY if mask.cloud_fraction > threshold else Label.NOT_CLOUDY


# ============================================================
# DATASETS
# ============================================================

@dataclass(frozen=True)
class SceneRecord:
    file: str
    split: str
    terrain: str
    seed: int
    cloud_fraction: float

    def label(self, threshold: float) -> Label:
        return Label.CLOUDY if self.cloud_fraction > threshold else Label.NOT_CLOUDY


def split_seeds(params: ScenegenConfig, split: str, count: Optional[int] = None) -> List[int]:
    if split not in SPLIT_SEED_OFFSETS:
        raise SceneError(f"unknown split '{split}'")
    n = getattr(params.counts, split) if count is None else count
    base = params.seed + SPLIT_SEED_OFFSETS[split]
    return list(range(base, base + n))


def synth_attack_scene(seed: int, params: ScenegenConfig) -> Tuple[DataCube, CloudMask]:
    """Scene with light cover only: density uniform on [0, attack_max_density]"""
    density = float(make_rng(seed, 'attack-density').uniform(0.0, params.attack_max_density))
    return synth_scene(seed, params, density)


def _parallel_scenes(seeds: Sequence[int], params: ScenegenConfig, threads: int,
                     attack: bool = False) -> List[Tuple[DataCube, CloudMask]]:
    def one(seed: int):
        return synth_attack_scene(seed, params) if attack else synth_scene(seed, params)

    if threads <= 1 or len(seeds) < 2:
        return [one(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, seeds))


def synth_labeled_datasets(params: ScenegenConfig, split: str, count: Optional[int] = None,
                           thresholds: Optional[Sequence[float]] = None,
                           threads: int = 1) -> Dict[float, LabeledDataset]:
    """In-memory datasets of one split, one labelling per threshold, sharing the cubes"""
    thresholds = params.thresholds if thresholds is None else thresholds
    scenes = _parallel_scenes(split_seeds(params, split, count), params, threads)
    return {
        th: LabeledDataset([(cube, label_by_threshold(mask, th)) for cube, mask in scenes], th, split)
        for th in thresholds
    }


def threshold_column(threshold: float) -> str:
    """labels.csv column of a threshold: 0.3 -> th30"""
    return f"th{int(round(threshold * 100))}"


def write_dataset(params: ScenegenConfig, out_dir: str,
                  splits: Iterable[str] = ('train', 'val', 'test'),
                  threads: int = DEFAULT_THREADS) -> pd.DataFrame:
    """Write cubes/<split>_<n>.msc1 and labels.csv under out_dir; returns the label table"""
    cube_dir = os.path.join(out_dir, 'cubes')
    ensure_dir_exists(cube_dir)
    rows = []
    for split in splits:
        seeds = split_seeds(params, split)
        scenes = _parallel_scenes(seeds, params, threads)
        for n, (seed, (cube, mask)) in enumerate(zip(seeds, scenes)):
            rel = os.path.join('cubes', f"{split}_{n:05d}.msc1")
            write_cube(cube, os.path.join(out_dir, rel))
            record = {
                'file': rel.replace(os.sep, '/'),
                'split': split,
                'terrain': cube.terrain,
                'seed': seed,
                'cloud_fraction': mask.cloud_fraction,
            }
            for th in params.thresholds:
                record[threshold_column(th)] = int(label_by_threshold(mask, th) is Label.CLOUDY)
            rows.append(record)
        logger.info(f"DATASET_SPLIT: {split} -> {len(seeds)} cubes")

    columns = ['file', 'split', 'terrain', 'seed', 'cloud_fraction']
    labels = pd.DataFrame(rows, columns=columns + [threshold_column(th) for th in params.thresholds])
    labels.to_csv(os.path.join(out_dir, 'labels.csv'), index=False, float_format='%.17g', lineterminator='\n')
    return labels


def load_labeled_dataset(data_dir: str, threshold: float, split: str) -> LabeledDataset:
    """Read a split of a written dataset, labelled at the given threshold"""
    labels_path = os.path.join(data_dir, 'labels.csv')
    if not os.path.exists(labels_path):
        raise SceneError(f"labels file not found: {labels_path}")
    labels = pd.read_csv(labels_path)
    rows = labels[labels['split'] == split]
    if rows.empty:
        raise SceneError(f"{labels_path}: no items in split '{split}'")
    column = threshold_column(threshold)

    items = []
    for row in rows.itertuples(index=False):
        record = SceneRecord(row.file, row.split, row.terrain, int(row.seed), float(row.cloud_fraction))
        label = record.label(threshold)
        if column in labels.columns and int(getattr(row, column)) != int(label is Label.CLOUDY):
            raise SceneError(f"{labels_path}: stored {column} label of {row.file} disagrees with its cloud fraction")
        cube = read_cube(os.path.join(data_dir, row.file))
        items.append((DataCube(cube.data, cube.ground_resolution_m, record.terrain, record.seed), label))
    return LabeledDataset(items, threshold, split)


def synth_material_library(n: int = 80, seed: int = 0,
                           wavelengths_nm: Optional[np.ndarray] = None) -> List[Spectrum]:
    """Smooth paint-like reflectance curves: pigment absorption edges plus NIR rise"""
    if n < 1:
        raise SceneError(f"material count must be >= 1, got {n}")
    wl = np.arange(350.0, 2501.0, 10.0) if wavelengths_nm is None else np.asarray(wavelengths_nm, dtype=np.float64)
    rng = make_rng(seed, 'materials')
    library = []
    for q in range(n):
        base = rng.uniform(0.03, 0.35)
        edge = rng.uniform(420.0, 720.0)
        rise = rng.uniform(0.1, 0.6)
        curve = base + rise * expit((wl - edge) / rng.uniform(10.0, 40.0))
        for _ in range(int(rng.integers(0, 3))):
            center = rng.uniform(400.0, 2300.0)
            width = rng.uniform(20.0, 200.0)
            curve += rng.uniform(-0.15, 0.15) * np.exp(-0.5 * ((wl - center) / width) ** 2)
        # binder water absorption
        curve *= 1.0 - 0.25 * np.exp(-0.5 * ((wl - 1940.0) / 60.0) ** 2)
        library.append(Spectrum(wl.copy(), np.clip(curve, 0.0, 0.98), f"paint_{q + 1:03d}"))
    return library


# ============================================================
# ATTACK SETS
# ============================================================

@dataclass
class AttackSets:
    train: List[DataCube]
    test: List[DataCube]
    roa: DataCube
    train_confidences: List[float] = field(default_factory=list)
    test_confidences: List[float] = field(default_factory=list)


def _filter_non_cloudy(params: ScenegenConfig, detector, split: str, need: int,
                       threads: int) -> Tuple[List[DataCube], List[float]]:
    from detector import predict_batch

    budget = 10 * need
    seeds = split_seeds(params, split, budget)
    kept: List[DataCube] = []
    confidences: List[float] = []
    chunk = max(8, need)
    for start in range(0, budget, chunk):
        block = seeds[start:start + chunk]
        cubes_ = [cube for cube, _ in _parallel_scenes(block, params, threads, attack=True)]
        scores = predict_batch(detector, np.stack([extract_bands(c, detector.arch.input_subset) for c in cubes_]))
        for cube, score in zip(cubes_, scores):
            if score <= CONFIDENCE_THRESHOLD:
                kept.append(cube)
                confidences.append(float(score))
                if len(kept) == need:
                    return kept, confidences
    raise AttackSetError(
        f"only {len(kept)} of {need} '{split}' cubes scored <= {CONFIDENCE_THRESHOLD} "
        f"within the retry budget of {budget} scenes", achieved=len(kept), requested=need)


def select_roa(cubes: Sequence[DataCube], kind: str) -> DataCube:
    """First cube of the requested terrain kind"""
    for cube in cubes:
        if cube.terrain == kind:
            return cube
    raise AttackSetError(f"no '{kind}' cube available to serve as region of attack")


def build_attack_sets(params: ScenegenConfig, detector, sizes: Tuple[int, int],
                      roa_kind: Optional[str] = 'hills', threads: int = 1) -> AttackSets:
    """D and E: non-cloudy scenes (detector confidence <= 0.5) from disjoint seed ranges; T from D"""
    n_train, n_test = sizes
    if n_train < 1 or n_test < 0:
        raise AttackSetError(f"invalid attack set sizes {sizes}")
    train, train_conf = _filter_non_cloudy(params, detector, 'attack_train', n_train, threads)
    test, test_conf = ([], []) if n_test == 0 else _filter_non_cloudy(params, detector, 'attack_test',
                                                                     n_test, threads)
    roa = select_roa(train, roa_kind) if roa_kind else train[0]
    logger.info(f"ATTACK_SETS: |D|={len(train)} |E|={len(test)} roa={roa_kind} "
                f"mean_conf_D={np.mean(train_conf):.3f}")
    return AttackSets(train, test, roa, train_conf, test_conf)
