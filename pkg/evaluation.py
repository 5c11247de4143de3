"""
Attack Evaluation
Accuracy/Cloudy metrics on the attack sets, experiment grids (loss ablations,
cube configurations, detector mitigations) and cube renderings.
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Sequence

import numpy as np
import pandas as pd
from PIL import Image
from pydantic import BaseModel, Field, model_validator

from attack import (AttackConfig, CubeParams, CubeSlot, center_transforms, embed, init_params, optimize_cube,
                    realize_cube, sample_transform)
from config import CONFIDENCE_THRESHOLD, DEFAULT_THREADS
from cubes import BANDS_C, BANDS_V, AttackSets, DataCube, extract_bands, select_roa
from detector import DetectorModel, predict_batch
from grad import make_rng
from spectra import SpectralIndex
from utils import PipelineError, ensure_dir_exists, sanitize_filename, sha256_json

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ['row_name', 'acc_train', 'acc_test', 'cloudy_train', 'cloudy_test', 'seed_count']

# RGB channel order of the renderings, as 1-based bands
VISIBLE_RGB = (4, 3, 2)
FALSE_COLOUR_RGB = (8, 2, 1)


class EvaluationError(PipelineError):
    """Raised on invalid evaluation inputs or grids"""
    pass


# ============================================================
# METRICS
# ============================================================

def accuracy_from(confidences: Sequence[float]) -> float:
    """Fraction of items not detected as cloudy (confidence <= 0.5)"""
    conf = np.asarray(confidences, dtype=np.float64)
    return float(np.mean(conf <= CONFIDENCE_THRESHOLD))


def cloudy_from(confidences: Sequence[float]) -> float:
    """Mean cloud confidence"""
    return float(np.mean(np.asarray(confidences, dtype=np.float64)))


@dataclass
class AttackReport:
    accuracy_train: float
    accuracy_test: float
    cloudy_train: float
    cloudy_test: float
    train_confidences: List[float]
    test_confidences: List[float]
    config_hash: str = ''
    seeds: List[int] = field(default_factory=list)

    @classmethod
    def from_confidences(cls, train: Sequence[float], test: Sequence[float], config_hash: str = '',
                         seeds: Optional[List[int]] = None) -> 'AttackReport':
        return cls(accuracy_from(train), accuracy_from(test), cloudy_from(train), cloudy_from(test),
                   [float(c) for c in train], [float(c) for c in test], config_hash, list(seeds or []))


def score_dataset(detector: DetectorModel, cubes: Sequence[DataCube], params: Optional[Sequence[CubeParams]],
                  index: SpectralIndex, cfg: AttackConfig, policy: Literal['random', 'center'] = 'random',
                  seed: int = 0, split: str = 'test') -> List[float]:
    """Detector confidence of every cube with the optimized cube(s) embedded"""
    if not cubes:
        raise EvaluationError(f"cannot evaluate on an empty '{split}' dataset")
    if policy not in ('random', 'center'):
        raise EvaluationError(f"unknown embed policy '{policy}'")
    patches = [np.clip(realize_cube(p, index), 0.0, 1.0) for p in params] if params else []

    stacks = []
    for k, host in enumerate(cubes):
        cube = host
        if patches:
            size = (host.height, host.width)
            if policy == 'random':
                transforms = sample_transform(make_rng(seed, 'eval', split, k), cfg, size, bands=host.bands)
            else:
                transforms = center_transforms(size, cfg.layout)
            for patch, t in zip(patches, transforms):
                cube = embed(cube, patch, t)
        stacks.append(extract_bands(cube, detector.arch.input_subset))
    return [float(c) for c in predict_batch(detector, np.stack(stacks))]


def attack_metrics(detector: DetectorModel, sets: AttackSets, params: Optional[Sequence[CubeParams]],
                   index: SpectralIndex, cfg: AttackConfig, seed: int = 0,
                   policy: Literal['random', 'center'] = 'random') -> AttackReport:
    """Accuracy and Cloudy on D (train) and E (test); params None scores the clean cubes"""
    train = score_dataset(detector, sets.train, params, index, cfg, policy, seed, 'train')
    test = score_dataset(detector, sets.test, params, index, cfg, policy, seed, 'test')
    return AttackReport.from_confidences(train, test, cfg.config_hash(), [seed])


# ============================================================
# EXPERIMENT GRIDS
# ============================================================

class GridRow(BaseModel):
    name: str
    # None scores the clean attack sets (no adversarial cube)
    loss: Optional[str] = None
    roa: Literal['hills', 'desert'] = 'hills'
    layout: Optional[List[CubeSlot]] = None
    proximity: Optional[Literal['low', 'high']] = None
    hull: Optional[bool] = None
    detector: str = 'default'
    seeds: Optional[List[int]] = None
    overrides: Dict[str, Any] = Field(default_factory=dict)


class ExperimentGrid(BaseModel):
    name: str = 'grid'
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    # AttackConfig fields shared by every row
    base: Dict[str, Any] = Field(default_factory=dict)
    rows: List[GridRow]

    @model_validator(mode='after')
    def _unique_names(self):
        if not self.rows:
            raise ValueError("grid has no rows")
        names = [row.name for row in self.rows]
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ValueError(f"duplicate row names: {duplicates}")
        return self

    def row_seeds(self, row: GridRow) -> List[int]:
        return list(row.seeds if row.seeds is not None else self.seeds)

    def attack_config(self, row: GridRow, seed: int) -> AttackConfig:
        """Defaults <- grid base <- row fields <- row overrides, with the run seed"""
        values: Dict[str, Any] = dict(self.base)
        if row.loss is not None:
            values['loss'] = row.loss
        values['roa'] = row.roa
        for key in ('layout', 'proximity', 'hull'):
            value = getattr(row, key)
            if value is not None:
                values[key] = [s.model_dump() for s in value] if key == 'layout' else value
        values.update(row.overrides)
        values['seed'] = seed
        return AttackConfig.model_validate(values)


@dataclass
class GridAssets:
    detectors: Dict[str, DetectorModel]
    index: SpectralIndex
    # attack sets filtered by each detector, same keys as detectors
    attack_sets: Dict[str, AttackSets]


@dataclass
class GridRowResult:
    name: str
    acc_train: float
    acc_test: float
    cloudy_train: float
    cloudy_test: float
    seed_count: int
    reports: List[AttackReport] = field(default_factory=list)
    error: Optional[str] = None


def _run_row(grid: ExperimentGrid, row: GridRow, assets: GridAssets) -> GridRowResult:
    if row.detector not in assets.detectors:
        raise EvaluationError(f"row '{row.name}': unknown detector '{row.detector}'")
    detector = assets.detectors[row.detector]
    sets = assets.attack_sets[row.detector]

    reports = []
    for seed in grid.row_seeds(row):
        cfg = grid.attack_config(row, seed)
        params = None
        if row.loss is not None:
            roa = select_roa(sets.train, cfg.roa)
            q = assets.index.q if cfg.hull else assets.index.matrix.shape[0]
            start = [init_params(slot.height, slot.width, q, seed, cfg.init_sigma, cfg.hull, key=j)
                     for j, slot in enumerate(cfg.layout)]
            params = optimize_cube(start, sets.train, roa, detector, assets.index, cfg).params
        report = attack_metrics(detector, sets, params, assets.index, cfg, seed)
        logger.info(f"GRID_RUN: row={row.name} seed={seed} acc_train={report.accuracy_train:.4f} "
                    f"acc_test={report.accuracy_test:.4f} cloudy_test={report.cloudy_test:.4f}")
        reports.append(report)

    return GridRowResult(
        row.name,
        float(np.mean([r.accuracy_train for r in reports])),
        float(np.mean([r.accuracy_test for r in reports])),
        float(np.mean([r.cloudy_train for r in reports])),
        float(np.mean([r.cloudy_test for r in reports])),
        len(reports),
        reports,
    )


def run_grid(grid: ExperimentGrid, assets: GridAssets, threads: int = DEFAULT_THREADS) -> List[GridRowResult]:
    """Run every row over its seeds; failed rows are kept with nan metrics, order follows the grid"""
    def guarded(row: GridRow) -> GridRowResult:
        try:
            return _run_row(grid, row, assets)
        except Exception as e:
            logger.exception(f"GRID_ROW_FAILED: row={row.name}: {e}")
            nan = float('nan')
            return GridRowResult(row.name, nan, nan, nan, nan, 0, [], str(e))

    if threads <= 1 or len(grid.rows) < 2:
        results = [guarded(row) for row in grid.rows]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(guarded, grid.rows))
    failed = [r.name for r in results if r.error]
    logger.info(f"GRID_DONE: {grid.name} {len(results)} rows, {len(failed)} failed {failed if failed else ''}")
    return results


def report_table(results: Sequence[GridRowResult]) -> pd.DataFrame:
    return pd.DataFrame([{
        'row_name': r.name,
        'acc_train': r.acc_train,
        'acc_test': r.acc_test,
        'cloudy_train': r.cloudy_train,
        'cloudy_test': r.cloudy_test,
        'seed_count': r.seed_count,
    } for r in results], columns=REPORT_COLUMNS)


def write_report(results: Sequence[GridRowResult], path: str) -> str:
    """row_name,acc_train,acc_test,cloudy_train,cloudy_test,seed_count with 4-decimal metrics"""
    ensure_dir_exists(os.path.dirname(path))
    report_table(results).to_csv(path, index=False, float_format='%.4f', na_rep='nan', lineterminator='\n')
    return path


def write_seed_details(results: Sequence[GridRowResult], path: str) -> str:
    """One line per (row, seed) with the config hash that produced it"""
    rows = []
    for result in results:
        for report in result.reports:
            rows.append({
                'row_name': result.name,
                'seed': report.seeds[0] if report.seeds else '',
                'acc_train': report.accuracy_train,
                'acc_test': report.accuracy_test,
                'cloudy_train': report.cloudy_train,
                'cloudy_test': report.cloudy_test,
                'config_hash': report.config_hash,
            })
    ensure_dir_exists(os.path.dirname(path))
    pd.DataFrame(rows, columns=['row_name', 'seed', 'acc_train', 'acc_test', 'cloudy_train', 'cloudy_test',
                                'config_hash']).to_csv(path, index=False, float_format='%.6f',
                                                       lineterminator='\n')
    return path


def grid_hash(grid: ExperimentGrid) -> str:
    return sha256_json(grid.model_dump())


# ============================================================
# RENDERING
# ============================================================

def to_rgb8(data: np.ndarray, bands_rgb: Sequence[int]) -> np.ndarray:
    """H x W x 3 uint8 image of the given 1-based bands, value = round(255 x)"""
    channels = np.stack([data[..., b - 1] for b in bands_rgb], axis=-1)
    return np.rint(np.clip(channels, 0.0, 1.0) * 255.0).astype(np.uint8)


def _save_png(image: np.ndarray, path: str) -> str:
    Image.fromarray(image).save(path, format='PNG', optimize=False, compress_level=6)
    return path


def pixel_table(params: Sequence[CubeParams], index: SpectralIndex) -> pd.DataFrame:
    """Every realized pixel in bands v and c with its distance to the nearest index column"""
    frames = []
    for j, p in enumerate(params):
        cube = realize_cube(p, index)
        pixels = cube.reshape(-1, cube.shape[2])
        dist = np.sqrt(((pixels[:, :, None] - index.matrix[None]) ** 2).sum(axis=1)).min(axis=1)
        rows, cols = np.divmod(np.arange(pixels.shape[0]), p.width)
        frame = pd.DataFrame({'cube': j, 'row': rows, 'col': cols})
        for b in BANDS_V.indices:
            frame[f"v_b{b}"] = pixels[:, b - 1]
        for b in BANDS_C.indices:
            frame[f"c_b{b}"] = pixels[:, b - 1]
        frame['nearest_distance'] = dist
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def render_cube_images(params: Sequence[CubeParams], index: SpectralIndex, roa: DataCube, out_dir: str,
                       prefix: str = 'cube') -> List[str]:
    """Visible (4,3,2) and false-colour (8,2,1) PNGs per cube, the cube(s) centred in the ROA, pixel CSV"""
    ensure_dir_exists(out_dir)
    prefix = sanitize_filename(prefix)
    written = []
    patches = [np.clip(realize_cube(p, index), 0.0, 1.0) for p in params]
    for j, patch in enumerate(patches):
        tag = prefix if len(patches) == 1 else f"{prefix}{j}"
        written.append(_save_png(to_rgb8(patch, VISIBLE_RGB), os.path.join(out_dir, f"{tag}_visible.png")))
        written.append(_save_png(to_rgb8(patch, FALSE_COLOUR_RGB), os.path.join(out_dir, f"{tag}_false_colour.png")))

    layout = [CubeSlot(height=p.height, width=p.width) for p in params]
    scene = roa
    for patch, t in zip(patches, center_transforms((roa.height, roa.width), layout)):
        scene = embed(scene, patch, t)
    written.append(_save_png(to_rgb8(roa.data, VISIBLE_RGB), os.path.join(out_dir, f"{prefix}_roa_visible.png")))
    written.append(_save_png(to_rgb8(scene.data, VISIBLE_RGB), os.path.join(out_dir, f"{prefix}_in_roa_visible.png")))

    csv_path = os.path.join(out_dir, f"{prefix}_pixels.csv")
    pixel_table(params, index).to_csv(csv_path, index=False, float_format='%.6f', lineterminator='\n')
    written.append(csv_path)
    logger.info(f"RENDERED: {len(written)} files in {out_dir}")
    return written
