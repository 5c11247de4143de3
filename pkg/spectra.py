"""
Spectral Index Builder
Material reflectance library -> solar weighting -> 13-band averages -> index C
"""
import logging
import os
import re
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid

from config import BAND_COUNT
from utils import PipelineError, ensure_dir_exists

logger = logging.getLogger(__name__)


class SpectraError(PipelineError):
    """Raised when spectra or band tables are inconsistent"""
    pass


class SpectrumParseError(SpectraError):
    """Raised on malformed spectral CSV input; carries the 1-based line number"""

    def __init__(self, path: str, line: Optional[int], message: str):
        self.path = path
        self.line = line
        where = f"line {line}: " if line is not None else ''
        super().__init__(f"{path}: {where}{message}")


@dataclass(frozen=True)
class Spectrum:
    wavelengths_nm: np.ndarray
    values: np.ndarray
    name: str = ''

    def __post_init__(self):
        wl = np.asarray(self.wavelengths_nm, dtype=np.float64)
        vals = np.asarray(self.values, dtype=np.float64)
        if wl.ndim != 1 or wl.shape != vals.shape or wl.size < 2:
            raise SpectraError(f"spectrum '{self.name}': need matching 1-D arrays with at least 2 samples")
        if np.any(np.diff(wl) <= 0):
            raise SpectraError(f"spectrum '{self.name}': wavelengths not strictly increasing")
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            raise SpectraError(f"spectrum '{self.name}': values must be finite and >= 0")
        object.__setattr__(self, 'wavelengths_nm', wl)
        object.__setattr__(self, 'values', vals)

    @property
    def support(self) -> Tuple[float, float]:
        return float(self.wavelengths_nm[0]), float(self.wavelengths_nm[-1])


@dataclass(frozen=True)
class Band:
    index: int
    min_nm: float
    max_nm: float

    @property
    def center_nm(self) -> float:
        return 0.5 * (self.min_nm + self.max_nm)


@dataclass(frozen=True)
class BandTable:
    bands: Tuple[Band, ...]

    def __post_init__(self):
        if len(self.bands) != BAND_COUNT:
            raise SpectraError(f"band table has {len(self.bands)} entries, expected {BAND_COUNT}")
        if sorted(b.index for b in self.bands) != list(range(1, BAND_COUNT + 1)):
            raise SpectraError(f"band indices must be exactly 1..{BAND_COUNT}")
        for b in self.bands:
            if not b.min_nm < b.max_nm:
                raise SpectraError(f"band {b.index}: min_nm {b.min_nm} not below max_nm {b.max_nm}")
        object.__setattr__(self, 'bands', tuple(sorted(self.bands, key=lambda b: b.index)))


@dataclass(frozen=True)
class SpectralIndex:
    """13xQ matrix C; column q is the band response of material q"""
    matrix: np.ndarray
    names: Tuple[str, ...]

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != BAND_COUNT or m.shape[1] < 1:
            raise SpectraError(f"spectral index must be {BAND_COUNT}xQ with Q >= 1, got {m.shape}")
        if len(self.names) != m.shape[1]:
            raise SpectraError(f"spectral index has {m.shape[1]} columns but {len(self.names)} names")
        if not np.all(np.isfinite(m)) or m.min() < 0 or m.max() > 1:
            raise SpectraError("spectral index entries must lie in [0, 1]")
        object.__setattr__(self, 'matrix', m)
        object.__setattr__(self, 'names', tuple(self.names))

    @property
    def q(self) -> int:
        return self.matrix.shape[1]


# ============================================================
# CSV LOADING
# ============================================================

def _read_csv(path: str, required: Sequence[str]) -> pd.DataFrame:
    if not os.path.exists(path):
        raise SpectraError(f"file not found: {path}")
    try:
        df = pd.read_csv(path, dtype=str, skip_blank_lines=True, skipinitialspace=True)
    except pd.errors.EmptyDataError as e:
        raise SpectrumParseError(path, 1, 'no materials' if 'wavelength_nm' in required else 'empty file') from e
    except pd.errors.ParserError as e:
        match = re.search(r'line (\d+)', str(e))
        raise SpectrumParseError(path, int(match.group(1)) if match else None, f"malformed row ({e})") from e
    df.columns = [str(c).strip() for c in df.columns]
    for column in required:
        if column not in df.columns:
            raise SpectrumParseError(path, 1, f"missing column '{column}' in header")
    return df


def _numeric(df: pd.DataFrame, column: str, path: str) -> np.ndarray:
    parsed = pd.to_numeric(df[column], errors='coerce')
    bad = parsed.isna() | ~np.isfinite(parsed.to_numpy(dtype=np.float64))
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise SpectrumParseError(path, row + 2, f"column '{column}': not a finite number: {df[column].iloc[row]!r}")
    return parsed.to_numpy(dtype=np.float64)


def _check_increasing(wl: np.ndarray, path: str):
    steps = np.diff(wl)
    if np.any(steps <= 0):
        row = int(np.flatnonzero(steps <= 0)[0]) + 1
        raise SpectrumParseError(path, row + 2, f"wavelength {wl[row]} does not increase on {wl[row - 1]}")


def load_material_library(path: str, sort_samples: bool = False) -> List[Spectrum]:
    """Load material reflectance spectra; one Spectrum per material column, file order kept.

    With sort_samples the rows are sorted by wavelength first, so any row
    permutation of the same samples loads identically.
    """
    df = _read_csv(path, ['wavelength_nm'])
    names = [c for c in df.columns if c != 'wavelength_nm']
    if not names:
        raise SpectrumParseError(path, 1, 'no materials')
    if len(df) < 2:
        raise SpectrumParseError(path, len(df) + 1, 'need at least 2 wavelength samples')

    wl = _numeric(df, 'wavelength_nm', path)
    columns = {name: _numeric(df, name, path) for name in names}
    if sort_samples:
        order = np.argsort(wl, kind='stable')
        wl = wl[order]
        columns = {name: values[order] for name, values in columns.items()}
    _check_increasing(wl, path)

    library = []
    for name in names:
        values = columns[name]
        outside = (values < 0) | (values > 1)
        if outside.any():
            row = int(np.flatnonzero(outside)[0])
            raise SpectrumParseError(path, row + 2, f"material '{name}': reflectance {values[row]} outside [0, 1]")
        library.append(Spectrum(wl.copy(), values, name))

    logger.info(f"MATERIALS_LOADED: {len(library)} materials, {wl.size} samples from {path}")
    return library


def load_band_table(path: str) -> BandTable:
    """Load the band,min_nm,max_nm table (13 rows)"""
    df = _read_csv(path, ['band', 'min_nm', 'max_nm'])
    if len(df) != BAND_COUNT:
        raise SpectrumParseError(path, None, f"expected {BAND_COUNT} band rows, found {len(df)}")
    index = _numeric(df, 'band', path)
    lo = _numeric(df, 'min_nm', path)
    hi = _numeric(df, 'max_nm', path)
    for row in range(len(df)):
        if index[row] != int(index[row]):
            raise SpectrumParseError(path, row + 2, f"band index {index[row]} is not an integer")
        if not lo[row] < hi[row]:
            raise SpectrumParseError(path, row + 2, f"band {int(index[row])}: min_nm {lo[row]} >= max_nm {hi[row]}")
    return BandTable(tuple(Band(int(i), float(a), float(b)) for i, a, b in zip(index, lo, hi)))


def load_solar_spectrum(path: str) -> Spectrum:
    """Load the wavelength_nm,irradiance solar curve"""
    df = _read_csv(path, ['wavelength_nm', 'irradiance'])
    if len(df) < 2:
        raise SpectrumParseError(path, len(df) + 1, 'need at least 2 wavelength samples')
    wl = _numeric(df, 'wavelength_nm', path)
    irradiance = _numeric(df, 'irradiance', path)
    _check_increasing(wl, path)
    negative = irradiance < 0
    if negative.any():
        row = int(np.flatnonzero(negative)[0])
        raise SpectrumParseError(path, row + 2, f"negative irradiance {irradiance[row]}")
    return Spectrum(wl, irradiance, 'solar')


# ============================================================
# SPECTRAL PIPELINE
# ============================================================

def apply_solar(reflectance: Spectrum, solar: Spectrum) -> Spectrum:
    """Apparent reflectance: reflectance x peak-normalized solar, on the reflectance grid"""
    r_lo, r_hi = reflectance.support
    s_lo, s_hi = solar.support
    lo, hi = max(r_lo, s_lo), min(r_hi, s_hi)
    if lo >= hi:
        raise SpectraError(f"'{reflectance.name}' [{r_lo}, {r_hi}] nm and solar [{s_lo}, {s_hi}] nm do not overlap")

    keep = (reflectance.wavelengths_nm >= lo) & (reflectance.wavelengths_nm <= hi)
    wl = reflectance.wavelengths_nm[keep]
    if wl.size < 2:
        raise SpectraError(f"'{reflectance.name}': fewer than 2 samples inside the solar range")

    peak = float(solar.values.max())
    if peak == 0:
        weights = np.zeros_like(wl)
    else:
        weights = np.interp(wl, solar.wavelengths_nm, solar.values) / peak
    values = np.clip(reflectance.values[keep] * weights, 0.0, 1.0)
    return Spectrum(wl, values, reflectance.name)


def integrate_bands(spectrum: Spectrum, bands: BandTable) -> np.ndarray:
    """Mean of the spectrum over every band interval (trapezoid / bandwidth)"""
    wl, values = spectrum.wavelengths_nm, spectrum.values
    lo_support, hi_support = spectrum.support
    out = np.empty(len(bands.bands))
    for k, band in enumerate(bands.bands):
        if band.min_nm < lo_support or band.max_nm > hi_support:
            raise SpectraError(
                f"band {band.index} [{band.min_nm}, {band.max_nm}] nm lies outside "
                f"'{spectrum.name}' support [{lo_support}, {hi_support}] nm")
        inner = wl[(wl > band.min_nm) & (wl < band.max_nm)]
        grid = np.concatenate(([band.min_nm], inner, [band.max_nm]))
        out[k] = trapezoid(np.interp(grid, wl, values), grid) / (band.max_nm - band.min_nm)
    return out


def build_spectral_index(library: Sequence[Spectrum], solar: Spectrum, bands: BandTable) -> SpectralIndex:
    """C = [c_1 .. c_Q], column q = integrate_bands(apply_solar(material_q))"""
    if not library:
        raise SpectraError("material library is empty")
    columns = [integrate_bands(apply_solar(material, solar), bands) for material in library]
    matrix = np.clip(np.column_stack(columns), 0.0, 1.0)
    index = SpectralIndex(matrix, tuple(m.name for m in library))
    logger.info(f"INDEX_BUILT: {BAND_COUNT}x{index.q} spectral index, "
                f"range [{matrix.min():.4f}, {matrix.max():.4f}]")
    return index


# ============================================================
# PERSISTENCE
# ============================================================

def save_spectral_index(index: SpectralIndex, path: str):
    """CSV: band column, then one column per material"""
    ensure_dir_exists(os.path.dirname(path))
    df = pd.DataFrame(index.matrix, columns=list(index.names))
    df.insert(0, 'band', np.arange(1, BAND_COUNT + 1))
    df.to_csv(path, index=False, float_format='%.17g', lineterminator='\n')


def load_spectral_index(path: str) -> SpectralIndex:
    df = _read_csv(path, ['band'])
    names = [c for c in df.columns if c != 'band']
    if not names:
        raise SpectrumParseError(path, 1, 'no materials')
    if len(df) != BAND_COUNT:
        raise SpectrumParseError(path, None, f"expected {BAND_COUNT} band rows, found {len(df)}")
    matrix = np.column_stack([_numeric(df, name, path) for name in names])
    try:
        return SpectralIndex(matrix, tuple(names))
    except SpectraError as e:
        raise SpectrumParseError(path, None, str(e)) from e


def write_material_library(library: Sequence[Spectrum], path: str):
    """Write spectra sharing one wavelength grid as a material library CSV"""
    if not library:
        raise SpectraError("nothing to write: material library is empty")
    grid = library[0].wavelengths_nm
    for spectrum in library[1:]:
        if not np.array_equal(spectrum.wavelengths_nm, grid):
            raise SpectraError(f"material '{spectrum.name}' is not on the shared wavelength grid")
    ensure_dir_exists(os.path.dirname(path))
    df = pd.DataFrame({s.name: s.values for s in library})
    df.insert(0, 'wavelength_nm', grid)
    df.to_csv(path, index=False, float_format='%.17g', lineterminator='\n')
    logger.info(f"MATERIALS_WRITTEN: {len(library)} materials to {path}")
