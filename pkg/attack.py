"""
Adversarial Cube Optimization
Cube parametrization over the spectral index, EOT embedding, the three-term
loss (bias, multispectral NPS, visible-band cloaking) and the Adam loop
against a frozen detector.
"""
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator
from scipy.special import expit, softmax

from config import ALPHA, BCE_EPSILON, BETA
from cubes import BANDS_V, DataCube, extract_bands, read_cube, write_cube
from detector import DetectorModel, detector_graph, predict_batch
from grad import AdamState, Graph, GraphBuilder, Ref, adam_step, evaluate, make_rng, value_and_gradient
from spectra import SpectralIndex
from utils import PipelineError, ensure_dir_exists, load_json, save_json, sha256_json

logger = logging.getLogger(__name__)

LOSS_TERMS = ('psi', 'nps', 'cloak')
TRACE_COLUMNS = ['step', 'psi', 'phi', 'omega', 'total', 'mean_conf']


class AttackError(PipelineError):
    """Raised on invalid attack inputs or a violated frozen-detector contract"""
    pass


class PlacementError(AttackError):
    """Raised when patches cannot be placed inside the host"""
    pass


class NonFiniteLossError(AttackError):
    """Raised when the attack loss stops being finite; keeps the last good state"""

    def __init__(self, message: str, last_params: List['CubeParams'], trace: pd.DataFrame):
        self.last_params = last_params
        self.trace = trace
        super().__init__(message)


# ============================================================
# CONFIG
# ============================================================

class CubeSlot(BaseModel):
    height: int = Field(ge=1)
    width: int = Field(ge=1)


class AttackConfig(BaseModel):
    alpha: float = Field(ALPHA, ge=0.0)
    beta: float = Field(BETA, ge=0.0)
    # '+'-joined terms out of psi, nps, cloak; psi is always present
    loss: str = 'psi+nps+cloak'
    steps: int = Field(500, ge=0)
    lr: float = Field(0.01, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_epsilon: float = Field(1e-8, gt=0.0)
    batch_size: int = Field(8, ge=1)
    scale_delta: float = Field(0.1, ge=0.0, lt=1.0)
    noise_sigma: float = Field(0.02, ge=0.0)
    noise_clip: float = Field(0.05, ge=0.0)
    corruption_prob: float = Field(0.05, ge=0.0, le=1.0)
    rotate: bool = True
    layout: List[CubeSlot] = Field(default_factory=lambda: [CubeSlot(height=25, width=25)])
    proximity: Literal['low', 'high'] = 'low'
    hull: bool = True
    init_sigma: float = Field(0.01, ge=0.0)
    best_window: int = Field(50, ge=1)
    placement_retries: int = Field(1000, ge=1)
    roa: Literal['hills', 'desert'] = 'hills'
    seed: int = 0
    epsilon: float = Field(BCE_EPSILON, gt=0.0, lt=0.5)

    @field_validator('loss')
    @classmethod
    def _check_loss(cls, value: str) -> str:
        terms = [t.strip().lower() for t in value.split('+') if t.strip()]
        unknown = [t for t in terms if t not in LOSS_TERMS]
        if unknown:
            raise ValueError(f"unknown loss terms {unknown}; expected a '+'-joined subset of {list(LOSS_TERMS)}")
        if 'psi' not in terms:
            raise ValueError("the loss must contain the psi term")
        return '+'.join(t for t in LOSS_TERMS if t in terms)

    @field_validator('layout')
    @classmethod
    def _check_layout(cls, value: List[CubeSlot]) -> List[CubeSlot]:
        if not value:
            raise ValueError("layout needs at least one cube")
        return value

    @property
    def terms(self) -> Tuple[str, ...]:
        return tuple(self.loss.split('+'))

    @property
    def effective_alpha(self) -> float:
        return self.alpha if 'nps' in self.terms else 0.0

    @property
    def effective_beta(self) -> float:
        return self.beta if 'cloak' in self.terms else 0.0

    def config_hash(self) -> str:
        return sha256_json(self.model_dump())


# ============================================================
# CUBE PARAMETRIZATION
# ============================================================

@dataclass(frozen=True)
class CubeParams:
    """Logits of one cube: M x N x Q mixing logits (hull) or M x N x 13 raw logits"""
    logits: np.ndarray
    hull: bool = True

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64)
        if logits.ndim != 3 or min(logits.shape) < 1:
            raise AttackError(f"cube logits must be M x N x Q, got shape {logits.shape}")
        if not np.all(np.isfinite(logits)):
            raise AttackError("cube logits must be finite")
        object.__setattr__(self, 'logits', logits)

    @property
    def height(self) -> int:
        return self.logits.shape[0]

    @property
    def width(self) -> int:
        return self.logits.shape[1]

    @property
    def q(self) -> int:
        return self.logits.shape[2]


def init_params(m: int, n: int, q: int, seed: int, sigma: float = 0.01, hull: bool = True,
                key: int = 0) -> CubeParams:
    """Small Gaussian logits (near-uniform mixtures); sigma 0 gives exact zeros"""
    if min(m, n, q) < 1:
        raise AttackError(f"cube dimensions must be >= 1, got {m}x{n}x{q}")
    logits = make_rng(seed, 'cube-init', key).normal(0.0, 1.0, (m, n, q)) * sigma
    return CubeParams(logits, hull)


def _check_index(params: CubeParams, index: SpectralIndex):
    if params.hull and params.q != index.q:
        raise AttackError(f"cube has {params.q} mixing logits, spectral index has {index.q} columns")
    if not params.hull and params.q != index.matrix.shape[0]:
        raise AttackError(f"unconstrained cube needs {index.matrix.shape[0]} band logits, has {params.q}")


def realize_graph(g: GraphBuilder, logits: Ref, params: CubeParams, index: SpectralIndex) -> Ref:
    """P = C softmax(a) per pixel, or sigmoid(a) without the hull constraint"""
    _check_index(params, index)
    m, n, q = params.logits.shape
    if not params.hull:
        return g.sigmoid(logits)
    weights = g.reshape(g.softmax(logits), (m * n, q))
    pixels = g.matmul(weights, g.constant(index.matrix.T))
    return g.reshape(pixels, (m, n, index.matrix.shape[0]))


def realize_cube(params: CubeParams, index: SpectralIndex) -> np.ndarray:
    """M x N x 13 cube; with the hull every pixel is a convex combination of C's columns"""
    _check_index(params, index)
    if not params.hull:
        return expit(params.logits)
    return softmax(params.logits, axis=-1) @ index.matrix.T


# ============================================================
# TRANSFORMS AND EMBEDDING
# ============================================================

@dataclass(frozen=True)
class Transform:
    rotation: int
    position: Tuple[int, int]
    scale: float = 1.0
    noise: Optional[np.ndarray] = None
    corrupt: Optional[np.ndarray] = None

    def placed_shape(self, height: int, width: int) -> Tuple[int, int]:
        return (width, height) if (self.rotation // 90) % 2 else (height, width)


def identity_transform(position: Tuple[int, int] = (0, 0)) -> Transform:
    return Transform(0, position)


def _overlaps(a: Tuple[int, int, int, int], b: Tuple[int, int, int, int]) -> bool:
    ar, ac, am, an = a
    br, bc, bm, bn = b
    return ar < br + bm and br < ar + am and ac < bc + bn and bc < ac + an


def sample_transform(rng: np.random.Generator, cfg: AttackConfig, host_size: Tuple[int, int],
                     layout: Optional[Sequence[CubeSlot]] = None, bands: int = 13) -> List[Transform]:
    """One random Transform per cube of the layout; patches never overlap.

    Low proximity places anchors uniformly over the host; high proximity keeps
    every anchor inside one square box of side 2.5x the largest patch side.
    """
    layout = list(cfg.layout if layout is None else layout)
    h, w = host_size
    rotations = [90 * int(rng.integers(0, 4)) if cfg.rotate else 0 for _ in layout]
    shapes = [Transform(r, (0, 0)).placed_shape(s.height, s.width) for r, s in zip(rotations, layout)]
    for m, n in shapes:
        if m > h or n > w:
            raise PlacementError(f"patch {m}x{n} does not fit in host {h}x{w}")

    side = max(max(s.height, s.width) for s in layout)
    box = int(math.floor(2.5 * side))
    max_m = max(m for m, _ in shapes)
    max_n = max(n for _, n in shapes)

    for _ in range(cfg.placement_retries):
        if cfg.proximity == 'high':
            r0 = int(rng.integers(0, max(0, h - max_m - box) + 1))
            c0 = int(rng.integers(0, max(0, w - max_n - box) + 1))
        placed: List[Tuple[int, int, int, int]] = []
        for m, n in shapes:
            if cfg.proximity == 'high':
                r_hi, c_hi = min(r0 + box, h - m), min(c0 + box, w - n)
                r_lo, c_lo = min(r0, r_hi), min(c0, c_hi)
            else:
                r_lo, c_lo, r_hi, c_hi = 0, 0, h - m, w - n
            for _ in range(50):
                rect = (int(rng.integers(r_lo, r_hi + 1)), int(rng.integers(c_lo, c_hi + 1)), m, n)
                if not any(_overlaps(rect, other) for other in placed):
                    placed.append(rect)
                    break
            else:
                break
        if len(placed) == len(shapes):
            break
    else:
        raise PlacementError(f"could not place {len(layout)} non-overlapping patches in {h}x{w} "
                             f"({cfg.proximity} proximity) within {cfg.placement_retries} attempts")

    transforms = []
    for rotation, (r, c, m, n) in zip(rotations, placed):
        scale = float(rng.uniform(1.0 - cfg.scale_delta, 1.0 + cfg.scale_delta))
        noise = np.clip(rng.normal(0.0, cfg.noise_sigma, (m, n, bands)), -cfg.noise_clip, cfg.noise_clip)
        corrupt = rng.random(bands) < cfg.corruption_prob
        transforms.append(Transform(rotation, (r, c), scale, noise, corrupt))
    return transforms


def center_transforms(host_size: Tuple[int, int], layout: Sequence[CubeSlot]) -> List[Transform]:
    """Deterministic placement: cubes tiled in a near-square grid around the host centre, no augmentation"""
    h, w = host_size
    cols = math.ceil(math.sqrt(len(layout)))
    rows = math.ceil(len(layout) / cols)
    cell_m = max(s.height for s in layout)
    cell_n = max(s.width for s in layout)
    top = (h - rows * cell_m) // 2
    left = (w - cols * cell_n) // 2
    if top < 0 or left < 0:
        raise PlacementError(f"{len(layout)} cubes of {cell_m}x{cell_n} do not fit centred in {h}x{w}")
    return [Transform(0, (top + (k // cols) * cell_m, left + (k % cols) * cell_n)) for k in range(len(layout))]


def embed_graph(g: GraphBuilder, host: Ref, host_value: np.ndarray, patch: Ref, patch_shape: Tuple[int, ...],
                t: Transform) -> Ref:
    """Rotate, scale, add noise, clamp (straight-through), revert corrupted bands, paste"""
    m, n = t.placed_shape(patch_shape[0], patch_shape[1])
    r, c = t.position
    hh, hw = host_value.shape[0], host_value.shape[1]
    if r < 0 or c < 0 or r + m > hh or c + n > hw:
        raise PlacementError(f"patch {m}x{n} at ({r}, {c}) leaves host {hh}x{hw}")

    p = g.rot90(patch, t.rotation // 90) if t.rotation % 360 else patch
    if t.scale != 1.0:
        p = g.scale(p, t.scale)
    if t.noise is not None:
        p = g.add(p, g.constant(t.noise))
    p = g.clamp_st(p, 0.0, 1.0)
    if t.corrupt is not None and np.any(t.corrupt):
        mask = np.broadcast_to(np.asarray(t.corrupt, dtype=np.float64), (m, n, patch_shape[2]))
        region = host_value[r:r + m, c:c + n, :]
        p = g.add(g.mul(p, g.constant(1.0 - mask)), g.constant(region * mask))
    return g.paste(host, p, r, c)


def embed(host: Union[DataCube, np.ndarray], patch: np.ndarray, t: Transform) -> DataCube:
    """Host with the transformed patch written in; pixels outside the patch are untouched"""
    cube = host if isinstance(host, DataCube) else DataCube(host)
    patch = np.asarray(patch, dtype=np.float64)
    if patch.ndim != 3 or patch.shape[2] != cube.bands:
        raise AttackError(f"patch shape {patch.shape} incompatible with {cube.bands}-band host")
    g = GraphBuilder()
    host_ref = g.input('host', cube.data.shape)
    patch_ref = g.input('patch', patch.shape)
    out = embed_graph(g, host_ref, cube.data, patch_ref, patch.shape, t)
    result = evaluate(g.build({'out': out}), {'host': cube.data, 'patch': patch})['out']
    return DataCube(result.astype(np.float32), cube.ground_resolution_m, cube.terrain, cube.seed)


def random_crop(roa: np.ndarray, m: int, n: int, rng: np.random.Generator) -> np.ndarray:
    h, w = roa.shape[0], roa.shape[1]
    if m > h or n > w:
        raise AttackError(f"region of attack {h}x{w} is smaller than the {m}x{n} patch")
    r = int(rng.integers(0, h - m + 1))
    c = int(rng.integers(0, w - n + 1))
    return roa[r:r + m, c:c + n]


# ============================================================
# LOSSES
# ============================================================

@dataclass(frozen=True)
class LossBreakdown:
    psi: float
    phi: float
    omega: float
    total: float


def psi_graph(g: GraphBuilder, conf: Ref, epsilon: float = BCE_EPSILON) -> Ref:
    return g.scale(g.sum(g.log(g.clip(conf, epsilon, 1.0))), -1.0)


def nps_graph(g: GraphBuilder, cube: Ref, m: int, n: int, index: SpectralIndex) -> Ref:
    pixels = g.reshape(cube, (m * n, index.matrix.shape[0]))
    return g.mean(g.min_l2(pixels, g.constant(index.matrix)))


def cloak_graph(g: GraphBuilder, cube: Ref, roa_crop_v: np.ndarray) -> Ref:
    visible = g.take(cube, BANDS_V.positions)
    return g.l2_norm(g.sub(visible, g.constant(roa_crop_v)))


def psi_from_confidences(confidences: Sequence[float], epsilon: float = BCE_EPSILON) -> float:
    conf = np.clip(np.asarray(confidences, dtype=np.float64), epsilon, 1.0)
    return float(-np.sum(np.log(conf)))


def loss_bias(detector: DetectorModel, batch: Sequence[Union[DataCube, np.ndarray]],
              epsilon: float = BCE_EPSILON) -> float:
    """Psi = sum_k -log f(D_k^c)"""
    stack = np.stack([extract_bands(cube, detector.arch.input_subset) for cube in batch])
    return psi_from_confidences(predict_batch(detector, stack), epsilon)


def loss_nps(cube: np.ndarray, index: SpectralIndex) -> float:
    """Phi = mean over pixels of the L2 distance to the nearest index column"""
    cube = np.asarray(cube, dtype=np.float64)
    m, n, _ = cube.shape
    g = GraphBuilder()
    ref = g.input('p', cube.shape)
    return float(evaluate(g.build({'phi': nps_graph(g, ref, m, n, index)}), {'p': cube})['phi'])


def loss_cloak(cube: np.ndarray, roa: Union[DataCube, np.ndarray], rng: np.random.Generator) -> float:
    """Omega = || P^v - random M x N crop of the ROA in bands v ||_2"""
    cube = np.asarray(cube, dtype=np.float64)
    crop = random_crop(extract_bands(roa, BANDS_V), cube.shape[0], cube.shape[1], rng)
    return float(np.sqrt(np.sum((extract_bands(cube, BANDS_V) - crop) ** 2)))


def loss_total(psi: float, phi: float, omega: float, alpha: float = ALPHA, beta: float = BETA) -> LossBreakdown:
    if alpha < 0 or beta < 0:
        raise AttackError(f"loss weights must be >= 0, got alpha={alpha} beta={beta}")
    return LossBreakdown(psi, phi, omega, psi + alpha * phi + beta * omega)


# ============================================================
# OPTIMIZATION
# ============================================================

def build_attack_graph(params: Sequence[CubeParams], hosts: Sequence[np.ndarray],
                       transforms: Sequence[Sequence[Transform]], crops: Sequence[np.ndarray],
                       detector: DetectorModel, index: SpectralIndex, cfg: AttackConfig) -> Graph:
    """Graph of the full attack loss over one minibatch.

    Inputs are the cube logits 'logits0', 'logits1', ...; outputs psi, phi,
    omega, total and conf. hosts are 13-band cubes, transforms[k][j] places
    cube j in host k, crops[j] is the visible-band ROA crop for cube j.
    """
    g = GraphBuilder()
    cubes_ = []
    for j, p in enumerate(params):
        logits = g.input(f"logits{j}", p.logits.shape)
        cubes_.append(realize_graph(g, logits, p, index))

    embedded = []
    for host, item_transforms in zip(hosts, transforms):
        current = g.constant(host)
        for j, (p, t) in enumerate(zip(params, item_transforms)):
            current = embed_graph(g, current, host, cubes_[j], (p.height, p.width, index.matrix.shape[0]), t)
        embedded.append(g.take(current, detector.arch.input_subset.positions))

    batch = g.stack(embedded)
    height, width = hosts[0].shape[0], hosts[0].shape[1]
    _, conf = detector_graph(g, detector, batch, height, width)
    psi = psi_graph(g, conf, cfg.epsilon)

    phi_terms = [nps_graph(g, cube, p.height, p.width, index) for cube, p in zip(cubes_, params)]
    omega_terms = [cloak_graph(g, cube, crop) for cube, crop in zip(cubes_, crops)]
    phi, omega = phi_terms[0], omega_terms[0]
    for extra in phi_terms[1:]:
        phi = g.add(phi, extra)
    for extra in omega_terms[1:]:
        omega = g.add(omega, extra)

    total = g.add(g.add(psi, g.scale(phi, cfg.effective_alpha)), g.scale(omega, cfg.effective_beta))
    return g.build({'psi': psi, 'phi': phi, 'omega': omega, 'total': total, 'conf': conf})


@dataclass
class AttackResult:
    params: List[CubeParams]
    trace: pd.DataFrame
    best_step: int
    best_psi: float
    detector_digest: str
    config_hash: str
    roa: Optional[DataCube] = None
    extras: Dict[str, float] = field(default_factory=dict)


def _as_list(params: Union[CubeParams, Sequence[CubeParams]]) -> List[CubeParams]:
    return [params] if isinstance(params, CubeParams) else list(params)


def optimize_cube(params0: Union[CubeParams, Sequence[CubeParams]], train: Sequence[DataCube], roa: DataCube,
                  detector: DetectorModel, index: SpectralIndex, cfg: AttackConfig) -> AttackResult:
    """Adam on the cube logits only; detector and index stay constant.

    Returns the params with the lowest running-mean Psi over the last
    cfg.best_window steps, and the per-step loss trace.
    """
    params = _as_list(params0)
    if not train:
        raise AttackError("attack training set D is empty")
    if len(params) != len(cfg.layout):
        raise AttackError(f"{len(params)} cubes given for a layout of {len(cfg.layout)}")
    for p, slot in zip(params, cfg.layout):
        _check_index(p, index)
        if (p.height, p.width) != (slot.height, slot.width):
            raise AttackError(f"cube {p.height}x{p.width} does not match layout slot {slot.height}x{slot.width}")

    digest_before = detector.digest()
    host_size = (train[0].height, train[0].width)
    roa_v = extract_bands(roa, BANDS_V).astype(np.float64)
    states = [AdamState.fresh(p.logits.shape, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_epsilon) for p in params]

    rows: List[Dict[str, float]] = []
    best = (list(params), -1, math.inf)
    last_good = list(params)
    window: List[float] = []

    for step in range(cfg.steps):
        rng = make_rng(cfg.seed, 'attack-step', step)
        picks = rng.choice(len(train), size=cfg.batch_size, replace=cfg.batch_size > len(train))
        hosts = [train[i].data.astype(np.float64) for i in picks]
        transforms = [sample_transform(make_rng(cfg.seed, 'attack-transform', step, k), cfg, host_size,
                                       bands=hosts[0].shape[2]) for k in range(len(hosts))]
        crops = [random_crop(roa_v, p.height, p.width, make_rng(cfg.seed, 'attack-crop', step, j))
                 for j, p in enumerate(params)]

        graph = build_attack_graph(params, hosts, transforms, crops, detector, index, cfg)
        bindings = {f"logits{j}": p.logits for j, p in enumerate(params)}
        outputs, grads = value_and_gradient(graph, bindings, list(bindings), 'total')

        row = {
            'step': step,
            'psi': float(outputs['psi']),
            'phi': float(outputs['phi']),
            'omega': float(outputs['omega']),
            'total': float(outputs['total']),
            'mean_conf': float(np.mean(outputs['conf'])),
        }
        if not all(math.isfinite(row[k]) for k in ('psi', 'phi', 'omega', 'total')):
            trace = pd.DataFrame(rows, columns=TRACE_COLUMNS)
            raise NonFiniteLossError(f"non-finite attack loss at step {step}: {row}", last_good, trace)
        rows.append(row)
        last_good = list(params)

        window.append(row['psi'])
        if len(window) > cfg.best_window:
            window.pop(0)
        # short runs never fill the window; compare every step then
        if len(window) == cfg.best_window or cfg.steps < cfg.best_window:
            running = float(np.mean(window))
            if running < best[2]:
                best = (list(params), step, running)

        updated = []
        for j, p in enumerate(params):
            new, states[j] = adam_step(p.logits, grads[f"logits{j}"], states[j])
            updated.append(CubeParams(new, p.hull))
        params = updated

        if step % 50 == 0 or step == cfg.steps - 1:
            logger.info(f"ATTACK_STEP: step={step} psi={row['psi']:.4f} phi={row['phi']:.4f} "
                        f"omega={row['omega']:.4f} total={row['total']:.4f} mean_conf={row['mean_conf']:.4f}")

    if detector.digest() != digest_before:
        raise AttackError("detector weights changed during cube optimization")

    trace = pd.DataFrame(rows, columns=TRACE_COLUMNS)
    best_params, best_step, best_psi = best
    if cfg.steps == 0:
        best_params = _as_list(params0)
    return AttackResult(best_params, trace, best_step, best_psi, digest_before, cfg.config_hash(), roa)


# ============================================================
# PERSISTENCE
# ============================================================

def attack_artifact_paths(out_path: str, cube_count: int) -> Dict[str, object]:
    stem, _ = os.path.splitext(out_path)
    cubes_ = [out_path] if cube_count == 1 else [f"{stem}.cube{j}.msc1" for j in range(cube_count)]
    return {
        'cubes': cubes_,
        'logits': [f"{stem}.logits{j}.npy" for j in range(cube_count)],
        'sidecar': f"{stem}.json",
        'trace': f"{stem}.trace.csv",
        'roa': f"{stem}.roa.msc1",
    }


def save_attack_result(result: AttackResult, out_path: str, index: SpectralIndex,
                       cfg: AttackConfig, seed: int) -> List[str]:
    """MSC1 cube(s), logits .npy, ROA cube, trace CSV and a sidecar JSON; returns written paths"""
    paths = attack_artifact_paths(out_path, len(result.params))
    ensure_dir_exists(os.path.dirname(out_path))
    written = []
    for params, cube_path, logits_path in zip(result.params, paths['cubes'], paths['logits']):
        write_cube(DataCube(np.clip(realize_cube(params, index), 0.0, 1.0).astype(np.float32)), cube_path)
        np.save(logits_path, params.logits)
        written += [cube_path, logits_path]
    if result.roa is not None:
        write_cube(result.roa, paths['roa'])
        written.append(paths['roa'])
    result.trace.to_csv(paths['trace'], index=False, float_format='%.10g', lineterminator='\n')
    written.append(paths['trace'])

    sidecar = {
        'logits_shapes': [list(p.logits.shape) for p in result.params],
        'hull': [p.hull for p in result.params],
        'layout': [slot.model_dump() for slot in cfg.layout],
        'seed': seed,
        'config_hash': result.config_hash,
        'config': cfg.model_dump(),
        'detector_digest': result.detector_digest,
        'index_names': list(index.names),
        'best_step': result.best_step,
        'roa_terrain': result.roa.terrain if result.roa is not None else None,
    }
    if not save_json(sidecar, paths['sidecar']):
        raise AttackError(f"could not write sidecar {paths['sidecar']}")
    written.append(paths['sidecar'])
    logger.info(f"ATTACK_SAVED: {len(result.params)} cube(s) -> {out_path}")
    return written


def load_attack_result(out_path: str) -> Tuple[List[CubeParams], AttackConfig, Optional[DataCube]]:
    """Cube params, attack config and ROA cube of a saved attack"""
    stem, _ = os.path.splitext(out_path)
    sidecar = load_json(f"{stem}.json")
    if sidecar is None:
        raise AttackError(f"attack sidecar not found: {stem}.json")
    cfg = AttackConfig.model_validate(sidecar['config'])
    paths = attack_artifact_paths(out_path, len(sidecar['logits_shapes']))
    params = []
    for logits_path, hull in zip(paths['logits'], sidecar['hull']):
        if not os.path.exists(logits_path):
            raise AttackError(f"cube logits not found: {logits_path}")
        params.append(CubeParams(np.load(logits_path), bool(hull)))
    roa = None
    if os.path.exists(paths['roa']):
        cube = read_cube(paths['roa'])
        roa = DataCube(cube.data, cube.ground_resolution_m, sidecar.get('roa_terrain') or '')
    return params, cfg, roa
