"""
Cloud Detector
Small multispectral CNN: conv stack + dense head with a sigmoid confidence.
Two-stage training (all layers on TH30, then dense head only on TH70),
weighted BCE, exponential learning-rate decay and the MSDM container.
"""
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from config import BCE_EPSILON, CLOUD_BANDS, CONFIDENCE_THRESHOLD, FALSE_POSITIVE_WEIGHT, INITIAL_LR, LR_DECAY
from cubes import BandSubset, LabeledDataset
from grad import AdamState, GraphBuilder, Ref, adam_step, evaluate, make_rng, value_and_gradient
from utils import PipelineError, arrays_digest, ensure_dir_exists

logger = logging.getLogger(__name__)

MSDM_MAGIC = b'MSDM'
MSDM_VERSION = 1


class DetectorError(PipelineError):
    """Raised on inconsistent architectures, inputs or training data"""
    pass


class ModelFormatError(DetectorError):
    """Raised on unreadable MSDM containers"""
    pass


class TrainingDivergedError(DetectorError):
    """Raised when the training loss stops being finite"""

    def __init__(self, stage: int, epoch: int, batch: int, lr: float, loss: float):
        self.stage, self.epoch, self.batch, self.lr, self.loss = stage, epoch, batch, lr, loss
        super().__init__(f"training diverged: stage {stage} epoch {epoch} batch {batch} "
                         f"lr {lr:.3e} loss {loss}")


# ============================================================
# ARCHITECTURE
# ============================================================

class ConvSpec(BaseModel):
    out_channels: int = Field(ge=1)
    kernel: int = Field(3, ge=1)
    stride: int = Field(1, ge=1)
    padding: int = Field(0, ge=0)
    pool: bool = True


def _default_convs() -> List[ConvSpec]:
    return [
        ConvSpec(out_channels=16, kernel=5, stride=2, padding=2),
        ConvSpec(out_channels=32, kernel=3, stride=1, padding=1),
        ConvSpec(out_channels=64, kernel=3, stride=1, padding=1),
        ConvSpec(out_channels=64, kernel=3, stride=1, padding=1),
    ]


class ArchConfig(BaseModel):
    input_bands: List[int] = Field(default_factory=lambda: list(CLOUD_BANDS))
    input_size: int = Field(128, ge=1)
    conv_specs: List[ConvSpec] = Field(default_factory=_default_convs)
    dense_specs: List[int] = Field(default_factory=lambda: [75, 1])
    width_multiplier: float = Field(1.0, gt=0.0)
    extra_conv_layers: int = Field(0, ge=0)

    @model_validator(mode='after')
    def _check_layers(self):
        if not self.conv_specs:
            raise ValueError("at least one conv layer is required")
        if not self.dense_specs or self.dense_specs[-1] != 1:
            raise ValueError("final dense width must be 1 (scalar confidence)")
        if any(w < 1 for w in self.dense_specs):
            raise ValueError("dense widths must be >= 1")
        BandSubset(tuple(self.input_bands))
        return self

    @property
    def input_subset(self) -> BandSubset:
        return BandSubset(tuple(self.input_bands))

    def effective_convs(self) -> List[ConvSpec]:
        """Conv layers after width scaling; extra layers grow channels by sqrt(2) each, no pooling"""
        layers = [spec.model_copy(update={'out_channels': max(1, round(spec.out_channels * self.width_multiplier))})
                  for spec in self.conv_specs]
        channels = layers[-1].out_channels
        for k in range(1, self.extra_conv_layers + 1):
            layers.append(ConvSpec(out_channels=round(channels * math.sqrt(2) ** k), kernel=3, stride=1,
                                   padding=1, pool=False))
        return layers

    def effective_dense(self) -> List[int]:
        hidden = [max(1, round(w * self.width_multiplier)) for w in self.dense_specs[:-1]]
        return hidden + [1]

    def feature_shape(self, height: Optional[int] = None, width: Optional[int] = None) -> Tuple[int, int, int]:
        h = self.input_size if height is None else height
        w = self.input_size if width is None else width
        channels = len(self.input_bands)
        for i, spec in enumerate(self.effective_convs()):
            h = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
            w = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
            if h < 1 or w < 1:
                raise DetectorError(f"conv{i}: feature map smaller than 1x1")
            if spec.pool:
                h, w = h // 2, w // 2
                if h < 1 or w < 1:
                    raise DetectorError(f"conv{i}: pooled feature map smaller than 1x1")
            channels = spec.out_channels
        return h, w, channels

    def weight_shapes(self, height: Optional[int] = None, width: Optional[int] = None) -> Dict[str, Tuple[int, ...]]:
        shapes: Dict[str, Tuple[int, ...]] = {}
        cin = len(self.input_bands)
        for i, spec in enumerate(self.effective_convs()):
            shapes[f"conv{i}.w"] = (spec.kernel, spec.kernel, cin, spec.out_channels)
            shapes[f"conv{i}.b"] = (spec.out_channels,)
            cin = spec.out_channels
        fh, fw, fc = self.feature_shape(height, width)
        din = fh * fw * fc
        for i, width_ in enumerate(self.effective_dense()):
            shapes[f"dense{i}.w"] = (din, width_)
            shapes[f"dense{i}.b"] = (width_,)
            din = width_
        return shapes

    def parameter_count(self, height: Optional[int] = None, width: Optional[int] = None) -> int:
        return int(sum(np.prod(s) for s in self.weight_shapes(height, width).values()))


@dataclass
class EpochRecord:
    stage: int
    epoch: int
    lr: float
    loss: float
    val_accuracy: float = float('nan')


@dataclass
class DetectorModel:
    arch: ArchConfig
    weights: Dict[str, np.ndarray]
    feature_frozen: bool = False
    history: List[EpochRecord] = field(default_factory=list)

    @property
    def parameter_count(self) -> int:
        return int(sum(w.size for w in self.weights.values()))

    @property
    def footprint_mb(self) -> float:
        return 4.0 * self.parameter_count / 2 ** 20

    def conv_names(self) -> List[str]:
        return [n for n in self.weights if n.startswith('conv')]

    def dense_names(self) -> List[str]:
        return [n for n in self.weights if n.startswith('dense')]

    def digest(self) -> str:
        return arrays_digest(self.weights)


def build_detector(arch: ArchConfig, seed: int = 0) -> DetectorModel:
    """He-uniform weights, zero biases; deterministic in seed"""
    shapes = arch.weight_shapes()
    weights = {}
    for name, shape in shapes.items():
        if name.endswith('.b'):
            weights[name] = np.zeros(shape, dtype=np.float32)
            continue
        fan_in = int(np.prod(shape[:-1]))
        limit = math.sqrt(6.0 / fan_in)
        weights[name] = make_rng(seed, 'detector-init', name).uniform(-limit, limit, shape).astype(np.float32)
    model = DetectorModel(arch, weights)
    logger.info(f"DETECTOR_BUILT: {len(arch.effective_convs())} conv, {len(arch.effective_dense())} dense, "
                f"{model.parameter_count} parameters at {arch.input_size}x{arch.input_size}")
    return model


# ============================================================
# FORWARD
# ============================================================

def detector_graph(g: GraphBuilder, model: DetectorModel, x: Ref, height: int, width: int,
                   trainable: Sequence[str] = ()) -> Tuple[Ref, Ref]:
    """Record the detector on x (N x H x W x B); returns (logits, confidence) refs of shape N x 1.

    Weights named in `trainable` become graph inputs, the rest constants.
    """
    expected = model.arch.weight_shapes(height, width)
    for name, shape in expected.items():
        if model.weights[name].shape != shape:
            raise DetectorError(f"input of {height}x{width} does not match weight {name} "
                                f"{model.weights[name].shape}, expected {shape}")
    refs = {}
    for name, w in model.weights.items():
        refs[name] = g.input(name, w.shape) if name in trainable else g.constant(w, name=name)

    h = x
    for i, spec in enumerate(model.arch.effective_convs()):
        h = g.relu(g.conv2d(h, refs[f"conv{i}.w"], refs[f"conv{i}.b"], spec.stride, spec.padding))
        if spec.pool:
            h = g.maxpool2(h)
    fh, fw, fc = model.arch.feature_shape(height, width)
    h = g.reshape(h, (-1, fh * fw * fc))
    dense = model.arch.effective_dense()
    for i in range(len(dense)):
        h = g.dense(h, refs[f"dense{i}.w"], refs[f"dense{i}.b"])
        if i < len(dense) - 1:
            h = g.relu(h)
    return h, g.sigmoid(h)


def _check_input(model: DetectorModel, batch: np.ndarray):
    bands = len(model.arch.input_bands)
    if batch.ndim != 4:
        raise DetectorError(f"expected N x H x W x B input, got shape {batch.shape}")
    if batch.shape[-1] != bands:
        raise DetectorError(f"input has {batch.shape[-1]} bands, detector expects {bands} "
                            f"(bands {model.arch.input_bands})")


def predict_batch(model: DetectorModel, batch: np.ndarray, chunk: int = 16) -> np.ndarray:
    """Confidences for an N x H x W x B stack"""
    batch = np.asarray(batch)
    _check_input(model, batch)
    out = []
    for start in range(0, batch.shape[0], chunk):
        part = batch[start:start + chunk]
        g = GraphBuilder()
        x = g.input('x', part.shape)
        _, conf = detector_graph(g, model, x, part.shape[1], part.shape[2])
        out.append(evaluate(g.build({'conf': conf}), {'x': part})['conf'][:, 0])
    return np.concatenate(out) if out else np.zeros(0)


def forward(model: DetectorModel, subcube: np.ndarray) -> float:
    """Cloud confidence in (0, 1) for one H x W x B subcube"""
    subcube = np.asarray(subcube)
    if subcube.ndim != 3:
        raise DetectorError(f"expected H x W x B subcube, got shape {subcube.shape}")
    return float(predict_batch(model, subcube[None])[0])


# ============================================================
# LOSS AND SCHEDULE
# ============================================================

def loss_weighted_bce(y: float, y_hat: float, fp_weight: float = FALSE_POSITIVE_WEIGHT,
                      epsilon: float = BCE_EPSILON) -> float:
    """L = -y log(y_hat) - w (1 - y) log(1 - y_hat), y_hat clamped to [eps, 1 - eps]"""
    p = min(max(float(y_hat), epsilon), 1.0 - epsilon)
    return float(-y * math.log(p) - fp_weight * (1.0 - y) * math.log(1.0 - p))


def bce_graph(g: GraphBuilder, conf: Ref, targets: np.ndarray, fp_weight: float = FALSE_POSITIVE_WEIGHT,
              epsilon: float = BCE_EPSILON) -> Ref:
    """Batch mean of the weighted BCE; targets shaped like conf"""
    targets = np.asarray(targets, dtype=np.float64)
    p = g.clip(conf, epsilon, 1.0 - epsilon)
    pos = g.mul(g.log(p), g.constant(targets))
    one_minus = g.sub(g.constant(np.ones_like(targets)), p)
    neg = g.mul(g.log(one_minus), g.constant(fp_weight * (1.0 - targets)))
    return g.scale(g.mean(g.add(pos, neg)), -1.0)


def lr_schedule(eta0: float, epoch: int, decay: float = LR_DECAY) -> float:
    """eta_k = eta0 * exp(-decay * k)"""
    if epoch < 0:
        raise DetectorError(f"epoch must be >= 0, got {epoch}")
    return eta0 * math.exp(-decay * epoch)


# ============================================================
# TRAINING
# ============================================================

class TrainConfig(BaseModel):
    stage1_epochs: int = Field(30, ge=1)
    stage2_epochs: int = Field(30, ge=0)
    initial_lr: float = Field(INITIAL_LR, gt=0.0)
    lr_decay: float = Field(LR_DECAY, ge=0.0)
    batch_size: int = Field(8, ge=1)
    seed: int = 0
    false_positive_weight: float = Field(FALSE_POSITIVE_WEIGHT, ge=0.0)
    epsilon: float = Field(BCE_EPSILON, gt=0.0, lt=0.5)
    augment: bool = True
    noise_sigma: float = Field(0.01, ge=0.0)


def _require_both_classes(dataset: LabeledDataset, what: str):
    if len(dataset) == 0:
        raise DetectorError(f"{what} dataset is empty")
    targets = dataset.targets
    if targets.min() == targets.max():
        only = 'cloudy' if targets[0] == 1.0 else 'not_cloudy'
        raise DetectorError(f"{what} dataset is single-class (all {only}); both classes are required")


def _augment(batch: np.ndarray, rng: np.random.Generator, noise_sigma: float) -> np.ndarray:
    out = batch.copy()
    for i in range(out.shape[0]):
        if rng.random() < 0.5:
            out[i] = out[i, :, ::-1]
        if rng.random() < 0.5:
            out[i] = out[i, ::-1]
    if noise_sigma > 0:
        out = np.clip(out + rng.normal(0.0, noise_sigma, out.shape), 0.0, 1.0)
    return out


def _accuracy(model: DetectorModel, stack: Optional[np.ndarray], targets: Optional[np.ndarray]) -> float:
    if stack is None or len(stack) == 0:
        return float('nan')
    predicted = predict_batch(model, stack) > CONFIDENCE_THRESHOLD
    return float(np.mean(predicted == (targets > 0.5)))


def _run_stage(model: DetectorModel, stage: int, epochs: int, stack: np.ndarray, targets: np.ndarray,
               trainable: List[str], cfg: TrainConfig,
               val: Tuple[Optional[np.ndarray], Optional[np.ndarray]]) -> None:
    states = {name: AdamState.fresh(model.weights[name].shape, cfg.initial_lr) for name in trainable}
    n, height, width = stack.shape[0], stack.shape[1], stack.shape[2]

    for epoch in range(epochs):
        lr = lr_schedule(cfg.initial_lr, epoch, cfg.lr_decay)
        order = make_rng(cfg.seed, 'train-order', stage, epoch).permutation(n)
        losses = []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            x = stack[idx].astype(np.float64)
            if cfg.augment:
                x = _augment(x, make_rng(cfg.seed, 'train-augment', stage, epoch, b), cfg.noise_sigma)

            g = GraphBuilder()
            xr = g.input('x', x.shape)
            _, conf = detector_graph(g, model, xr, height, width, trainable)
            loss = bce_graph(g, conf, targets[idx, None], cfg.false_positive_weight, cfg.epsilon)
            outputs, grads = value_and_gradient(g.build({'loss': loss}), {'x': x, **{n: model.weights[n] for n in trainable}},
                                                trainable, 'loss')

            value = float(outputs['loss'])
            if not math.isfinite(value):
                raise TrainingDivergedError(stage, epoch, b, lr, value)
            losses.append(value)
            for name in trainable:
                new, states[name] = adam_step(model.weights[name], grads[name], states[name], lr=lr)
                model.weights[name] = new.astype(np.float32)

        record = EpochRecord(stage, epoch, lr, float(np.mean(losses)), _accuracy(model, *val))
        model.history.append(record)
        logger.info(f"TRAIN_EPOCH: stage={stage} epoch={epoch} lr={lr:.6f} "
                    f"loss={record.loss:.5f} val_acc={record.val_accuracy:.4f}")


def train_two_stage(model: DetectorModel, th30: LabeledDataset, th70: LabeledDataset, cfg: TrainConfig,
                    val30: Optional[LabeledDataset] = None,
                    val70: Optional[LabeledDataset] = None) -> DetectorModel:
    """Stage 1 trains every layer on TH30; stage 2 trains only the dense head on TH70.

    Returns a new model; the input model is left untouched.
    """
    _require_both_classes(th30, 'TH30')
    _require_both_classes(th70, 'TH70')
    subset = model.arch.input_subset

    trained = DetectorModel(model.arch, {k: v.copy() for k, v in model.weights.items()},
                            False, list(model.history))

    def as_arrays(ds: Optional[LabeledDataset]):
        return (None, None) if ds is None or len(ds) == 0 else (ds.band_stack(subset), ds.targets)

    stack30, targets30 = as_arrays(th30)
    _check_input(trained, stack30)
    logger.info(f"TRAIN_START: stage1 {len(th30)} items {th30.class_counts()}, "
                f"stage2 {len(th70)} items {th70.class_counts()}")
    _run_stage(trained, 1, cfg.stage1_epochs, stack30, targets30, list(trained.weights), cfg, as_arrays(val30))

    if cfg.stage2_epochs > 0:
        trained.feature_frozen = True
        stack70, targets70 = as_arrays(th70)
        _run_stage(trained, 2, cfg.stage2_epochs, stack70, targets70, trained.dense_names(), cfg,
                   as_arrays(val70))
    return trained


@dataclass
class DetectorReport:
    accuracy: float
    false_positive_rate: float
    footprint_mb: float
    items: int


def evaluate_detector(model: DetectorModel, dataset: LabeledDataset) -> DetectorReport:
    """Accuracy, false-positive rate (not-cloudy items scored cloudy) and weight footprint"""
    if len(dataset) == 0:
        raise DetectorError("cannot evaluate on an empty dataset")
    predicted = predict_batch(model, dataset.band_stack(model.arch.input_subset)) > CONFIDENCE_THRESHOLD
    truth = dataset.targets > 0.5
    negatives = ~truth
    fpr = float(np.mean(predicted[negatives])) if negatives.any() else float('nan')
    return DetectorReport(float(np.mean(predicted == truth)), fpr, model.footprint_mb, len(dataset))


# ============================================================
# MSDM CONTAINER
# ============================================================

def save_model(model: DetectorModel, path: str):
    """MSDM v1: magic, version, length-prefixed arch JSON, then named float32 tensors"""
    ensure_dir_exists(os.path.dirname(path))
    meta = json.dumps({'arch': model.arch.model_dump(), 'feature_frozen': model.feature_frozen},
                      sort_keys=True).encode('utf-8')
    with open(path, 'wb') as f:
        f.write(MSDM_MAGIC)
        f.write(struct.pack('<II', MSDM_VERSION, len(meta)))
        f.write(meta)
        f.write(struct.pack('<I', len(model.weights)))
        for name in sorted(model.weights):
            tensor = np.ascontiguousarray(model.weights[name], dtype='<f4')
            encoded = name.encode('utf-8')
            f.write(struct.pack('<H', len(encoded)))
            f.write(encoded)
            f.write(struct.pack('<B', tensor.ndim))
            f.write(struct.pack(f'<{tensor.ndim}I', *tensor.shape))
            f.write(tensor.tobytes())


class _Reader:
    def __init__(self, raw: bytes, path: str):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise ModelFormatError(f"{self.path}: truncated file at byte {self.pos}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_model(path: str) -> DetectorModel:
    if not os.path.exists(path):
        raise ModelFormatError(f"model file not found: {path}")
    with open(path, 'rb') as f:
        reader = _Reader(f.read(), path)

    if reader.take(4) != MSDM_MAGIC:
        raise ModelFormatError(f"{path}: bad magic, not an MSDM container")
    version, meta_len = reader.unpack('<II')
    if version != MSDM_VERSION:
        raise ModelFormatError(f"{path}: container version {version}, expected {MSDM_VERSION}")
    try:
        meta = json.loads(reader.take(meta_len).decode('utf-8'))
        arch = ArchConfig.model_validate(meta['arch'])
    except (ValueError, KeyError) as e:
        raise ModelFormatError(f"{path}: corrupt architecture block: {e}") from e

    (count,) = reader.unpack('<I')
    weights = {}
    for _ in range(count):
        (name_len,) = reader.unpack('<H')
        name = reader.take(name_len).decode('utf-8', errors='replace')
        (ndim,) = reader.unpack('<B')
        shape = reader.unpack(f'<{ndim}I')
        size = int(np.prod(shape)) if ndim else 1
        weights[name] = np.frombuffer(reader.take(4 * size), dtype='<f4').reshape(shape).astype(np.float32)
    if reader.pos != len(reader.raw):
        raise ModelFormatError(f"{path}: {len(reader.raw) - reader.pos} trailing bytes")

    expected = arch.weight_shapes()
    if set(expected) != set(weights):
        raise ModelFormatError(f"{path}: tensors {sorted(weights)} do not match architecture {sorted(expected)}")
    for name, shape in expected.items():
        if weights[name].shape != shape:
            raise ModelFormatError(f"{path}: tensor {name} has shape {weights[name].shape}, expected {shape}")
    return DetectorModel(arch, weights, bool(meta.get('feature_frozen', False)))
