"""
Reverse-mode Differentiation Engine
Small tape of numpy primitives used by the detector and the attack losses.

A graph is recorded with GraphBuilder, frozen into an immutable Graph and then
run with evaluate() or value_and_gradient(). Graphs are cheap to record, so the
callers rebuild one per forward pass (per training batch, per attack step).
Values are carried in float64; callers store float32 where a format requires it.
"""
import logging
import zlib
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from utils import PipelineError

logger = logging.getLogger(__name__)

Tensor = np.ndarray
Ref = int

LEAF_OPS = ('input', 'constant')


class GradError(PipelineError):
    """Raised on invalid graphs, bindings or gradient requests"""
    pass


class ShapeError(GradError):
    """Raised when a primitive receives inputs of inconsistent shapes"""
    pass


class UnboundLeafError(GradError):
    """Raised when an input leaf has no bound tensor"""
    pass


# ============================================================
# RNG
# ============================================================

def _stream_key(key: Any) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    return zlib.crc32(str(key).encode('utf-8'))


def make_rng(seed: int, *keys: Any) -> np.random.Generator:
    """Counter-based (Philox) generator for the stream identified by seed and keys.

    Streams with different keys are independent, so work split across threads
    draws the same numbers regardless of how it is scheduled.
    """
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_stream_key(k) for k in keys))
    return np.random.Generator(np.random.Philox(seq))


# ============================================================
# GRAPH
# ============================================================

@dataclass(frozen=True)
class Node:
    """One primitive-op record"""
    id: int
    op: str
    inputs: Tuple[int, ...]
    params: Mapping[str, Any] = field(default_factory=dict)
    name: Optional[str] = None

    def label(self) -> str:
        suffix = f" '{self.name}'" if self.name else ''
        return f"node #{self.id} ({self.op}{suffix})"


@dataclass(frozen=True)
class Graph:
    """Immutable recorded program: nodes in topological order, named leaves and outputs"""
    nodes: Tuple[Node, ...]
    inputs: Mapping[str, int]
    outputs: Mapping[str, int]


@dataclass(frozen=True)
class Primitive:
    forward: Callable[[List[Tensor], Mapping[str, Any]], Tensor]
    vjp: Callable[[Tensor, List[Tensor], Tensor, Mapping[str, Any], List[bool]], List[Optional[Tensor]]]
    branch: Optional[Callable[[List[Tensor], Tensor, Mapping[str, Any]], Tensor]] = None


def _same_shape(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


# --- elementwise ------------------------------------------------------

def _add_fwd(xs, p):
    _same_shape(xs[0], xs[1], 'add')
    return xs[0] + xs[1]


def _sub_fwd(xs, p):
    _same_shape(xs[0], xs[1], 'sub')
    return xs[0] - xs[1]


def _mul_fwd(xs, p):
    _same_shape(xs[0], xs[1], 'mul')
    return xs[0] * xs[1]


def _log_fwd(xs, p):
    if np.any(xs[0] <= 0):
        raise GradError("log of a non-positive value")
    return np.log(xs[0])


def _sigmoid_fwd(xs, p):
    return expit(xs[0])


def _softmax_fwd(xs, p):
    z = xs[0] - np.max(xs[0], axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def _softmax_vjp(gy, xs, y, p, needs):
    return [y * (gy - np.sum(gy * y, axis=-1, keepdims=True))]


def _clip_vjp(gy, xs, y, p, needs):
    inside = (xs[0] >= p['lo']) & (xs[0] <= p['hi'])
    return [gy * inside]


def _clip_branch(xs, y, p):
    return (xs[0] > p['hi']).astype(np.int8) - (xs[0] < p['lo']).astype(np.int8)


# --- reductions -------------------------------------------------------

def _l2_norm_vjp(gy, xs, y, p, needs):
    if y == 0:
        return [np.zeros_like(xs[0])]
    return [xs[0] / y * gy]


def _min_l2_fwd(xs, p):
    pts, cols = xs
    if pts.ndim != 2 or cols.ndim != 2 or pts.shape[1] != cols.shape[0]:
        raise ShapeError(f"min_l2: points {pts.shape} incompatible with columns {cols.shape}")
    d2 = np.sum((pts[:, :, None] - cols[None, :, :]) ** 2, axis=1)
    best = np.argmin(d2, axis=1)
    return np.sqrt(d2[np.arange(pts.shape[0]), best])


def _min_l2_nearest(pts, cols):
    d2 = np.sum((pts[:, :, None] - cols[None, :, :]) ** 2, axis=1)
    return np.argmin(d2, axis=1)


def _min_l2_vjp(gy, xs, y, p, needs):
    pts, cols = xs
    best = _min_l2_nearest(pts, cols)
    diff = pts - cols[:, best].T
    safe = np.where(y > 0, y, 1.0)
    gp = np.where((y > 0)[:, None], diff / safe[:, None], 0.0) * gy[:, None]
    gc = None
    if needs[1]:
        gc = np.zeros_like(cols)
        np.add.at(gc.T, best, -gp)
    return [gp if needs[0] else None, gc]


def _min_l2_branch(xs, y, p):
    return _min_l2_nearest(xs[0], xs[1])


# --- linear algebra and layers -----------------------------------------

def _matmul_fwd(xs, p):
    a, b = xs
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return a @ b


def _dense_fwd(xs, p):
    x, w, b = xs
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"dense: input {x.shape}, weight {w.shape}, bias {b.shape}")
    return x @ w + b


def _dense_vjp(gy, xs, y, p, needs):
    x, w, _ = xs
    return [gy @ w.T if needs[0] else None,
            x.T @ gy if needs[1] else None,
            gy.sum(axis=0) if needs[2] else None]


def _conv_windows(x: Tensor, kh: int, kw: int, stride: int, padding: int) -> Tensor:
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    if xp.shape[1] < kh or xp.shape[2] < kw:
        raise ShapeError(f"conv2d: padded input {xp.shape[1:3]} smaller than kernel {(kh, kw)}")
    return sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]


def _conv2d_fwd(xs, p):
    x, w, b = xs
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected NHWC input and KKIO kernel, got {x.shape} and {w.shape}")
    kh, kw, cin, cout = w.shape
    if x.shape[3] != cin or b.shape != (cout,):
        raise ShapeError(f"conv2d: input channels {x.shape[3]}, kernel {w.shape}, bias {b.shape}")
    win = _conv_windows(x, kh, kw, p['stride'], p['padding'])
    # win: (N, Ho, Wo, Cin, kh, kw)
    return np.tensordot(win, w, axes=([3, 4, 5], [2, 0, 1])) + b


def _conv2d_vjp(gy, xs, y, p, needs):
    x, w, _ = xs
    kh, kw, cin, cout = w.shape
    stride, pad = p['stride'], p['padding']
    gx = gw = gb = None
    if needs[1]:
        win = _conv_windows(x, kh, kw, stride, pad)
        gw = np.tensordot(win, gy, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
    if needs[2]:
        gb = gy.sum(axis=(0, 1, 2))
    if needs[0]:
        n, h, wd, _ = x.shape
        ho, wo = gy.shape[1], gy.shape[2]
        gxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, cin))
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += gy @ w[i, j].T
        gx = gxp[:, pad:pad + h, pad:pad + wd, :]
    return [gx, gw, gb]


def _pool_windows(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"maxpool2: expected NHWC input, got {x.shape}")
    n, h, w, c = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2: feature map {h}x{w} smaller than the 2x2 window")
    h2, w2 = h // 2, w // 2
    r = x[:, :2 * h2, :2 * w2, :].reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    return r.reshape(n, h2, w2, c, 4)


def _maxpool2_fwd(xs, p):
    return _pool_windows(xs[0]).max(axis=-1)


def _maxpool2_vjp(gy, xs, y, p, needs):
    x = xs[0]
    n, h, w, c = x.shape
    r = _pool_windows(x)
    h2, w2 = r.shape[1], r.shape[2]
    # ties go to the lowest window index
    idx = np.argmax(r, axis=-1)
    g4 = np.zeros(r.shape)
    np.put_along_axis(g4, idx[..., None], gy[..., None], axis=-1)
    g = g4.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, 2 * h2, 2 * w2, c)
    gx = np.zeros_like(x)
    gx[:, :2 * h2, :2 * w2, :] = g
    return [gx]


def _maxpool2_branch(xs, y, p):
    return np.argmax(_pool_windows(xs[0]), axis=-1)


# --- structural -------------------------------------------------------

def _reshape_vjp(gy, xs, y, p, needs):
    return [gy.reshape(xs[0].shape)]


def _take_fwd(xs, p):
    x = xs[0]
    idx = p['indices']
    if x.ndim < 1 or max(idx) >= x.shape[-1] or min(idx) < 0:
        raise ShapeError(f"take: indices {list(idx)} out of range for last axis {x.shape[-1:]}")
    return x[..., list(idx)]


def _take_vjp(gy, xs, y, p, needs):
    g = np.zeros_like(xs[0])
    g[..., list(p['indices'])] = gy
    return [g]


def _paste_fwd(xs, p):
    host, patch = xs
    r, c = p['row'], p['col']
    if host.ndim != 3 or patch.ndim != 3 or host.shape[2] != patch.shape[2]:
        raise ShapeError(f"paste: host {host.shape} and patch {patch.shape} are incompatible")
    m, n = patch.shape[0], patch.shape[1]
    if r < 0 or c < 0 or r + m > host.shape[0] or c + n > host.shape[1]:
        raise ShapeError(f"paste: patch {m}x{n} at ({r}, {c}) leaves host {host.shape[:2]}")
    out = host.copy()
    out[r:r + m, c:c + n, :] = patch
    return out


def _paste_vjp(gy, xs, y, p, needs):
    host, patch = xs
    r, c = p['row'], p['col']
    m, n = patch.shape[0], patch.shape[1]
    gh = None
    if needs[0]:
        gh = gy.copy()
        gh[r:r + m, c:c + n, :] = 0.0
    gp = gy[r:r + m, c:c + n, :].copy() if needs[1] else None
    return [gh, gp]


def _stack_fwd(xs, p):
    for x in xs[1:]:
        _same_shape(xs[0], x, 'stack')
    return np.stack(xs, axis=0)


PRIMITIVES: Dict[str, Primitive] = {
    'add': Primitive(_add_fwd, lambda gy, xs, y, p, nd: [gy, gy]),
    'sub': Primitive(_sub_fwd, lambda gy, xs, y, p, nd: [gy, -gy]),
    'mul': Primitive(_mul_fwd, lambda gy, xs, y, p, nd: [gy * xs[1], gy * xs[0]]),
    'scale': Primitive(lambda xs, p: xs[0] * p['c'], lambda gy, xs, y, p, nd: [gy * p['c']]),
    'log': Primitive(_log_fwd, lambda gy, xs, y, p, nd: [gy / xs[0]]),
    'relu': Primitive(lambda xs, p: np.maximum(xs[0], 0.0),
                      lambda gy, xs, y, p, nd: [gy * (xs[0] > 0)],
                      lambda xs, y, p: xs[0] > 0),
    'sigmoid': Primitive(_sigmoid_fwd, lambda gy, xs, y, p, nd: [gy * y * (1.0 - y)]),
    'softmax': Primitive(_softmax_fwd, _softmax_vjp),
    'clip': Primitive(lambda xs, p: np.clip(xs[0], p['lo'], p['hi']), _clip_vjp, _clip_branch),
    # straight-through: gradient passes unchanged where the clamp is active
    'clamp_st': Primitive(lambda xs, p: np.clip(xs[0], p['lo'], p['hi']), lambda gy, xs, y, p, nd: [gy]),
    'sum': Primitive(lambda xs, p: np.asarray(np.sum(xs[0])),
                     lambda gy, xs, y, p, nd: [np.full(xs[0].shape, float(gy))]),
    'mean': Primitive(lambda xs, p: np.asarray(np.mean(xs[0])),
                      lambda gy, xs, y, p, nd: [np.full(xs[0].shape, float(gy) / xs[0].size)]),
    'sq_l2': Primitive(lambda xs, p: np.asarray(np.sum(xs[0] ** 2)),
                       lambda gy, xs, y, p, nd: [2.0 * xs[0] * gy]),
    'l2_norm': Primitive(lambda xs, p: np.asarray(np.sqrt(np.sum(xs[0] ** 2))), _l2_norm_vjp),
    'min_l2': Primitive(_min_l2_fwd, _min_l2_vjp, _min_l2_branch),
    'matmul': Primitive(_matmul_fwd, lambda gy, xs, y, p, nd: [gy @ xs[1].T if nd[0] else None,
                                                                xs[0].T @ gy if nd[1] else None]),
    'dense': Primitive(_dense_fwd, _dense_vjp),
    'conv2d': Primitive(_conv2d_fwd, _conv2d_vjp),
    'maxpool2': Primitive(_maxpool2_fwd, _maxpool2_vjp, _maxpool2_branch),
    'reshape': Primitive(lambda xs, p: xs[0].reshape(p['shape']), _reshape_vjp),
    'rot90': Primitive(lambda xs, p: np.rot90(xs[0], p['k'], axes=(0, 1)).copy(),
                       lambda gy, xs, y, p, nd: [np.rot90(gy, -p['k'], axes=(0, 1)).copy()]),
    'take': Primitive(_take_fwd, _take_vjp),
    'paste': Primitive(_paste_fwd, _paste_vjp),
    'stack': Primitive(_stack_fwd, lambda gy, xs, y, p, nd: [gy[i] for i in range(len(xs))]),
}


class GraphBuilder:
    """Records primitive ops; every method returns a node reference"""

    def __init__(self):
        self._nodes: List[Node] = []
        self._inputs: Dict[str, int] = {}

    def _add(self, op: str, inputs: Sequence[Ref], name: Optional[str] = None, **params) -> Ref:
        for ref in inputs:
            if not 0 <= ref < len(self._nodes):
                raise GradError(f"{op}: unknown input reference {ref}")
        node = Node(len(self._nodes), op, tuple(inputs), params, name)
        self._nodes.append(node)
        return node.id

    def input(self, name: str, shape: Optional[Tuple[int, ...]] = None) -> Ref:
        if name in self._inputs:
            raise GradError(f"input '{name}' declared twice")
        ref = self._add('input', (), name=name, shape=tuple(shape) if shape is not None else None)
        self._inputs[name] = ref
        return ref

    def constant(self, value, name: Optional[str] = None) -> Ref:
        return self._add('constant', (), name=name, value=np.asarray(value, dtype=np.float64))

    def add(self, a: Ref, b: Ref) -> Ref:
        return self._add('add', (a, b))

    def sub(self, a: Ref, b: Ref) -> Ref:
        return self._add('sub', (a, b))

    def mul(self, a: Ref, b: Ref) -> Ref:
        return self._add('mul', (a, b))

    def scale(self, a: Ref, c: float) -> Ref:
        return self._add('scale', (a,), c=float(c))

    def log(self, a: Ref) -> Ref:
        return self._add('log', (a,))

    def relu(self, a: Ref) -> Ref:
        return self._add('relu', (a,))

    def sigmoid(self, a: Ref) -> Ref:
        return self._add('sigmoid', (a,))

    def softmax(self, a: Ref) -> Ref:
        return self._add('softmax', (a,))

    def clip(self, a: Ref, lo: float, hi: float) -> Ref:
        return self._add('clip', (a,), lo=float(lo), hi=float(hi))

    def clamp_st(self, a: Ref, lo: float = 0.0, hi: float = 1.0) -> Ref:
        return self._add('clamp_st', (a,), lo=float(lo), hi=float(hi))

    def sum(self, a: Ref) -> Ref:
        return self._add('sum', (a,))

    def mean(self, a: Ref) -> Ref:
        return self._add('mean', (a,))

    def sq_l2(self, a: Ref) -> Ref:
        return self._add('sq_l2', (a,))

    def l2_norm(self, a: Ref) -> Ref:
        return self._add('l2_norm', (a,))

    def min_l2(self, points: Ref, columns: Ref) -> Ref:
        return self._add('min_l2', (points, columns))

    def matmul(self, a: Ref, b: Ref) -> Ref:
        return self._add('matmul', (a, b))

    def dense(self, x: Ref, w: Ref, b: Ref) -> Ref:
        return self._add('dense', (x, w, b))

    def conv2d(self, x: Ref, w: Ref, b: Ref, stride: int = 1, padding: int = 0) -> Ref:
        return self._add('conv2d', (x, w, b), stride=int(stride), padding=int(padding))

    def maxpool2(self, x: Ref) -> Ref:
        return self._add('maxpool2', (x,))

    def reshape(self, a: Ref, shape: Tuple[int, ...]) -> Ref:
        return self._add('reshape', (a,), shape=tuple(shape))

    def rot90(self, a: Ref, k: int) -> Ref:
        return self._add('rot90', (a,), k=int(k) % 4)

    def take(self, a: Ref, indices: Sequence[int]) -> Ref:
        indices = tuple(int(i) for i in indices)
        if len(set(indices)) != len(indices):
            raise GradError(f"take: duplicate indices {indices}")
        return self._add('take', (a,), indices=indices)

    def paste(self, host: Ref, patch: Ref, row: int, col: int) -> Ref:
        return self._add('paste', (host, patch), row=int(row), col=int(col))

    def stack(self, refs: Sequence[Ref]) -> Ref:
        if not refs:
            raise GradError("stack: nothing to stack")
        return self._add('stack', tuple(refs))

    def build(self, outputs: Mapping[str, Ref]) -> Graph:
        for name, ref in outputs.items():
            if not 0 <= ref < len(self._nodes):
                raise GradError(f"output '{name}' refers to unknown node {ref}")
        return Graph(tuple(self._nodes), dict(self._inputs), dict(outputs))


# ============================================================
# EXECUTION
# ============================================================

def _bind(node: Node, bindings: Mapping[str, Tensor]) -> Tensor:
    if node.name not in bindings:
        raise UnboundLeafError(f"input '{node.name}' is not bound")
    value = np.asarray(bindings[node.name], dtype=np.float64)
    declared = node.params.get('shape')
    if declared is not None and value.shape != declared:
        raise ShapeError(f"input '{node.name}': bound shape {value.shape}, declared {declared}")
    return value


def _forward(graph: Graph, bindings: Mapping[str, Tensor],
             branches: Optional[Dict[int, Tensor]] = None) -> List[Tensor]:
    values: List[Tensor] = []
    for node in graph.nodes:
        if node.op == 'input':
            values.append(_bind(node, bindings))
            continue
        if node.op == 'constant':
            values.append(node.params['value'])
            continue
        prim = PRIMITIVES[node.op]
        xs = [values[i] for i in node.inputs]
        try:
            y = prim.forward(xs, node.params)
        except GradError as e:
            raise type(e)(f"{node.label()}: {e}") from e
        except (ValueError, IndexError) as e:
            raise ShapeError(f"{node.label()}: {e}") from e
        if branches is not None and prim.branch is not None:
            branches[node.id] = prim.branch(xs, y, node.params)
        values.append(y)
    return values


def evaluate(graph: Graph, bindings: Mapping[str, Tensor]) -> Dict[str, Tensor]:
    """Forward pass; returns every named output"""
    values = _forward(graph, bindings)
    return {name: values[ref] for name, ref in graph.outputs.items()}


def value_and_gradient(graph: Graph, bindings: Mapping[str, Tensor], wrt: Sequence[str],
                       seed_output: str) -> Tuple[Dict[str, Tensor], Dict[str, Tensor]]:
    """Forward pass plus reverse accumulation of d(seed_output)/d(leaf) for each wrt leaf"""
    if seed_output not in graph.outputs:
        raise GradError(f"seed output '{seed_output}' is not a graph output")
    for name in wrt:
        if name not in graph.inputs:
            raise GradError(f"cannot differentiate with respect to '{name}': no such input")

    values = _forward(graph, bindings)
    seed_ref = graph.outputs[seed_output]
    if values[seed_ref].size != 1:
        raise GradError(f"seed output '{seed_output}' has shape {values[seed_ref].shape}, expected a scalar")

    wrt_refs = {graph.inputs[name] for name in wrt}
    needs = [False] * len(graph.nodes)
    for node in graph.nodes:
        needs[node.id] = node.id in wrt_refs or any(needs[i] for i in node.inputs)

    grads: List[Optional[Tensor]] = [None] * len(graph.nodes)
    grads[seed_ref] = np.ones_like(values[seed_ref])
    for node in reversed(graph.nodes[:seed_ref + 1]):
        gy = grads[node.id]
        if gy is None or node.op in LEAF_OPS or not needs[node.id]:
            continue
        in_needs = [needs[i] for i in node.inputs]
        xs = [values[i] for i in node.inputs]
        gxs = PRIMITIVES[node.op].vjp(gy, xs, values[node.id], node.params, in_needs)
        for i, gx, need in zip(node.inputs, gxs, in_needs):
            if not need or gx is None:
                continue
            grads[i] = gx if grads[i] is None else grads[i] + gx

    outputs = {name: values[ref] for name, ref in graph.outputs.items()}
    result = {}
    for name in wrt:
        ref = graph.inputs[name]
        result[name] = grads[ref] if grads[ref] is not None else np.zeros_like(values[ref])
    return outputs, result


def gradient(graph: Graph, bindings: Mapping[str, Tensor], wrt: Sequence[str],
             seed_output: str) -> Dict[str, Tensor]:
    """d(seed_output)/d(leaf) for each requested leaf; untouched leaves get zeros"""
    return value_and_gradient(graph, bindings, wrt, seed_output)[1]


# ============================================================
# ADAM
# ============================================================

@dataclass(frozen=True)
class AdamState:
    step: int
    m: Tensor
    v: Tensor
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, shape: Tuple[int, ...], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 1e-8) -> 'AdamState':
        return cls(0, np.zeros(shape), np.zeros(shape), lr, beta1, beta2, epsilon)


def adam_step(param: Tensor, grad: Tensor, state: AdamState,
              lr: Optional[float] = None) -> Tuple[Tensor, AdamState]:
    """One bias-corrected Adam update; returns new param and state, inputs untouched"""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape or state.m.shape != param.shape:
        raise ShapeError(f"adam_step: param {param.shape}, grad {grad.shape}, state {state.m.shape}")
    if state.step < 0:
        raise GradError(f"adam_step: negative step {state.step}")
    rate = state.lr if lr is None else lr
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad ** 2
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_param = param - rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new_param, replace(state, step=t, m=m, v=v)


# ============================================================
# FINITE DIFFERENCES
# ============================================================

KINK_SKIPPED = "kink-adjacent, skipped"


@dataclass
class FDReport:
    max_rel_error: float
    passed: bool
    checked: int
    skipped: List[str] = field(default_factory=list)
    worst: Optional[str] = None


def _scalar(graph: Graph, bindings: Mapping[str, Tensor], output: str,
            branches: Optional[Dict[int, Tensor]] = None) -> float:
    values = _forward(graph, bindings, branches)
    return float(values[graph.outputs[output]])


def _same_branches(a: Dict[int, Tensor], b: Dict[int, Tensor]) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def finite_difference_check(graph: Graph, bindings: Mapping[str, Tensor], wrt: Sequence[str],
                            h: float = 1e-3, tol: float = 1e-3, seed_output: Optional[str] = None,
                            max_coords: Optional[int] = None, seed: int = 0,
                            floor: float = 1e-7) -> FDReport:
    """Compare reverse-mode gradients with central differences, elementwise.

    Coordinates whose +-10h perturbation changes the branch taken by any
    kinked primitive (relu, clip, max pooling, nearest column) are skipped.
    Relative error is |a - fd| / max(|a|, |fd|, floor).
    """
    if h <= 0:
        raise GradError(f"finite difference step must be positive, got {h}")
    if seed_output is None:
        if len(graph.outputs) != 1:
            raise GradError("seed_output is required when the graph has several outputs")
        seed_output = next(iter(graph.outputs))

    analytic = gradient(graph, bindings, wrt, seed_output)
    base_branches: Dict[int, Tensor] = {}
    _forward(graph, bindings, base_branches)

    rng = make_rng(seed, 'finite-difference')
    report = FDReport(0.0, True, 0)
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in bindings.items()}

    for name in wrt:
        x = work[name]
        flat_count = x.size
        coords = np.arange(flat_count)
        if max_coords is not None and max_coords < flat_count:
            coords = np.sort(rng.choice(flat_count, size=max_coords, replace=False))
        for flat in coords:
            idx = np.unravel_index(int(flat), x.shape)
            original = x[idx]

            kinked = False
            for delta in (10.0 * h, -10.0 * h):
                x[idx] = original + delta
                moved: Dict[int, Tensor] = {}
                _forward(graph, work, moved)
                if not _same_branches(base_branches, moved):
                    kinked = True
                    break
            if kinked:
                x[idx] = original
                report.skipped.append(f"{name}{list(idx)}: {KINK_SKIPPED}")
                continue

            x[idx] = original + h
            f_plus = _scalar(graph, work, seed_output)
            x[idx] = original - h
            f_minus = _scalar(graph, work, seed_output)
            x[idx] = original

            fd = (f_plus - f_minus) / (2.0 * h)
            a = float(analytic[name][idx])
            rel = abs(a - fd) / max(abs(a), abs(fd), floor)
            report.checked += 1
            if rel > report.max_rel_error:
                report.max_rel_error = rel
                report.worst = f"{name}{list(idx)}: analytic {a:.6e}, numeric {fd:.6e}"

    report.passed = report.max_rel_error < tol
    logger.debug(f"FD_CHECK: checked={report.checked} skipped={len(report.skipped)} "
                 f"max_rel={report.max_rel_error:.3e} passed={report.passed}")
    return report
