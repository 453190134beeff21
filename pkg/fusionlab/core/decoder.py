"""Single-layer query decoder with hand-derived gradients.

One layer: self-attention over the pass's own queries, cross-attention to
scene tokens, a tanh feed-forward block, then class and box heads. The box
head predicts a residual on the query anchor, whose center is the query's
reference point. The same weights serve the 2D-only, 3D-only and fused
passes; there is one parameter storage.

Shapes: Q queries, T tokens, C content width, F hidden width, K classes.
"""
import json
import logging
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, softmax

from .depthprior import CONTENT_DIM, Query2D, Query3D
from .errors import DecoderError, WeightsError
from .matching import CostWeights, MatchResult, PassPredictions, normalize_box
from .scenesim import CLASS_SIZES
from .types import Box3D, PassKind, QueryOrigin, wrap_angle

logger = logging.getLogger(__name__)

DECODER_VERSION = "ccf-decoder-v1"
TOKEN_FEATURES = 5
TOKEN_PROJECTION_SEED = 20240601

PASS_CALLS: Counter = Counter()
_pass_lock = threading.Lock()


@dataclass
class DecoderWeights:
    params: Dict[str, np.ndarray]
    radius: float = 45.0

    @classmethod
    def init(cls, seed: int, radius: float = 45.0, C: int = CONTENT_DIM, F: int = 32,
             n_classes: int = 3, prior_prob: float = 0.1) -> 'DecoderWeights':
        rng = np.random.default_rng(seed)

        def dense(fan_in, fan_out, gain=1.0):
            return rng.normal(0.0, gain / np.sqrt(fan_in), size=(fan_in, fan_out))

        params = {'Wp': dense(3, C)}
        for name in ('Wq', 'Wk', 'Wv', 'Wcq', 'Wck', 'Wcv'):
            params[name] = dense(C, C)
        params['Wo'] = dense(C, C, 0.5)
        params['Wco'] = dense(C, C, 0.5)
        params['W1'] = dense(C, F)
        params['b1'] = np.zeros(F)
        params['W2'] = dense(F, C, 0.5)
        params['b2'] = np.zeros(C)
        params['Wcls'] = dense(C, n_classes, 0.1)
        params['bcls'] = np.full(n_classes, -np.log((1.0 - prior_prob) / prior_prob))
        params['Wbox'] = np.zeros((C, 7))
        params['bbox'] = np.zeros(7)
        return cls(params=params, radius=radius)

    @property
    def n_classes(self) -> int:
        return self.params['Wcls'].shape[1]

    def copy(self) -> 'DecoderWeights':
        return DecoderWeights(params={k: v.copy() for k, v in self.params.items()}, radius=self.radius)

    def zeros_like(self) -> Dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def to_dict(self) -> dict:
        return {
            'version': DECODER_VERSION,
            'radius': self.radius,
            'layers': {k: {'shape': list(v.shape), 'data': v.ravel().tolist()}
                       for k, v in sorted(self.params.items())},
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'DecoderWeights':
        if data.get('version') != DECODER_VERSION:
            raise WeightsError(f"expected weights version {DECODER_VERSION}, got {data.get('version')}")
        try:
            params = {k: np.array(v['data'], dtype=np.float64).reshape(v['shape'])
                      for k, v in data['layers'].items()}
        except (KeyError, TypeError, ValueError) as e:
            raise WeightsError(f"malformed decoder weights: {e!r}") from e
        return cls(params=params, radius=float(data.get('radius', 45.0)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding='utf-8')


@dataclass(frozen=True)
class OracleWeights:
    """Stub weights whose predictions are the ground truth itself"""
    radius: float = 45.0

    def save(self, path) -> None:
        payload = {'version': DECODER_VERSION, 'oracle': True, 'radius': self.radius}
        Path(path).write_text(json.dumps(payload), encoding='utf-8')


def load_weights(path):
    """DecoderWeights or OracleWeights from a versioned JSON file"""
    try:
        data = json.loads(Path(path).read_text(encoding='utf-8'))
    except OSError as e:
        raise WeightsError(f"cannot read weights {path}: {e.strerror or e}") from e
    except json.JSONDecodeError as e:
        raise WeightsError(f"{path}: malformed JSON: {e.msg}") from e
    if not isinstance(data, dict):
        raise WeightsError(f"{path}: expected a JSON object")
    if data.get('oracle') is True:
        if data.get('version') != DECODER_VERSION:
            raise WeightsError(f"{path}: expected weights version {DECODER_VERSION}, got {data.get('version')}")
        return OracleWeights(radius=float(data.get('radius', 45.0)))
    return DecoderWeights.from_dict(data)


@dataclass(frozen=True, eq=False)
class SceneTokens:
    features: np.ndarray  # (T, C)
    positions: np.ndarray  # (T, 3) meters

    def __len__(self) -> int:
        return len(self.features)


def _token_projection(C: int) -> np.ndarray:
    rng = np.random.default_rng(TOKEN_PROJECTION_SEED)
    return rng.normal(0.0, 1.0 / np.sqrt(TOKEN_FEATURES), size=(TOKEN_FEATURES, C))


def build_tokens(points: np.ndarray, radius: float, voxel: float = 2.0, C: int = CONTENT_DIM) -> SceneTokens:
    """Mean-pool points into voxels: (centroid offset, point count, intensity) -> C dims"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    if len(points) == 0:
        return SceneTokens(np.zeros((0, C)), np.zeros((0, 3)))
    keys = np.floor(points[:, :3] / voxel).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    counts = np.bincount(inverse, minlength=len(uniq)).astype(np.float64)
    sums = np.stack([np.bincount(inverse, weights=points[:, j], minlength=len(uniq))
                     for j in range(4)], axis=1)
    mean = sums / counts[:, None]
    centroid = mean[:, :3]
    offset = (centroid - (uniq + 0.5) * voxel) / voxel
    raw = np.column_stack([offset, np.log1p(counts) / np.log1p(64.0), mean[:, 3]])
    keep = np.hypot(centroid[:, 0], centroid[:, 1]) <= radius
    return SceneTokens(features=raw[keep] @ _token_projection(C), positions=centroid[keep])


@dataclass(frozen=True, eq=False)
class QuerySet:
    content: np.ndarray  # (Q, C)
    ref_points: np.ndarray  # (Q, 3) meters
    anchors: np.ndarray  # (Q, 7) normalized box parameters
    origins: Tuple[QueryOrigin, ...]

    def __len__(self) -> int:
        return len(self.origins)

    @classmethod
    def build(cls, queries2d: Sequence[Query2D], queries3d: Sequence[Query3D], radius: float,
              content_scale: Optional[Sequence[float]] = None) -> 'QuerySet':
        """2D queries first, then 3D, the order of the fused concatenation"""
        scale = np.ones(len(queries2d)) if content_scale is None else np.asarray(content_scale, dtype=np.float64)
        content, refs, anchors = [], [], []
        for q, s in zip(queries2d, scale):
            content.append(q.content * s)
            refs.append(q.ref_point)
            size = CLASS_SIZES[min(q.source_box.class_id, len(CLASS_SIZES) - 1)]
            anchors.append(np.concatenate([q.ref_point / radius, size / radius, [0.0]]))
        for q in queries3d:
            content.append(q.content)
            refs.append(q.ref_point)
            anchors.append(normalize_box(q.source_box, radius))
        origins = (QueryOrigin.FROM_2D,) * len(queries2d) + (QueryOrigin.FROM_3D,) * len(queries3d)
        return cls(content=np.array(content, dtype=np.float64).reshape(-1, CONTENT_DIM),
                   ref_points=np.array(refs, dtype=np.float64).reshape(-1, 3),
                   anchors=np.array(anchors, dtype=np.float64).reshape(-1, 7),
                   origins=origins)

    def select(self, kind: PassKind) -> 'QuerySet':
        if kind is PassKind.FUSED:
            return self
        wanted = QueryOrigin.FROM_2D if kind is PassKind.TWO_D_ONLY else QueryOrigin.FROM_3D
        idx = np.array([i for i, o in enumerate(self.origins) if o is wanted], dtype=np.int64)
        return QuerySet(content=self.content[idx], ref_points=self.ref_points[idx],
                        anchors=self.anchors[idx], origins=(wanted,) * len(idx))


@dataclass
class PassOutput:
    kind: PassKind
    refined: np.ndarray
    logits: np.ndarray
    boxes: np.ndarray
    origins: Tuple[QueryOrigin, ...]
    cache: Dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    def predictions(self) -> PassPredictions:
        return PassPredictions(logits=self.logits, boxes=self.boxes, origins=self.origins)


def _attend(Qm: np.ndarray, Km: np.ndarray) -> np.ndarray:
    scale = 1.0 / np.sqrt(Qm.shape[1])
    return softmax(Qm @ Km.T * scale, axis=1)


def decoder_forward(weights: DecoderWeights, queries: QuerySet, tokens: SceneTokens,
                    kind: PassKind) -> PassOutput:
    queries = queries.select(kind)
    if len(queries) == 0:
        raise DecoderError(f"{kind.value} pass has no queries")
    with _pass_lock:
        PASS_CALLS[kind] += 1
    p = weights.params
    r = weights.radius

    R = queries.ref_points / r
    H0 = queries.content + R @ p['Wp']
    Qs, Ks, Vs = H0 @ p['Wq'], H0 @ p['Wk'], H0 @ p['Wv']
    A = _attend(Qs, Ks)
    O = A @ Vs
    H1 = H0 + O @ p['Wo']

    cache = {'R': R, 'H0': H0, 'Qs': Qs, 'Ks': Ks, 'Vs': Vs, 'A': A, 'O': O, 'H1': H1}
    if len(tokens):
        P = tokens.positions / r
        E = tokens.features + P @ p['Wp']
        Qc, Kc, Vc = H1 @ p['Wcq'], E @ p['Wck'], E @ p['Wcv']
        A2 = _attend(Qc, Kc)
        O2 = A2 @ Vc
        H2 = H1 + O2 @ p['Wco']
        cache.update({'P': P, 'E': E, 'Qc': Qc, 'Kc': Kc, 'Vc': Vc, 'A2': A2, 'O2': O2})
    else:
        H2 = H1

    Z = np.tanh(H2 @ p['W1'] + p['b1'])
    H3 = H2 + Z @ p['W2'] + p['b2']
    logits = H3 @ p['Wcls'] + p['bcls']
    boxes = queries.anchors + H3 @ p['Wbox'] + p['bbox']
    cache.update({'H2': H2, 'Z': Z, 'H3': H3})
    return PassOutput(kind=kind, refined=H3, logits=logits, boxes=boxes,
                      origins=queries.origins, cache=cache)


def decoder_backward(weights: DecoderWeights, cache: Dict[str, np.ndarray], dlogits: np.ndarray,
                     dboxes: np.ndarray) -> Dict[str, np.ndarray]:
    """Exact gradients of a loss with the given output gradients"""
    p = weights.params
    g = weights.zeros_like()
    H3, H2, Z = cache['H3'], cache['H2'], cache['Z']

    g['Wbox'] = H3.T @ dboxes
    g['bbox'] = dboxes.sum(axis=0)
    g['Wcls'] = H3.T @ dlogits
    g['bcls'] = dlogits.sum(axis=0)
    dH3 = dboxes @ p['Wbox'].T + dlogits @ p['Wcls'].T

    g['W2'] = Z.T @ dH3
    g['b2'] = dH3.sum(axis=0)
    dU = (dH3 @ p['W2'].T) * (1.0 - Z ** 2)
    g['W1'] = H2.T @ dU
    g['b1'] = dU.sum(axis=0)
    dH2 = dH3 + dU @ p['W1'].T

    scale = 1.0 / np.sqrt(p['Wq'].shape[1])
    if 'A2' in cache:
        A2, Vc, Qc, Kc, E, O2 = cache['A2'], cache['Vc'], cache['Qc'], cache['Kc'], cache['E'], cache['O2']
        g['Wco'] = O2.T @ dH2
        dO2 = dH2 @ p['Wco'].T
        dA2 = dO2 @ Vc.T
        dVc = A2.T @ dO2
        dS2 = A2 * (dA2 - np.sum(dA2 * A2, axis=1, keepdims=True))
        dQc = dS2 @ Kc * scale
        dKc = dS2.T @ Qc * scale
        g['Wcq'] = cache['H1'].T @ dQc
        g['Wck'] = E.T @ dKc
        g['Wcv'] = E.T @ dVc
        dE = dKc @ p['Wck'].T + dVc @ p['Wcv'].T
        g['Wp'] += cache['P'].T @ dE
        dH1 = dH2 + dQc @ p['Wcq'].T
    else:
        dH1 = dH2

    A, Vs, Qs, Ks, H0, O = cache['A'], cache['Vs'], cache['Qs'], cache['Ks'], cache['H0'], cache['O']
    g['Wo'] = O.T @ dH1
    dO = dH1 @ p['Wo'].T
    dA = dO @ Vs.T
    dVs = A.T @ dO
    dS = A * (dA - np.sum(dA * A, axis=1, keepdims=True))
    dQs = dS @ Ks * scale
    dKs = dS.T @ Qs * scale
    g['Wq'] = H0.T @ dQs
    g['Wk'] = H0.T @ dKs
    g['Wv'] = H0.T @ dVs
    dH0 = dH1 + dQs @ p['Wq'].T + dKs @ p['Wk'].T + dVs @ p['Wv'].T
    g['Wp'] += cache['R'].T @ dH0
    return g


def sigmoid_focal(logits: np.ndarray, targets: np.ndarray, alpha: float,
                  gamma: float) -> Tuple[np.ndarray, np.ndarray]:
    """Elementwise sigmoid focal loss and its derivative w.r.t. the logits"""
    prob = expit(logits)
    log_p = -np.logaddexp(0.0, -logits)
    log_1mp = -np.logaddexp(0.0, logits)
    pos = targets > 0
    loss = np.where(pos,
                    -alpha * (1.0 - prob) ** gamma * log_p,
                    -(1.0 - alpha) * prob ** gamma * log_1mp)
    grad = np.where(pos,
                    alpha * (1.0 - prob) ** gamma * (gamma * prob * log_p - (1.0 - prob)),
                    (1.0 - alpha) * prob ** gamma * (prob - gamma * (1.0 - prob) * log_1mp))
    return loss, grad


@dataclass
class BranchLoss:
    cls: float
    box: float
    dlogits: np.ndarray
    dboxes: np.ndarray

    @property
    def total(self) -> float:
        return self.cls + self.box


def branch_loss(output: PassOutput, match: MatchResult, gt_classes: np.ndarray, gt_boxes: np.ndarray,
                weights: CostWeights = CostWeights()) -> BranchLoss:
    """Focal classification over all queries (background for unmatched) plus
    L1 on matched boxes, normalized by max(1, #gts)"""
    norm = float(max(1, len(gt_classes)))
    targets = np.zeros_like(output.logits)
    dboxes = np.zeros_like(output.boxes)
    box_loss = 0.0
    for q, gidx in match.pairs:
        targets[q, gt_classes[gidx]] = 1.0
        diff = output.boxes[q] - gt_boxes[gidx]
        box_loss += weights.w_box * np.abs(diff).sum()
        dboxes[q] = weights.w_box * np.sign(diff)
    focal, dfocal = sigmoid_focal(output.logits, targets, weights.alpha, weights.gamma)
    return BranchLoss(cls=weights.w_cls * float(focal.sum()) / norm, box=box_loss / norm,
                      dlogits=weights.w_cls * dfocal / norm, dboxes=dboxes / norm)


@dataclass
class DecoupledLoss:
    total: float
    branches: Dict[PassKind, BranchLoss]


def decoupled_loss(outputs: Dict[PassKind, PassOutput], matches: Dict[PassKind, MatchResult],
                   gts: Sequence[Box3D], radius: float,
                   weights: CostWeights = CostWeights()) -> DecoupledLoss:
    """Unweighted sum of the independently matched branch losses"""
    gt_classes = np.array([g.class_id for g in gts], dtype=np.int64)
    gt_boxes = np.array([normalize_box(g, radius) for g in gts]).reshape(-1, 7)
    branches = {kind: branch_loss(out, matches[kind], gt_classes, gt_boxes, weights)
                for kind, out in outputs.items()}
    return DecoupledLoss(total=float(sum(b.total for b in branches.values())), branches=branches)


def accumulate(weights: DecoderWeights, outputs: Dict[PassKind, PassOutput],
               loss: DecoupledLoss) -> Dict[str, np.ndarray]:
    """Sum per-pass gradients into one gradient for the shared weights, in
    fixed pass order"""
    total = weights.zeros_like()
    for kind in (PassKind.TWO_D_ONLY, PassKind.THREE_D_ONLY, PassKind.FUSED):
        if kind not in outputs:
            continue
        b = loss.branches[kind]
        grads = decoder_backward(weights, outputs[kind].cache, b.dlogits, b.dboxes)
        for k in total:
            total[k] += grads[k]
    return total


def denormalize_box(params: np.ndarray, radius: float, score: float, class_id: int) -> Box3D:
    size = np.maximum(params[3:6] * radius, 0.05)
    return Box3D(center=params[:3] * radius, size=size, yaw=wrap_angle(params[6] * np.pi),
                 score=score, class_id=class_id)


class AdamW:
    """Decoupled weight decay Adam over a parameter dict"""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        for k in sorted(params):
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * grads[k]
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * grads[k] ** 2
            m_hat = self.m[k] / (1.0 - self.beta1 ** self.t)
            v_hat = self.v[k] / (1.0 - self.beta2 ** self.t)
            params[k] -= lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * params[k])


def cosine_lr(step: int, total: int, base_lr: float, min_lr: float = 0.0) -> float:
    if total <= 0:
        return base_lr
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + np.cos(np.pi * step / total))
