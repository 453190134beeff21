"""LiDAR-guided depth prior for 2D queries.

Each 2D proposal gets two depth distributions over the same bins: a
simulated image prediction and a histogram of LiDAR depths inside its
frustum. A small confidence network predicts lambda and the two are fused
in log space, softmax(lambda * log d2 + (1 - lambda) * log d3). The expected
fused depth places the query's 3D reference point.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, ndtr, softmax

from .errors import ConfigError, DepthError, GeometryError, TrainingError, WeightsError
from .geometry import backproject, frustum_mask, to_camera
from .types import Box2D, Box3D, CameraModel, DomainName, DomainTag

logger = logging.getLogger(__name__)

EPS_PROB = 1e-6
CONTENT_DIM = 16
N_MOMENTS = 8
CONFNET_VERSION = "ccf-confnet-v1"

# Monte-Carlo calibrated: E|N(0, 2.23)| = 1.78 m on the source domain
SIGMA_BASE_CALIBRATED = 2.23

DOMAIN_SIGMA_INFLATION = {
    DomainName.SOURCE: 0.0,
    DomainName.RAIN: 1.0,
    DomainName.NIGHT: 2.0,
    DomainName.GEO: 0.6,
}


@dataclass(frozen=True)
class DepthBins:
    d_min: float = 1.0
    d_max: float = 51.0
    D: int = 25

    def __post_init__(self):
        if not self.d_min < self.d_max or self.D < 2:
            raise ConfigError("depth.n_bins", f"invalid depth bins ({self.d_min}, {self.d_max}, {self.D})")

    @property
    def width(self) -> float:
        return (self.d_max - self.d_min) / self.D

    @property
    def edges(self) -> np.ndarray:
        return self.d_min + self.width * np.arange(self.D + 1)

    @property
    def centers(self) -> np.ndarray:
        return self.d_min + (np.arange(self.D) + 0.5) * self.width

    def index_of(self, depth: float) -> int:
        return int(np.clip(np.floor((depth - self.d_min) / self.width), 0, self.D - 1))


@dataclass(frozen=True, eq=False)
class DepthDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64).ravel()
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise DepthError("depth distribution must be non-negative and sum to 1")
        p.setflags(write=False)
        object.__setattr__(self, 'probs', p)

    def __len__(self) -> int:
        return len(self.probs)

    @classmethod
    def uniform(cls, D: int) -> 'DepthDistribution':
        return cls(np.full(D, 1.0 / D))

    @classmethod
    def one_hot(cls, D: int, k: int) -> 'DepthDistribution':
        p = np.zeros(D)
        p[k] = 1.0
        return cls(p)

    def is_uniform(self) -> bool:
        return bool(np.all(self.probs == self.probs[0]))


def floor_probs(d: DepthDistribution) -> np.ndarray:
    """Probabilities floored at EPS_PROB and renormalized, safe for log"""
    p = np.maximum(d.probs, EPS_PROB)
    return p / p.sum()


def lidar_depth_histogram(depths: Sequence[float], bins: DepthBins) -> DepthDistribution:
    depths = np.asarray(depths, dtype=np.float64).ravel()
    depths = depths[(depths >= bins.d_min) & (depths <= bins.d_max)]
    if len(depths) == 0:
        return DepthDistribution.uniform(bins.D)
    counts, _ = np.histogram(depths, bins=bins.edges)
    return DepthDistribution(counts / counts.sum())


def domain_sigma(sigma_base: float, domain: DomainTag) -> float:
    return sigma_base * (1.0 + DOMAIN_SIGMA_INFLATION[domain.name] * domain.severity)


def gaussian_bins(mean: float, sigma: float, bins: DepthBins) -> DepthDistribution:
    """Gaussian mass per bin, renormalized over the bin range"""
    cdf = ndtr((bins.edges - mean) / sigma)
    mass = np.diff(cdf)
    total = mass.sum()
    if not total > 0:
        return DepthDistribution.one_hot(bins.D, bins.index_of(mean))
    return DepthDistribution(mass / total)


def image_depth_distribution(gt_depth: float, sigma_base: float, domain: DomainTag,
                             bins: DepthBins, seed: int, bias_scale: float = 1.0) -> DepthDistribution:
    """Stand-in for an image RoI depth head: a discretized Gaussian whose
    center is off by a seeded bias of the same scale as its width"""
    if not sigma_base > 0:
        raise ConfigError("depth.sigma_base", f"must be positive, got {sigma_base}")
    sigma = domain_sigma(sigma_base, domain)
    bias = np.random.default_rng(seed).normal(0.0, bias_scale * sigma) if bias_scale > 0 else 0.0
    return gaussian_bins(gt_depth + bias, sigma, bins)


def fusion_scores(d2: DepthDistribution, d3: DepthDistribution, lam: float) -> Tuple[np.ndarray, np.ndarray]:
    """Log-space inputs (log d2 - log d3) and the fused distribution"""
    a = np.log(floor_probs(d2))
    b = np.log(floor_probs(d3))
    return a - b, softmax(lam * a + (1.0 - lam) * b)


def fuse_distributions(d2: DepthDistribution, d3: DepthDistribution, lam: float) -> DepthDistribution:
    if not 0.0 <= lam <= 1.0:
        raise DepthError(f"lambda must lie in [0, 1], got {lam}")
    _, fused = fusion_scores(d2, d3, lam)
    return DepthDistribution(fused / fused.sum())


def expected_depth(d: DepthDistribution, bins: DepthBins) -> float:
    return float(d.probs @ bins.centers)


@dataclass
class ConfidenceNet:
    """3-layer tanh MLP over concat(d2, d3) with a sigmoid output"""
    params: Dict[str, np.ndarray]

    @classmethod
    def init(cls, D: int, seed: int = 0, hidden: Tuple[int, int] = (32, 32)) -> 'ConfidenceNet':
        rng = np.random.default_rng(seed)
        h1, h2 = hidden
        return cls(params={
            'W1': rng.normal(0.0, 1.0 / np.sqrt(2 * D), size=(2 * D, h1)),
            'b1': np.zeros(h1),
            'W2': rng.normal(0.0, 1.0 / np.sqrt(h1), size=(h1, h2)),
            'b2': np.zeros(h2),
            'W3': np.zeros((h2, 1)),
            'b3': np.zeros(1),
        })

    @property
    def input_dim(self) -> int:
        return self.params['W1'].shape[0]

    def copy(self) -> 'ConfidenceNet':
        return ConfidenceNet(params={k: v.copy() for k, v in self.params.items()})

    def forward_batch(self, X: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        p = self.params
        a1 = np.tanh(X @ p['W1'] + p['b1'])
        a2 = np.tanh(a1 @ p['W2'] + p['b2'])
        lam = expit(a2 @ p['W3'] + p['b3'])[:, 0]
        return lam, {'X': X, 'a1': a1, 'a2': a2, 'lam': lam}

    def backward_batch(self, cache: Dict[str, np.ndarray], dlam: np.ndarray) -> Dict[str, np.ndarray]:
        p = self.params
        lam = cache['lam']
        dz3 = (dlam * lam * (1.0 - lam))[:, None]
        grads = {'W3': cache['a2'].T @ dz3, 'b3': dz3.sum(axis=0)}
        dz2 = (dz3 @ p['W3'].T) * (1.0 - cache['a2'] ** 2)
        grads['W2'] = cache['a1'].T @ dz2
        grads['b2'] = dz2.sum(axis=0)
        dz1 = (dz2 @ p['W2'].T) * (1.0 - cache['a1'] ** 2)
        grads['W1'] = cache['X'].T @ dz1
        grads['b1'] = dz1.sum(axis=0)
        return grads

    def save(self, path) -> None:
        payload = {
            'version': CONFNET_VERSION,
            'layers': {k: {'shape': list(v.shape), 'data': v.ravel().tolist()}
                       for k, v in self.params.items()},
        }
        Path(path).write_text(json.dumps(payload), encoding='utf-8')

    @classmethod
    def load(cls, path) -> 'ConfidenceNet':
        try:
            payload = json.loads(Path(path).read_text(encoding='utf-8'))
        except (OSError, json.JSONDecodeError) as e:
            raise WeightsError(f"cannot load confidence net from {path}: {e}") from e
        if payload.get('version') != CONFNET_VERSION:
            raise WeightsError(f"{path}: expected version {CONFNET_VERSION}, got {payload.get('version')}")
        return cls(params={k: np.array(v['data'], dtype=np.float64).reshape(v['shape'])
                           for k, v in payload['layers'].items()})


def confidence_forward(net: ConfidenceNet, d2: DepthDistribution,
                       d3: DepthDistribution) -> Tuple[float, Dict[str, np.ndarray]]:
    X = np.concatenate([d2.probs, d3.probs])[None, :]
    lam, cache = net.forward_batch(X)
    return float(lam[0]), cache


@dataclass(frozen=True)
class ConfidenceHyperparams:
    epochs: int = 300
    lr: float = 0.05
    max_backtracks: int = 30
    # Instances whose frustum is empty carry no LiDAR evidence; optionally left out.
    skip_uniform_lidar: bool = False


@dataclass
class DepthExample:
    d2: DepthDistribution
    d3: DepthDistribution
    gt_depth: float


class _DepthBatch:
    """Stacked arrays for full-batch training"""

    def __init__(self, examples: Sequence[DepthExample], bins: DepthBins):
        self.X = np.stack([np.concatenate([e.d2.probs, e.d3.probs]) for e in examples])
        self.log2 = np.log(np.stack([floor_probs(e.d2) for e in examples]))
        self.log3 = np.log(np.stack([floor_probs(e.d3) for e in examples]))
        self.gt = np.array([e.gt_depth for e in examples])
        self.centers = bins.centers


def confidence_loss_and_grad(net: ConfidenceNet, batch: _DepthBatch,
                             with_grad: bool = True) -> Tuple[float, Optional[Dict[str, np.ndarray]]]:
    """Mean L1 between expected fused depth and gt depth, with analytic gradients"""
    lam, cache = net.forward_batch(batch.X)
    scores = lam[:, None] * batch.log2 + (1.0 - lam[:, None]) * batch.log3
    fused = softmax(scores, axis=1)
    expected = fused @ batch.centers
    err = expected - batch.gt
    loss = float(np.mean(np.abs(err)))
    if not with_grad:
        return loss, None
    # dE/dlam = sum_k p_k (c_k - E)(log d2_k - log d3_k)
    dE_dlam = np.sum(fused * (batch.centers[None, :] - expected[:, None]) * (batch.log2 - batch.log3), axis=1)
    dlam = np.sign(err) * dE_dlam / len(err)
    return loss, net.backward_batch(cache, dlam)


def train_confidence(net: ConfidenceNet, dataset: Sequence[DepthExample], bins: DepthBins,
                     hyper: ConfidenceHyperparams = ConfidenceHyperparams()) -> Tuple[ConfidenceNet, List[float]]:
    """Full-batch gradient descent with step rejection: an epoch whose loss
    would rise is retried at half the step, so the curve never increases"""
    examples = [e for e in dataset if not (hyper.skip_uniform_lidar and e.d3.is_uniform())]
    if not examples:
        raise TrainingError("confidence training set is empty")
    batch = _DepthBatch(examples, bins)
    net = net.copy()
    loss, grads = confidence_loss_and_grad(net, batch)
    curve = [loss]
    lr = hyper.lr
    for epoch in range(hyper.epochs):
        if not np.isfinite(loss):
            raise TrainingError("non-finite confidence loss", step=epoch, lr=lr)
        for _ in range(hyper.max_backtracks):
            trial = ConfidenceNet(params={k: v - lr * grads[k] for k, v in net.params.items()})
            trial_loss, _ = confidence_loss_and_grad(trial, batch, with_grad=False)
            if not np.isfinite(trial_loss):
                raise TrainingError("non-finite confidence loss", step=epoch, lr=lr)
            if trial_loss <= loss:
                net = trial
                lr = min(lr * 1.2, hyper.lr)
                break
            lr *= 0.5
        else:
            logger.debug(f"confidence training stalled at epoch {epoch}, loss {loss:.4f}")
            curve.append(loss)
            break
        loss, grads = confidence_loss_and_grad(net, batch)
        curve.append(loss)
    logger.info(f"confidence net trained on {len(examples)} instances: L1 {curve[0]:.3f} -> {curve[-1]:.3f} m")
    return net, curve


@dataclass(frozen=True, eq=False)
class Query2D:
    content: np.ndarray
    ref_point: np.ndarray
    source_box: Box2D
    camera_index: int
    depth_dist: DepthDistribution
    lam: float = 1.0
    lidar_support: int = 0

    def __post_init__(self):
        if not np.all(np.isfinite(self.ref_point)):
            raise GeometryError("2D query reference point must be finite")


@dataclass(frozen=True, eq=False)
class Query3D:
    content: np.ndarray
    ref_point: np.ndarray
    source_box: Box3D

    def __post_init__(self):
        if not np.array_equal(self.ref_point, self.source_box.center):
            raise GeometryError("3D query reference point must be the box center")


def depth_moments(d: DepthDistribution, bins: DepthBins) -> np.ndarray:
    """First N_MOMENTS raw moments of depth normalized to [0, 1]"""
    x = (bins.centers - bins.d_min) / (bins.d_max - bins.d_min)
    return np.array([d.probs @ x ** m for m in range(1, N_MOMENTS + 1)])


def _class_one_hot(class_id: int) -> np.ndarray:
    onehot = np.zeros(3)
    onehot[min(class_id, 2)] = 1.0
    return onehot


def embed_query2d(box: Box2D, cam: CameraModel, d: DepthDistribution, bins: DepthBins) -> np.ndarray:
    """[cx/W, cy/H, w/W, h/H, score, 8 depth moments, class one-hot]"""
    geometry = [box.center[0] / cam.width, box.center[1] / cam.height,
                box.width / cam.width, box.height / cam.height]
    return np.concatenate([geometry, [box.score], depth_moments(d, bins), _class_one_hot(box.class_id)])


def embed_query3d(box: Box3D, bins: DepthBins) -> np.ndarray:
    """[l, w, h scaled by 10 m, cos yaw, score, moments of the one-hot range bin, class one-hot]"""
    horizontal = float(np.hypot(box.center[0], box.center[1]))
    d = DepthDistribution.one_hot(bins.D, bins.index_of(horizontal))
    geometry = list(box.size / 10.0) + [np.cos(box.yaw)]
    return np.concatenate([geometry, [box.score], depth_moments(d, bins), _class_one_hot(box.class_id)])


def frustum_depths(cam: CameraModel, box: Box2D, points: np.ndarray, bins: DepthBins) -> np.ndarray:
    xyz = np.asarray(points, dtype=np.float64)[:, :3] if len(points) else np.zeros((0, 3))
    inside = frustum_mask(cam, box, (bins.d_min, bins.d_max), xyz)
    return to_camera(cam, xyz[inside])[:, 2]


def make_query2d(box: Box2D, cam: CameraModel, points: np.ndarray, bins: DepthBins,
                 net: Optional[ConfidenceNet], image_dist: DepthDistribution,
                 camera_index: int = 0, lam_override: Optional[float] = None) -> Query2D:
    """With net None and no override the query uses the image distribution alone"""
    depths = frustum_depths(cam, box, points, bins)
    d3 = lidar_depth_histogram(depths, bins)
    if lam_override is not None:
        lam = lam_override
    elif net is not None:
        lam, _ = confidence_forward(net, image_dist, d3)
    else:
        lam = 1.0
    fused = fuse_distributions(image_dist, d3, lam)
    depth = expected_depth(fused, bins)
    return Query2D(
        content=embed_query2d(box, cam, fused, bins),
        ref_point=backproject(cam, box.center, depth),
        source_box=box,
        camera_index=camera_index,
        depth_dist=fused,
        lam=lam,
        lidar_support=len(depths)
    )


def make_query3d(box: Box3D, bins: DepthBins) -> Query3D:
    return Query3D(content=embed_query3d(box, bins), ref_point=box.center, source_box=box)
