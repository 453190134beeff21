"""From scenes to decoder samples, and the experiments built on them.

A sample is one scene seen through the (possibly masked) sensors: 2D
queries lifted with the depth prior, 3D queries from the LiDAR proposals,
voxel tokens from the retained points, and the ground truth. Training,
prediction and the pilot study all start from `assemble_sample`.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
from scipy.special import expit

from .decoder import (AdamW, DecoderWeights, DecoupledLoss, OracleWeights, PassOutput, QuerySet,
                      SceneTokens, accumulate, build_tokens, cosine_lr, decoder_forward,
                      decoupled_loss, denormalize_box)
from .depthprior import (SIGMA_BASE_CALIBRATED, ConfidenceHyperparams, ConfidenceNet, DepthBins,
                         DepthExample, Query2D, Query3D, expected_depth, frustum_depths,
                         image_depth_distribution, lidar_depth_histogram, make_query2d,
                         make_query3d, train_confidence)
from .errors import ConfigError, TrainingError
from .evalkit import EvalConfig, EvalReport, PilotSplit, evaluate
from .geometry import camera_depth
from .masking import MaskKind, MaskPolicy, SceneInputs, apply_policy, visible_fraction
from .matching import CostWeights, MatchResult, assign_queries, supervision_stats
from .scenesim import CLASS_SIZES, ProposalNoise, Proposals, derive_seed, points_in_box, \
    simulate_proposals, visible_projection
from .types import Box2D, Box3D, Detection, PassKind, QueryOrigin, Scene

logger = logging.getLogger(__name__)

MIN_VISIBLE = 0.25
MIN_SUPPORT = 0.25
SUPPORT_MARGIN = 0.1

T = TypeVar('T')
R = TypeVar('R')
AnyWeights = Union[DecoderWeights, OracleWeights]


@dataclass(frozen=True)
class DepthConfig:
    d_min: float = 1.0
    d_max: float = 51.0
    n_bins: int = 25
    sigma_base: float = SIGMA_BASE_CALIBRATED
    bias_scale: float = 1.0
    confidence_epochs: int = 300
    confidence_lr: float = 0.05
    skip_uniform_lidar: bool = False

    def validate(self) -> 'DepthConfig':
        if not 0 <= self.d_min < self.d_max:
            raise ConfigError("depth.d_min", f"need 0 <= d_min < d_max, got ({self.d_min}, {self.d_max})")
        if self.n_bins < 2:
            raise ConfigError("depth.n_bins", f"need at least 2 bins, got {self.n_bins}")
        if self.sigma_base <= 0:
            raise ConfigError("depth.sigma_base", f"must be positive, got {self.sigma_base}")
        return self

    @property
    def bins(self) -> DepthBins:
        return DepthBins(self.d_min, self.d_max, self.n_bins)

    @property
    def hyper(self) -> ConfidenceHyperparams:
        return ConfidenceHyperparams(epochs=self.confidence_epochs, lr=self.confidence_lr,
                                     skip_uniform_lidar=self.skip_uniform_lidar)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 24
    lr: float = 4e-3
    min_lr: float = 0.0
    weight_decay: float = 0.01
    batch_size: int = 4
    decoupled: bool = True
    depth_prior: bool = True
    split: str = 'source'

    def validate(self) -> 'TrainConfig':
        if self.epochs < 0:
            raise ConfigError("train.epochs", f"must be >= 0, got {self.epochs}")
        if self.lr < 0 or self.min_lr < 0 or self.weight_decay < 0:
            raise ConfigError("train.lr", "learning rates and weight decay must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", f"must be >= 1, got {self.batch_size}")
        return self


def ordered_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> List[R]:
    """map with a bounded pool; results keep input order"""
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def proposal_seed(split_seed: int, index: int) -> int:
    return derive_seed(split_seed, index, 2)


def sample_seed(split_seed: int, index: int) -> int:
    return derive_seed(split_seed, index, 3)


def make_proposals(scenes: Sequence[Scene], noise: ProposalNoise, split_seed: int) -> List[Proposals]:
    return [simulate_proposals(s, noise, proposal_seed(split_seed, i)) for i, s in enumerate(scenes)]


@dataclass(frozen=True, eq=False)
class Sample:
    scene_id: str
    gts: List[Box3D]
    queries: QuerySet
    tokens: SceneTokens
    queries2d: List[Query2D]
    queries3d: List[Query3D]
    links: List[int]  # gt index per query in QuerySet order, -1 for false positives
    image_depths: List[float] = field(default_factory=list)  # per 2D query
    fused_depths: List[float] = field(default_factory=list)
    gt_depths: List[Optional[float]] = field(default_factory=list)  # per 2D query


def _support(box: Box3D, points: np.ndarray) -> int:
    if len(points) == 0:
        return 0
    return int(points_in_box(box, points[:, :3], SUPPORT_MARGIN).sum())


def assemble_sample(scene: Scene, proposals: Proposals, depth: DepthConfig, seed: int, radius: float,
                    net: Optional[ConfidenceNet] = None, policy: Optional[MaskPolicy] = None,
                    step: int = 0, total: int = 1) -> Sample:
    """Queries and tokens for one scene; with a policy the masking is drawn
    for (seed, step) and the proposals only see what survives it"""
    bins = depth.bins
    inputs = SceneInputs.unmasked(scene.cameras, scene.points)
    if policy is not None and policy.kind is not MaskKind.NONE:
        inputs = apply_policy(inputs, policy, step, total, seed)

    queries3d, links3d = [], []
    for box, link in zip(proposals.boxes3d, proposals.links3d):
        full = _support(box, scene.points)
        if full > 0 and _support(box, inputs.points) < MIN_SUPPORT * full:
            continue
        queries3d.append(make_query3d(box, bins))
        links3d.append(link)

    queries2d, links2d, scales = [], [], []
    image_depths, fused_depths, gt_depths = [], [], []
    for ci, (cam, boxes, links) in enumerate(zip(scene.cameras, proposals.boxes2d, proposals.links2d)):
        for j, (box, link) in enumerate(zip(boxes, links)):
            visible = visible_fraction(inputs.images[ci], box)
            if visible < MIN_VISIBLE:
                continue
            if link >= 0:
                gt_depth = camera_depth(cam, scene.gt_boxes[link].center)
            else:
                gt_depth = float(np.random.default_rng(derive_seed(seed, ci, j)).uniform(bins.d_min, bins.d_max))
            image_dist = image_depth_distribution(gt_depth, depth.sigma_base, scene.domain, bins,
                                                  seed=derive_seed(seed, ci, j, 1),
                                                  bias_scale=depth.bias_scale)
            queries2d.append(make_query2d(box, cam, inputs.points, bins, net, image_dist, camera_index=ci))
            links2d.append(link)
            scales.append(visible)
            image_depths.append(expected_depth(image_dist, bins))
            fused_depths.append(expected_depth(queries2d[-1].depth_dist, bins))
            gt_depths.append(gt_depth if link >= 0 else None)

    return Sample(
        scene_id=scene.id,
        gts=list(scene.gt_boxes),
        queries=QuerySet.build(queries2d, queries3d, radius, content_scale=scales),
        tokens=build_tokens(inputs.points, radius),
        queries2d=queries2d,
        queries3d=queries3d,
        links=links2d + links3d,
        image_depths=image_depths,
        fused_depths=fused_depths,
        gt_depths=gt_depths
    )


def depth_examples(scenes: Sequence[Scene], proposals: Sequence[Proposals], depth: DepthConfig,
                   split_seed: int) -> List[DepthExample]:
    """Linked 2D proposals of unmasked scenes as confidence-net training data"""
    bins = depth.bins
    examples = []
    for i, (scene, props) in enumerate(zip(scenes, proposals)):
        seed = sample_seed(split_seed, i)
        for ci, (cam, boxes, links) in enumerate(zip(scene.cameras, props.boxes2d, props.links2d)):
            for j, (box, link) in enumerate(zip(boxes, links)):
                if link < 0:
                    continue
                gt_depth = camera_depth(cam, scene.gt_boxes[link].center)
                d2 = image_depth_distribution(gt_depth, depth.sigma_base, scene.domain, bins,
                                              seed=derive_seed(seed, ci, j, 1), bias_scale=depth.bias_scale)
                d3 = lidar_depth_histogram(frustum_depths(cam, box, scene.points, bins), bins)
                examples.append(DepthExample(d2=d2, d3=d3, gt_depth=gt_depth))
    return examples


def fit_depth_prior(scenes: Sequence[Scene], proposals: Sequence[Proposals], depth: DepthConfig,
                    split_seed: int, seed: int) -> Tuple[ConfidenceNet, List[float]]:
    bins = depth.bins
    examples = depth_examples(scenes, proposals, depth, split_seed)
    net = ConfidenceNet.init(bins.D, seed=derive_seed(seed, 7))
    return train_confidence(net, examples, bins, depth.hyper)


def _passes(sample: Sample, decoupled: bool) -> List[PassKind]:
    has2d = any(o is QueryOrigin.FROM_2D for o in sample.queries.origins)
    has3d = any(o is QueryOrigin.FROM_3D for o in sample.queries.origins)
    kinds = []
    if decoupled and has2d:
        kinds.append(PassKind.TWO_D_ONLY)
    if decoupled and has3d:
        kinds.append(PassKind.THREE_D_ONLY)
    if has2d or has3d:
        kinds.append(PassKind.FUSED)
    return kinds


@dataclass
class SampleStep:
    outputs: Dict[PassKind, PassOutput]
    matches: Dict[PassKind, MatchResult]
    loss: DecoupledLoss


def sample_loss(weights: DecoderWeights, sample: Sample, decoupled: bool = True,
                cost: CostWeights = CostWeights()) -> SampleStep:
    outputs = {k: decoder_forward(weights, sample.queries, sample.tokens, k)
               for k in _passes(sample, decoupled)}
    matches = assign_queries({k: o.predictions() for k, o in outputs.items()}, sample.gts,
                             weights.radius, cost)
    return SampleStep(outputs=outputs, matches=matches,
                      loss=decoupled_loss(outputs, matches, sample.gts, weights.radius, cost))


def sample_gradient(weights: DecoderWeights, sample: Sample, decoupled: bool = True,
                    cost: CostWeights = CostWeights()) -> Tuple[SampleStep, Dict[str, np.ndarray]]:
    step = sample_loss(weights, sample, decoupled, cost)
    return step, accumulate(weights, step.outputs, step.loss)


def predict(weights: AnyWeights, sample: Sample) -> List[Detection]:
    """Detections from the fused pass only; each carries the origin of the
    query that produced it"""
    if isinstance(weights, OracleWeights):
        return [Detection(box=g, score=1.0, class_id=g.class_id, origin=QueryOrigin.FUSED) for g in sample.gts]
    if len(sample.queries) == 0:
        return []
    out = decoder_forward(weights, sample.queries, sample.tokens, PassKind.FUSED)
    probs = expit(out.logits)
    dets = []
    for q in range(len(out.origins)):
        cls = int(np.argmax(probs[q]))
        score = float(probs[q, cls])
        dets.append(Detection(box=denormalize_box(out.boxes[q], weights.radius, score, cls),
                              score=score, class_id=cls, origin=out.origins[q]))
    return dets


def _depth_pairs(samples: Sequence[Sample], fused: bool) -> Tuple[List[float], List[float]]:
    pred, gt = [], []
    for s in samples:
        depths = s.fused_depths if fused else s.image_depths
        for d, g in zip(depths, s.gt_depths):
            if g is not None:
                pred.append(d)
                gt.append(g)
    return pred, gt


def evaluate_samples(weights: AnyWeights, split: str, samples: Sequence[Sample],
                     cfg: EvalConfig = EvalConfig(), threads: int = 1) -> EvalReport:
    predictions = ordered_map(lambda s: predict(weights, s), samples, threads)
    dets = {s.scene_id: p for s, p in zip(samples, predictions)}
    gts = {s.scene_id: s.gts for s in samples}
    return evaluate(split, dets, gts, cfg, depth_pairs=_depth_pairs(samples, fused=True))


@dataclass
class SplitData:
    """Scenes of one split with their proposals; split_seed drives every
    per-scene draw"""
    name: str
    scenes: List[Scene]
    proposals: List[Proposals]
    split_seed: int

    @classmethod
    def build(cls, name: str, scenes: Sequence[Scene], noise: ProposalNoise, split_seed: int) -> 'SplitData':
        return cls(name, list(scenes), make_proposals(scenes, noise, split_seed), split_seed)

    def __len__(self) -> int:
        return len(self.scenes)

    def samples(self, depth: DepthConfig, radius: float, net: Optional[ConfidenceNet] = None,
                threads: int = 1) -> List[Sample]:
        """Unmasked samples, the evaluation view"""
        return ordered_map(
            lambda i: assemble_sample(self.scenes[i], self.proposals[i], depth,
                                      sample_seed(self.split_seed, i), radius, net),
            list(range(len(self.scenes))), threads)


@dataclass
class MetricsRow:
    epoch: int
    split: str
    l_2d: float
    l_3d: float
    l_fused: float
    l_total: float
    map: float


@dataclass
class TrainResult:
    weights: DecoderWeights
    log: List[MetricsRow]
    net: Optional[ConfidenceNet]
    steps: int
    reports: Dict[str, EvalReport] = field(default_factory=dict)


def _mean_losses(losses: Sequence[DecoupledLoss]) -> Dict[PassKind, float]:
    out = {}
    for kind in (PassKind.TWO_D_ONLY, PassKind.THREE_D_ONLY, PassKind.FUSED):
        values = [l.branches[kind].total if kind in l.branches else 0.0 for l in losses]
        out[kind] = float(np.mean(values)) if values else 0.0
    return out


def train(data: SplitData, cfg: TrainConfig, depth: DepthConfig, policy: MaskPolicy, seed: int,
          radius: float, eval_sets: Sequence[SplitData] = (), eval_cfg: EvalConfig = EvalConfig(),
          threads: int = 1, net: Optional[ConfidenceNet] = None,
          init_weights: Optional[DecoderWeights] = None) -> TrainResult:
    """Train the shared decoder weights on one split.

    Every step draws a masking for each scene with the curriculum
    probability, runs the passes the loss needs (fused only, or all three
    with the decoupled loss), averages the per-scene gradients in batch
    order and takes one AdamW step on a cosine schedule. Epoch 0 in the
    log is the untrained model; each later row holds the mean training
    losses of that epoch and the mAP per evaluation split after it.
    """
    cfg.validate()
    if len(data) == 0:
        raise TrainingError("training split is empty", split=data.name)
    if not cfg.depth_prior:
        net = None
    elif net is None:
        net, _ = fit_depth_prior(data.scenes, data.proposals, depth, data.split_seed, seed)
    weights = init_weights.copy() if init_weights is not None else \
        DecoderWeights.init(derive_seed(seed, 11), radius=radius)

    n = len(data)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = max(1, cfg.epochs * steps_per_epoch)
    targets = list(eval_sets) if eval_sets else [data]
    eval_samples = {s.name: s.samples(depth, radius, net, threads) for s in targets}
    clean = eval_samples[data.name] if data.name in eval_samples else data.samples(depth, radius, net, threads)

    log: List[MetricsRow] = []
    reports: Dict[str, EvalReport] = {}

    def record(epoch: int, losses: Dict[PassKind, float]):
        for name, samples in eval_samples.items():
            reports[name] = evaluate_samples(weights, name, samples, eval_cfg, threads)
            log.append(MetricsRow(
                epoch=epoch, split=name,
                l_2d=losses[PassKind.TWO_D_ONLY], l_3d=losses[PassKind.THREE_D_ONLY],
                l_fused=losses[PassKind.FUSED], l_total=sum(losses.values()),
                map=reports[name].map
            ))

    record(0, _mean_losses([sample_loss(weights, s, cfg.decoupled).loss for s in clean]))
    optimizer = AdamW(weight_decay=cfg.weight_decay)
    order_rng = np.random.default_rng(derive_seed(seed, 13))
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(n)
        epoch_losses: Dict[int, DecoupledLoss] = {}
        for b in range(steps_per_epoch):
            batch = [int(i) for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            lr = cosine_lr(step, total, cfg.lr, cfg.min_lr)

            def work(i: int):
                sample = assemble_sample(data.scenes[i], data.proposals[i], depth,
                                         sample_seed(data.split_seed, i), radius, net, policy, step, total)
                return sample_gradient(weights, sample, cfg.decoupled)

            grads = weights.zeros_like()
            for i, (result, g) in zip(batch, ordered_map(work, batch, threads)):
                if not np.isfinite(result.loss.total):
                    raise TrainingError("non-finite loss", step=step, scene=data.scenes[i].id, lr=lr)
                epoch_losses[i] = result.loss
                for k in grads:
                    grads[k] += g[k] / len(batch)
            optimizer.step(weights.params, grads, lr)
            step += 1
        means = _mean_losses([epoch_losses[i] for i in sorted(epoch_losses)])
        logger.info(f"epoch {epoch}/{cfg.epochs}: L_total {sum(means.values()):.4f}")
        record(epoch, means)
    return TrainResult(weights=weights, log=log, net=net, steps=step, reports=reports)


def _origin_detections(sample: Sample) -> List[Detection]:
    """Proposal-level 3D detections tagged with the modality they came from"""
    dets = []
    for q in sample.queries2d:
        cls = q.source_box.class_id
        size = CLASS_SIZES[min(cls, len(CLASS_SIZES) - 1)]
        box = Box3D(center=q.ref_point, size=size, yaw=0.0, score=q.source_box.score, class_id=cls)
        dets.append(Detection(box=box, score=box.score, class_id=cls, origin=QueryOrigin.FROM_2D))
    for q in sample.queries3d:
        b = q.source_box
        dets.append(Detection(box=b, score=b.score, class_id=b.class_id, origin=QueryOrigin.FROM_3D))
    return dets


def collect_pilot(data: SplitData, depth: DepthConfig, radius: float, net: Optional[ConfidenceNet] = None,
                  weights: Optional[AnyWeights] = None, threads: int = 1) -> Optional[PilotSplit]:
    """Everything the pilot tables need from one split; None for an empty split"""
    if len(data) == 0:
        return None
    samples = data.samples(depth, radius, net, threads)
    native: Dict[str, List[Box2D]] = {}
    projected: Dict[str, List[Box2D]] = {}
    gts_2d: Dict[str, List[Box2D]] = {}
    for scene, props in zip(data.scenes, data.proposals):
        for ci, cam in enumerate(scene.cameras):
            key = f"{scene.id}/{ci}"
            native[key] = list(props.boxes2d[ci])
            projected[key] = [p for p in (visible_projection(cam, b) for b in props.boxes3d) if p is not None]
            gts_2d[key] = [p for p in (visible_projection(cam, g) for g in scene.gt_boxes) if p is not None]

    supervision = {}
    if isinstance(weights, DecoderWeights):
        steps = ordered_map(lambda s: sample_loss(weights, s, decoupled=True), samples, threads)
        for kind in (PassKind.TWO_D_ONLY, PassKind.THREE_D_ONLY, PassKind.FUSED):
            supervision[kind] = supervision_stats(
                [(st.matches[kind], st.outputs[kind].origins) for st in steps if kind in st.outputs],
                n_samples=len(samples))

    image_pred, gt = _depth_pairs(samples, fused=False)
    fused_pred, _ = _depth_pairs(samples, fused=True)
    return PilotSplit(
        native_2d=native,
        projected_3d=projected,
        gts_2d=gts_2d,
        origin_dets={s.scene_id: _origin_detections(s) for s in samples},
        gts_3d={s.scene_id: s.gts for s in samples},
        supervision=supervision,
        image_depths=image_pred,
        fused_depths=fused_pred,
        gt_depths=gt
    )
