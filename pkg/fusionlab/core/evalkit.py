"""Detection evaluation.

Center-distance AP follows the nuScenes convention: detections of one class
are ranked by score, each is greedily matched to the nearest unmatched
ground truth in its sample by BEV center distance, and the precision/recall
curve is integrated with 41-point interpolation. mAP averages over classes
and distance thresholds; classes with no ground truth in a split are left
out of the mean and listed in the report.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, EvaluationError
from .matching import SupervisionStats
from .types import Box2D, Box3D, Detection, PassKind, QueryOrigin, wrap_angle

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
N_RECALL_POINTS = 41
TP_THRESHOLD = 2.0
RECALL_TOL = 1e-12

# per-sample collections keyed by sample id
PerSample = Mapping[str, Sequence]


@dataclass(frozen=True)
class EvalConfig:
    thresholds: Tuple[float, ...] = DEFAULT_THRESHOLDS
    classes: Tuple[int, ...] = (0, 1, 2)
    depth_range: Tuple[float, float] = (0.0, 40.0)
    iou_2d: float = 0.5

    def validate(self) -> 'EvalConfig':
        if not self.thresholds or any(t <= 0 for t in self.thresholds):
            raise ConfigError("eval.thresholds", f"need positive thresholds, got {list(self.thresholds)}")
        if not self.classes:
            raise ConfigError("eval.classes", "class list must not be empty")
        lo, hi = self.depth_range
        if not lo < hi:
            raise ConfigError("eval.depth_range", f"empty range {(lo, hi)}")
        if not 0.0 < self.iou_2d <= 1.0:
            raise ConfigError("eval.iou_2d", f"must lie in (0, 1], got {self.iou_2d}")
        return self


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """41-point interpolated area under the precision/recall curve of a
    ranked list of true-positive flags"""
    tp = np.asarray(tp, dtype=np.float64)
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    grid = np.arange(N_RECALL_POINTS) / (N_RECALL_POINTS - 1)
    idx = np.searchsorted(recall, grid - RECALL_TOL, side='left')
    reached = idx < len(recall)
    interp = np.where(reached, envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(interp.mean())


def _ranked(dets: PerSample, class_id: int) -> List[Tuple[str, Detection]]:
    flat = [(sid, d) for sid, ds in dets.items() for d in ds if d.class_id == class_id]
    flat.sort(key=lambda item: (-item[1].score, item[0], tuple(item[1].box.center.tolist()),
                                item[1].box.yaw))
    return flat


def _bev_distance(a: Box3D, b: Box3D) -> float:
    return float(np.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]))


def _greedy_match(dets: PerSample, gts: PerSample, class_id: int,
                  threshold: float) -> Tuple[List[Tuple[Detection, Optional[Box3D]]], int]:
    """Ranked (detection, matched gt or None) pairs and the gt count"""
    pool = {sid: [g for g in gs if g.class_id == class_id] for sid, gs in gts.items()}
    taken = {sid: np.zeros(len(gs), dtype=bool) for sid, gs in pool.items()}
    n_gt = sum(len(gs) for gs in pool.values())
    ranked = []
    for sid, det in _ranked(dets, class_id):
        candidates = pool.get(sid, [])
        best, best_dist = None, np.inf
        for gi, gt in enumerate(candidates):
            if taken[sid][gi]:
                continue
            dist = _bev_distance(det.box, gt)
            if dist < best_dist:
                best, best_dist = gi, dist
        if best is not None and best_dist <= threshold:
            taken[sid][best] = True
            ranked.append((det, candidates[best]))
        else:
            ranked.append((det, None))
    return ranked, n_gt


def average_precision(dets: PerSample, gts: PerSample, class_id: int, dist_threshold: float) -> float:
    if dist_threshold <= 0:
        raise ConfigError("eval.thresholds", f"distance threshold must be positive, got {dist_threshold}")
    ranked, n_gt = _greedy_match(dets, gts, class_id, dist_threshold)
    return interpolated_ap(np.array([gt is not None for _, gt in ranked]), n_gt)


def present_classes(gts: PerSample, classes: Sequence[int]) -> List[int]:
    counts = {c: 0 for c in classes}
    for gs in gts.values():
        for g in gs:
            if g.class_id in counts:
                counts[g.class_id] += 1
    return [c for c in classes if counts[c] > 0]


def class_ap_table(dets: PerSample, gts: PerSample, classes: Sequence[int],
                   thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> Dict[Tuple[int, float], float]:
    return {(c, t): average_precision(dets, gts, c, t)
            for c in present_classes(gts, classes) for t in thresholds}


def map_score(dets: PerSample, gts: PerSample, classes: Sequence[int],
              thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> float:
    if not classes:
        raise ConfigError("eval.classes", "class list must not be empty")
    table = class_ap_table(dets, gts, classes, thresholds)
    if not table:
        return 0.0
    return float(np.mean([table[key] for key in sorted(table)]))


@dataclass(frozen=True)
class TPErrors:
    translation: Optional[float]
    scale: Optional[float]
    orientation: Optional[float]


def aligned_iou(a: Box3D, b: Box3D) -> float:
    """IoU of two boxes after aligning centers and yaw"""
    inter = float(np.prod(np.minimum(a.size, b.size)))
    return inter / (float(np.prod(a.size)) + float(np.prod(b.size)) - inter)


def tp_errors(dets: PerSample, gts: PerSample, classes: Sequence[int],
              threshold: float = TP_THRESHOLD) -> TPErrors:
    """Class-averaged mean errors over true positives at one threshold"""
    per_class = []
    for c in present_classes(gts, classes):
        ranked, _ = _greedy_match(dets, gts, c, threshold)
        pairs = [(d.box, g) for d, g in ranked if g is not None]
        if not pairs:
            continue
        per_class.append((
            np.mean([_bev_distance(d, g) for d, g in pairs]),
            np.mean([1.0 - aligned_iou(d, g) for d, g in pairs]),
            np.mean([abs(wrap_angle(d.yaw - g.yaw)) for d, g in pairs]),
        ))
    if not per_class:
        return TPErrors(None, None, None)
    mean = np.mean(np.array(per_class), axis=0)
    return TPErrors(float(mean[0]), float(mean[1]), float(mean[2]))


def depth_mae(pred_depths: Sequence[float], gt_depths: Sequence[float],
              depth_range: Tuple[float, float] = (0.0, 40.0)) -> Optional[float]:
    """Mean absolute depth error over pairs whose gt depth lies in range;
    None when no pair qualifies"""
    pred = np.asarray(pred_depths, dtype=np.float64)
    gt = np.asarray(gt_depths, dtype=np.float64)
    if pred.shape != gt.shape:
        raise EvaluationError(f"depth arrays differ in shape: {pred.shape} vs {gt.shape}")
    lo, hi = depth_range
    keep = (gt >= lo) & (gt <= hi)
    if not np.any(keep):
        return None
    return float(np.mean(np.abs(pred[keep] - gt[keep])))


def filter_origin(dets: PerSample, origin: QueryOrigin) -> Dict[str, List[Detection]]:
    return {sid: [d for d in ds if d.origin is origin] for sid, ds in dets.items()}


@dataclass
class EvalReport:
    split: str
    ap: Dict[Tuple[int, float], float]
    map: float
    depth_mae: Optional[float]
    errors: TPErrors
    per_origin_map: Dict[QueryOrigin, float]
    absent_classes: Tuple[int, ...] = ()


def evaluate(split: str, dets: PerSample, gts: PerSample, cfg: EvalConfig = EvalConfig(),
             depth_pairs: Optional[Tuple[Sequence[float], Sequence[float]]] = None) -> EvalReport:
    table = class_ap_table(dets, gts, cfg.classes, cfg.thresholds)
    present = set(c for c, _ in table)
    absent = tuple(c for c in cfg.classes if c not in present)
    if absent:
        logger.debug(f"{split}: classes {list(absent)} have no ground truth and are left out of mAP")
    mae = depth_mae(*depth_pairs, depth_range=cfg.depth_range) if depth_pairs is not None else None
    return EvalReport(
        split=split,
        ap=table,
        map=float(np.mean([table[k] for k in sorted(table)])) if table else 0.0,
        depth_mae=mae,
        errors=tp_errors(dets, gts, cfg.classes),
        per_origin_map={o: map_score(filter_origin(dets, o), gts, cfg.classes, cfg.thresholds)
                        for o in (QueryOrigin.FROM_2D, QueryOrigin.FROM_3D)},
        absent_classes=absent
    )


def average_precision_2d(dets: PerSample, gts: PerSample, class_id: int, iou_threshold: float = 0.5) -> float:
    """Greedy IoU matching of image boxes, same interpolation as the 3D AP"""
    flat = [(sid, d) for sid, ds in dets.items() for d in ds if d.class_id == class_id]
    flat.sort(key=lambda item: (-item[1].score, item[0], item[1].x_min, item[1].y_min,
                                item[1].x_max, item[1].y_max))
    pool = {sid: [g for g in gs if g.class_id == class_id] for sid, gs in gts.items()}
    taken = {sid: np.zeros(len(gs), dtype=bool) for sid, gs in pool.items()}
    n_gt = sum(len(gs) for gs in pool.values())
    tp = []
    for sid, det in flat:
        best, best_iou = None, 0.0
        for gi, gt in enumerate(pool.get(sid, [])):
            if taken[sid][gi]:
                continue
            iou = det.iou(gt)
            if iou > best_iou:
                best, best_iou = gi, iou
        hit = best is not None and best_iou >= iou_threshold
        if hit:
            taken[sid][best] = True
        tp.append(hit)
    return interpolated_ap(np.array(tp), n_gt)


def map_2d(dets: PerSample, gts: PerSample, classes: Sequence[int], iou_threshold: float = 0.5) -> float:
    present = present_classes(gts, classes)
    if not present:
        return 0.0
    return float(np.mean([average_precision_2d(dets, gts, c, iou_threshold) for c in present]))


@dataclass
class PilotSplit:
    """Proposal-level measurements of one split, keyed by sample id
    ("scene" for 3D, "scene/camera" for 2D)"""
    native_2d: Dict[str, List[Box2D]]
    projected_3d: Dict[str, List[Box2D]]
    gts_2d: Dict[str, List[Box2D]]
    origin_dets: Dict[str, List[Detection]]
    gts_3d: Dict[str, List[Box3D]]
    supervision: Dict[PassKind, SupervisionStats]
    image_depths: List[float] = field(default_factory=list)
    fused_depths: List[float] = field(default_factory=list)
    gt_depths: List[float] = field(default_factory=list)


@dataclass
class Table:
    header: Tuple[str, ...]
    rows: List[tuple] = field(default_factory=list)


@dataclass
class PilotTables:
    ap2d: Table
    origin: Table
    supervision: Table
    depth: Table

    def tables(self) -> Dict[str, Table]:
        return {'pilot_ap2d': self.ap2d, 'pilot_origin_map': self.origin,
                'pilot_supervision': self.supervision, 'pilot_depth_mae': self.depth}


PASS_ORDER = (PassKind.TWO_D_ONLY, PassKind.THREE_D_ONLY, PassKind.FUSED)
ORIGIN_ORDER = (QueryOrigin.FROM_2D, QueryOrigin.FROM_3D)


def pilot_report(splits: Mapping[str, Optional[PilotSplit]], cfg: EvalConfig = EvalConfig()) -> PilotTables:
    """Rows per split; a split without data yields None cells"""
    out = PilotTables(
        ap2d=Table(('split', 'native_2d_map50', 'projected_3d_map50')),
        origin=Table(('split', 'origin', 'map')),
        supervision=Table(('split', 'pass', 'matched2d', 'matched3d', 'ratio')),
        depth=Table(('split', 'image_depth_mae_m', 'fused_depth_mae_m')),
    )
    for name, data in splits.items():
        if data is None:
            out.ap2d.rows.append((name, None, None))
            out.origin.rows.extend((name, o.value, None) for o in ORIGIN_ORDER)
            out.supervision.rows.extend((name, k.value, None, None, None) for k in PASS_ORDER)
            out.depth.rows.append((name, None, None))
            continue
        out.ap2d.rows.append((
            name,
            map_2d(data.native_2d, data.gts_2d, cfg.classes, cfg.iou_2d),
            map_2d(data.projected_3d, data.gts_2d, cfg.classes, cfg.iou_2d),
        ))
        for o in ORIGIN_ORDER:
            out.origin.rows.append((name, o.value, map_score(filter_origin(data.origin_dets, o),
                                                             data.gts_3d, cfg.classes, cfg.thresholds)))
        for k in PASS_ORDER:
            s = data.supervision.get(k)
            out.supervision.rows.append((name, k.value, None, None, None) if s is None else
                                        (name, k.value, s.mean_matched_2d, s.mean_matched_3d, s.ratio))
        out.depth.rows.append((
            name,
            depth_mae(data.image_depths, data.gt_depths, cfg.depth_range),
            depth_mae(data.fused_depths, data.gt_depths, cfg.depth_range),
        ))
    return out
