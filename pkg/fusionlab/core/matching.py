"""Hungarian assignment of decoder queries to ground truth boxes."""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import expit

from .errors import MatchingError
from .types import Box3D, PassKind, QueryOrigin

logger = logging.getLogger(__name__)

PAD_COST = 1e6
TIE_TOL = 1e-9


@dataclass(frozen=True)
class CostWeights:
    w_cls: float = 1.0
    w_box: float = 0.25
    alpha: float = 0.25
    gamma: float = 2.0


@dataclass
class MatchResult:
    pairs: List[Tuple[int, int]]
    unmatched: List[int]
    pair_costs: List[float] = field(default_factory=list)
    cls_costs: List[float] = field(default_factory=list)
    box_costs: List[float] = field(default_factory=list)

    @property
    def total_cost(self) -> float:
        return float(sum(self.pair_costs))

    def gt_to_query(self) -> Dict[int, int]:
        return {g: q for q, g in self.pairs}


def _check_costs(costs: np.ndarray) -> np.ndarray:
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2:
        raise MatchingError(f"cost matrix must be 2-D, got shape {costs.shape}")
    if not np.all(np.isfinite(costs)):
        raise MatchingError("cost matrix contains NaN or infinite entries")
    return costs


def _optimal_total(costs: np.ndarray) -> float:
    if costs.size == 0:
        return 0.0
    rows, cols = linear_sum_assignment(costs)
    return float(costs[rows, cols].sum())


def _lexicographic(costs: np.ndarray, optimum: float) -> List[Tuple[int, int]]:
    """Smallest pair list (ordered by query) among optimal assignments"""
    n, m = costs.shape
    k = min(n, m)
    tol = TIE_TOL * max(1.0, abs(optimum))
    fixed: List[Tuple[int, int]] = []
    fixed_cost = 0.0
    skipped = set()
    used_cols = set()
    for i in range(n):
        if len(fixed) == k:
            break
        for j in range(m):
            if j in used_cols:
                continue
            rest_rows = [r for r in range(i + 1, n) if r not in skipped]
            rest_cols = [c for c in range(m) if c not in used_cols and c != j]
            if min(len(rest_rows), len(rest_cols)) < k - len(fixed) - 1:
                continue
            rest = _optimal_total(costs[np.ix_(rest_rows, rest_cols)]) if rest_rows and rest_cols else 0.0
            if fixed_cost + costs[i, j] + rest <= optimum + tol:
                fixed.append((i, j))
                fixed_cost += costs[i, j]
                used_cols.add(j)
                break
        else:
            skipped.add(i)
    return fixed


def hungarian(costs) -> MatchResult:
    costs = _check_costs(costs)
    n, m = costs.shape
    if n == 0 or m == 0:
        return MatchResult(pairs=[], unmatched=list(range(n)))
    # square padding keeps the arithmetic finite; padded pairs are unmatched
    size = max(n, m)
    padded = np.full((size, size), PAD_COST)
    padded[:n, :m] = costs
    rows, cols = linear_sum_assignment(padded)
    optimum = float(sum(costs[r, c] for r, c in zip(rows, cols) if r < n and c < m))
    pairs = _lexicographic(costs, optimum)
    matched = {q for q, _ in pairs}
    return MatchResult(
        pairs=pairs,
        unmatched=[q for q in range(n) if q not in matched],
        pair_costs=[float(costs[q, g]) for q, g in pairs]
    )


def normalize_box(box: Box3D, radius: float) -> np.ndarray:
    """7-DoF parameters scaled so cls and box terms are commensurable"""
    return np.concatenate([box.center / radius, box.size / radius, [box.yaw / np.pi]])


def focal_positive_cost(logits: np.ndarray, alpha: float, gamma: float) -> np.ndarray:
    """alpha (1 - p)^gamma (-log p); zero when p = 1"""
    one_minus_p = expit(-logits)
    return alpha * one_minus_p ** gamma * np.logaddexp(0.0, -logits)


def cost_terms(logits: np.ndarray, boxes: np.ndarray, gt_classes: np.ndarray, gt_boxes: np.ndarray,
               weights: CostWeights) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized (cls, box) cost matrices of shape (queries, gts)"""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise MatchingError("class logits must be finite")
    cls = weights.w_cls * focal_positive_cost(logits[:, gt_classes], weights.alpha, weights.gamma)
    box = weights.w_box * np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).sum(axis=2)
    return cls, box


def match_cost(pred: Tuple[np.ndarray, np.ndarray], gt: Tuple[int, np.ndarray],
               weights: CostWeights = CostWeights()) -> float:
    """pred = (class logits, normalized 7-DoF box); gt = (class, normalized box)"""
    logits, box = pred
    gt_class, gt_box = gt
    cls, reg = cost_terms(np.atleast_2d(logits), np.atleast_2d(box), np.array([gt_class]),
                          np.atleast_2d(gt_box), weights)
    return float(cls[0, 0] + reg[0, 0])


@dataclass(frozen=True)
class PassPredictions:
    logits: np.ndarray  # (Q, n_classes)
    boxes: np.ndarray  # (Q, 7) normalized
    origins: Tuple[QueryOrigin, ...]


def match_pass(pred: PassPredictions, gt_classes: np.ndarray, gt_boxes: np.ndarray,
               weights: CostWeights = CostWeights()) -> MatchResult:
    n, m = len(pred.boxes), len(gt_classes)
    if n == 0 or m == 0:
        return MatchResult(pairs=[], unmatched=list(range(n)))
    cls, box = cost_terms(pred.logits, pred.boxes, gt_classes, gt_boxes, weights)
    result = hungarian(cls + box)
    result.cls_costs = [float(cls[q, g]) for q, g in result.pairs]
    result.box_costs = [float(box[q, g]) for q, g in result.pairs]
    return result


def assign_queries(preds: Dict[PassKind, PassPredictions], gts: Sequence[Box3D], radius: float,
                   weights: CostWeights = CostWeights()) -> Dict[PassKind, MatchResult]:
    """Independent matching per pass, same cost hyperparameters for all"""
    gt_classes = np.array([g.class_id for g in gts], dtype=np.int64)
    gt_boxes = np.array([normalize_box(g, radius) for g in gts]).reshape(-1, 7)
    return {kind: match_pass(p, gt_classes, gt_boxes, weights) for kind, p in preds.items()}


@dataclass(frozen=True)
class SupervisionStats:
    mean_matched_2d: float
    mean_matched_3d: float
    ratio: float  # 3D:2D, math.inf when no 2D query is ever matched
    n_samples: int


def supervision_stats(results: Sequence[Tuple[MatchResult, Sequence[QueryOrigin]]],
                      n_samples: Optional[int] = None) -> SupervisionStats:
    """Per-sample means of matched queries by origin.

    n_samples counts samples whose pass was never run (no queries) so that
    every pass of a split averages over the same denominator.
    """
    n = len(results) if n_samples is None else n_samples
    if n < len(results):
        raise MatchingError(f"{len(results)} match results for {n} samples")
    if n == 0:
        return SupervisionStats(0.0, 0.0, math.inf, 0)
    n2 = n3 = 0
    for result, origins in results:
        for q, _ in result.pairs:
            if origins[q] is QueryOrigin.FROM_2D:
                n2 += 1
            elif origins[q] is QueryOrigin.FROM_3D:
                n3 += 1
    mean2, mean3 = n2 / n, n3 / n
    ratio = mean3 / mean2 if mean2 > 0 else math.inf
    return SupervisionStats(mean2, mean3, ratio, n)
