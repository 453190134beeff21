"""Cross-modal masking: GridMask generation, complementary image/LiDAR
masking through projection, a linear curriculum on the masking probability,
and the variants compared in the masking-strategy study.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import MaskError
from .geometry import project_points
from .types import CameraModel

logger = logging.getLogger(__name__)


class MaskKind(str, Enum):
    NONE = "None"
    IMAGE_GRID = "ImageGrid"
    MODAL = "Modal"
    CONSISTENT_GRID = "ConsistentGrid"
    COMPLEMENTARY_GRID = "ComplementaryGrid"
    COMPLEMENTARY_RANDOM = "ComplementaryRandom"


@dataclass(frozen=True)
class GridParams:
    unit_range: Tuple[int, int] = (16, 32)
    keep_ratio: float = 0.5

    def validate(self) -> 'GridParams':
        lo, hi = self.unit_range
        if lo < 1 or lo > hi:
            raise MaskError(f"invalid grid unit range {self.unit_range}")
        if not 0.0 < self.keep_ratio < 1.0:
            raise MaskError(f"keep ratio must lie in (0, 1), got {self.keep_ratio}")
        return self

    def block_size(self, unit: int) -> int:
        return int(round(unit * np.sqrt(1.0 - self.keep_ratio)))


@dataclass(frozen=True)
class MaskPolicy:
    kind: MaskKind = MaskKind.COMPLEMENTARY_GRID
    grid: GridParams = field(default_factory=GridParams)
    p_max: float = 0.7
    curriculum: bool = True
    # Flip which side of the mask the image keeps; LiDAR always takes the other side.
    invert: bool = False

    def __post_init__(self):
        object.__setattr__(self, 'kind', MaskKind(self.kind))
        if not 0.0 <= self.p_max <= 1.0:
            raise MaskError(f"p_max must lie in [0, 1], got {self.p_max}")


@dataclass(frozen=True, eq=False)
class Mask:
    """1 = image-visible, 0 = image-masked"""
    grid: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid).astype(np.uint8)
        if g.ndim != 2 or np.any(g > 1):
            raise MaskError("mask must be a binary H x W grid")
        g.setflags(write=False)
        object.__setattr__(self, 'grid', g)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.grid.shape

    @property
    def masked_fraction(self) -> float:
        return float(1.0 - self.grid.mean())

    @classmethod
    def full(cls, h: int, w: int, value: int = 1) -> 'Mask':
        return cls(np.full((h, w), value, dtype=np.uint8))


@dataclass(frozen=True, eq=False)
class SceneInputs:
    """What the two branches see: one visibility grid per camera and the point cloud"""
    images: List[np.ndarray]
    points: np.ndarray
    cameras: List[CameraModel]
    applied: MaskKind = MaskKind.NONE

    @classmethod
    def unmasked(cls, cameras: Sequence[CameraModel], points: np.ndarray) -> 'SceneInputs':
        return cls(images=[np.ones(c.image_size, dtype=np.uint8) for c in cameras],
                   points=np.asarray(points, dtype=np.float64), cameras=list(cameras))


def gridmask(h: int, w: int, params: GridParams, seed: int) -> Mask:
    if h <= 0 or w <= 0:
        raise MaskError(f"mask size must be positive, got {(h, w)}")
    params.validate()
    rng = np.random.default_rng(seed)
    unit = int(rng.integers(params.unit_range[0], params.unit_range[1] + 1))
    block = params.block_size(unit)
    dy, dx = (int(v) for v in rng.integers(0, unit, size=2))
    rows = ((np.arange(h) + dy) % unit) < block
    cols = ((np.arange(w) + dx) % unit) < block
    return Mask((~(rows[:, None] & cols[None, :])).astype(np.uint8))


def random_mask(h: int, w: int, params: GridParams, seed: int) -> Mask:
    """Bernoulli per unit cell with the grid's expected masked fraction"""
    if h <= 0 or w <= 0:
        raise MaskError(f"mask size must be positive, got {(h, w)}")
    params.validate()
    rng = np.random.default_rng(seed)
    unit = int(rng.integers(params.unit_range[0], params.unit_range[1] + 1))
    p_mask = (params.block_size(unit) / unit) ** 2
    cells = rng.random((-(-h // unit), -(-w // unit))) < p_mask
    masked = np.kron(cells, np.ones((unit, unit), dtype=bool))[:h, :w]
    return Mask((~masked).astype(np.uint8))


def curriculum_prob(step: int, total_steps: int, p_max: float) -> float:
    if total_steps <= 0 or not 0 <= step <= total_steps:
        raise MaskError(f"invalid curriculum step {step}/{total_steps}")
    return p_max * (step / total_steps)


def point_pixels(cam: CameraModel, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Integer pixel of each projectable point and the projectable flags"""
    uv, _, valid = project_points(cam, points[:, :3])
    pix = np.zeros((len(points), 2), dtype=np.int64)
    pix[valid] = np.floor(uv[valid]).astype(np.int64)
    return pix, valid


def _split_points(cam: CameraModel, points: np.ndarray, keep_where: np.ndarray) -> np.ndarray:
    """Keep flag per point: projectable points keep iff keep_where is set at
    their pixel; points outside this camera are kept"""
    pix, valid = point_pixels(cam, points)
    keep = np.ones(len(points), dtype=bool)
    keep[valid] = keep_where[pix[valid, 1], pix[valid, 0]].astype(bool)
    return keep


def apply_complementary(pixels: np.ndarray, points: np.ndarray, cam: CameraModel,
                        mask: Mask, invert: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Zero the image where M = 0 and keep exactly the points landing there"""
    if mask.shape != cam.image_size:
        raise MaskError(f"mask {mask.shape} does not match camera {cam.image_size}")
    visible = mask.grid if not invert else 1 - mask.grid
    points = np.asarray(points, dtype=np.float64)
    keep = _split_points(cam, points, 1 - visible)
    return np.asarray(pixels) * visible, points[keep]


def reconcile_visibility(cameras: Sequence[CameraModel], visible: Sequence[np.ndarray],
                         points: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray, np.ndarray]:
    """Give every point one verdict across the cameras that see it.

    A point whose pixel is hidden in any seeing camera becomes hidden in all of
    them. Hiding that pixel can hide further points in the same camera, so this
    runs until nothing changes. Single-camera inputs come back unchanged.

    Returns the updated visibility grids, the hidden flag per point and the
    seen-by-some-camera flag per point.
    """
    grids = [np.array(v, dtype=np.uint8) for v in visible]
    views = [point_pixels(cam, points) for cam in cameras]
    hidden = np.zeros(len(points), dtype=bool)
    seen = np.zeros(len(points), dtype=bool)
    for _, valid in views:
        seen |= valid
    while True:
        for grid, (pix, valid) in zip(grids, views):
            sel = valid & ~hidden
            hidden[sel] = grid[pix[sel, 1], pix[sel, 0]] == 0
        changed = False
        for grid, (pix, valid) in zip(grids, views):
            sel = valid & hidden
            ys, xs = pix[sel, 1], pix[sel, 0]
            if np.any(grid[ys, xs]):
                grid[ys, xs] = 0
                changed = True
        if not changed:
            return grids, hidden, seen


class Masker(ABC):
    """One masking strategy applied to every camera of a sample"""

    def __init__(self, policy: MaskPolicy):
        self.policy = policy

    @abstractmethod
    def apply(self, inputs: SceneInputs, masks: List[Mask], rng: np.random.Generator) -> SceneInputs:
        """Return the augmented inputs"""
        pass

    def make_mask(self, cam: CameraModel, seed: int) -> Mask:
        return gridmask(cam.height, cam.width, self.policy.grid, seed)


class NoMasker(Masker):
    def apply(self, inputs, masks, rng):
        return inputs


class ImageGridMasker(Masker):
    def apply(self, inputs, masks, rng):
        images = [img * m.grid for img, m in zip(inputs.images, masks)]
        return replace(inputs, images=images, applied=MaskKind.IMAGE_GRID)


class ModalMasker(Masker):
    def apply(self, inputs, masks, rng):
        if rng.random() < 0.5:
            images = [np.zeros_like(img) for img in inputs.images]
            return replace(inputs, images=images, applied=MaskKind.MODAL)
        return replace(inputs, points=inputs.points[:0], applied=MaskKind.MODAL)


class ConsistentGridMasker(Masker):
    def apply(self, inputs, masks, rng):
        visible, hidden, _ = reconcile_visibility(inputs.cameras, [m.grid for m in masks], inputs.points)
        images = [img * v for img, v in zip(inputs.images, visible)]
        return replace(inputs, images=images, points=inputs.points[~hidden], applied=MaskKind.CONSISTENT_GRID)


class ComplementaryMasker(Masker):
    """Image keeps the visible side, LiDAR keeps the hidden side plus points no camera sees"""

    def apply(self, inputs, masks, rng):
        grids = [m.grid if not self.policy.invert else 1 - m.grid for m in masks]
        visible, hidden, seen = reconcile_visibility(inputs.cameras, grids, inputs.points)
        images = [img * v for img, v in zip(inputs.images, visible)]
        return replace(inputs, images=images, points=inputs.points[hidden | ~seen], applied=self.policy.kind)


class ComplementaryRandomMasker(ComplementaryMasker):
    def make_mask(self, cam, seed):
        return random_mask(cam.height, cam.width, self.policy.grid, seed)


MASKERS: Dict[MaskKind, type] = {
    MaskKind.NONE: NoMasker,
    MaskKind.IMAGE_GRID: ImageGridMasker,
    MaskKind.MODAL: ModalMasker,
    MaskKind.CONSISTENT_GRID: ConsistentGridMasker,
    MaskKind.COMPLEMENTARY_GRID: ComplementaryMasker,
    MaskKind.COMPLEMENTARY_RANDOM: ComplementaryRandomMasker,
}


def make_masker(policy: MaskPolicy) -> Masker:
    return MASKERS[policy.kind](policy)


def apply_policy(inputs: SceneInputs, policy: MaskPolicy, step: int, total: int, seed: int,
                 masks: Optional[List[Mask]] = None) -> SceneInputs:
    """Apply policy with the (curriculum) probability; masks, when given,
    replace the generated ones"""
    if policy.kind is MaskKind.NONE:
        return inputs
    rng = np.random.default_rng([seed, step])
    p = curriculum_prob(step, total, policy.p_max) if policy.curriculum else policy.p_max
    if rng.random() >= p:
        return inputs
    masker = make_masker(policy)
    if masks is None:
        # one independent mask per camera
        mask_seeds = rng.integers(0, 2 ** 31, size=len(inputs.cameras))
        masks = [masker.make_mask(cam, int(s)) for cam, s in zip(inputs.cameras, mask_seeds)]
    for cam, m in zip(inputs.cameras, masks):
        if m.shape != cam.image_size:
            raise MaskError(f"mask {m.shape} does not match camera {cam.image_size}")
    return masker.apply(inputs, masks, rng)


def visible_fraction(image: np.ndarray, box) -> float:
    """Share of a 2D box's pixels that stay image-visible"""
    h, w = image.shape
    x0, x1 = int(np.floor(max(box.x_min, 0))), int(np.ceil(min(box.x_max, w)))
    y0, y1 = int(np.floor(max(box.y_min, 0))), int(np.ceil(min(box.y_max, h)))
    if x1 <= x0 or y1 <= y0:
        return 0.0
    return float(image[y0:y1, x0:x1].mean())
