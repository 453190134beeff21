"""Seeded synthetic multi-modal scenes and parametric domain shift.

Everything here is a pure function of (config, seed): scene i of a split
draws from a generator seeded by derive_seed(base_seed, i), so serial and
pooled generation agree bit for bit.
"""
import json
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DatasetError, GeometryError
from .geometry import project_box3d, project_point
from .types import Box2D, Box3D, CameraModel, DomainName, DomainTag, Scene, wrap_angle

logger = logging.getLogger(__name__)

CLASS_NAMES = ('car', 'pedestrian', 'large_vehicle')
CLASS_SIZES = np.array([
    [4.5, 1.9, 1.6],
    [0.8, 0.8, 1.75],
    [10.0, 2.8, 3.2],
])


def derive_seed(*keys: int) -> int:
    """Stable child seed for a tuple of non-negative integer keys"""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


@dataclass(frozen=True)
class SimConfig:
    n_objects: Tuple[int, int] = (3, 8)
    class_weights: Tuple[float, ...] = (0.6, 0.3, 0.1)
    rays_per_object: Tuple[int, int] = (60, 160)
    point_noise: float = 0.02
    n_cameras: int = 6
    image_size: Tuple[int, int] = (96, 160)
    focal: float = 80.0
    camera_height: float = 1.6
    lidar_height: float = 1.8
    scene_radius: float = 45.0
    min_range: float = 4.0
    falloff_range: float = 12.0
    clutter_points: int = 150
    size_jitter: float = 0.1
    seed: int = 0

    def validate(self) -> 'SimConfig':
        for name in ('n_objects', 'rays_per_object'):
            lo, hi = getattr(self, name)
            if lo < 0 or lo > hi:
                raise ConfigError(f"sim.{name}", f"empty or negative range {(lo, hi)}")
        weights = np.asarray(self.class_weights, dtype=np.float64)
        if len(weights) != len(CLASS_NAMES) or np.any(weights < 0) or weights.sum() <= 0:
            raise ConfigError("sim.class_weights",
                              f"need {len(CLASS_NAMES)} non-negative weights with positive sum")
        if self.point_noise < 0:
            raise ConfigError("sim.point_noise", "noise sigma must be >= 0")
        if self.n_cameras < 1:
            raise ConfigError("sim.n_cameras", "need at least one camera")
        if min(self.image_size) <= 0 or self.focal <= 0:
            raise ConfigError("sim.image_size", "image size and focal length must be positive")
        if not 0 < self.min_range < self.scene_radius:
            raise ConfigError("sim.scene_radius", "need 0 < min_range < scene_radius")
        if self.clutter_points < 0 or self.size_jitter < 0 or self.falloff_range <= 0:
            raise ConfigError("sim.clutter_points", "clutter, size jitter and falloff must be non-negative")
        return self


@dataclass(frozen=True)
class CorruptionParams:
    rain_range_max: float = 50.0
    rain_range_floor: float = 0.1
    rain_min_survival: float = 0.1
    rain_jitter: float = 0.08
    geo_size_scale: float = 0.2
    geo_density_drop: float = 0.3
    lidar_height: float = 1.8


@dataclass(frozen=True)
class ProposalNoise:
    recall_2d: float = 0.95
    recall_3d: float = 0.9
    fp_rate_2d: float = 0.3
    fp_rate_3d: float = 1.0
    box2d_jitter: float = 0.05
    center_jitter_3d: float = 0.15
    size_jitter_3d: float = 0.05
    yaw_jitter_3d: float = 0.05
    rain_center_scale: float = 4.0
    night_box2d_scale: float = 1.0
    tp_score: Tuple[float, float] = (0.85, 0.08)
    fp_score: Tuple[float, float] = (0.05, 0.5)

    @classmethod
    def zero(cls) -> 'ProposalNoise':
        return cls(recall_2d=1.0, recall_3d=1.0, fp_rate_2d=0.0, fp_rate_3d=0.0,
                   box2d_jitter=0.0, center_jitter_3d=0.0, size_jitter_3d=0.0,
                   yaw_jitter_3d=0.0, tp_score=(1.0, 0.0))


@dataclass(frozen=True)
class Proposals:
    """Simulated detector output; links hold the gt index or -1 for false positives"""
    boxes2d: List[List[Box2D]]
    links2d: List[List[int]]
    boxes3d: List[Box3D]
    links3d: List[int]


@dataclass(frozen=True)
class SplitSpec:
    """One named dataset split; the split key keeps its seeds stable when
    other splits are added or removed"""
    name: str
    domain: DomainName = DomainName.SOURCE
    severity: float = 0.0
    n_scenes: int = 40

    def __post_init__(self):
        try:
            object.__setattr__(self, 'domain', DomainName(self.domain))
        except ValueError as e:
            raise ConfigError(f"splits.{self.name}.domain", str(e)) from e
        if not 0.0 <= self.severity <= 1.0:
            raise ConfigError(f"splits.{self.name}.severity", f"must lie in [0, 1], got {self.severity}")
        if self.n_scenes < 0:
            raise ConfigError(f"splits.{self.name}.n_scenes", f"must be >= 0, got {self.n_scenes}")

    @property
    def tag(self) -> DomainTag:
        return DomainTag(self.domain, self.severity)

    @property
    def key(self) -> int:
        return zlib.crc32(self.name.encode('utf-8'))

    def base_seed(self, seed: int) -> int:
        return derive_seed(seed, self.key)


# Severities put image-only depth error near the reported per-domain MAE ordering.
DEFAULT_SPLITS = (
    SplitSpec('source', DomainName.SOURCE, 0.0, 40),
    SplitSpec('rain', DomainName.RAIN, 0.7, 20),
    SplitSpec('night', DomainName.NIGHT, 0.15, 20),
    SplitSpec('geo', DomainName.GEO, 0.7, 20),
)


def build_camera_rig(cfg: SimConfig) -> List[CameraModel]:
    h, w = cfg.image_size
    K = np.array([[cfg.focal, 0.0, w / 2.0], [0.0, cfg.focal, h / 2.0], [0.0, 0.0, 1.0]])
    position = np.array([0.0, 0.0, cfg.camera_height])
    cams = []
    for k in range(cfg.n_cameras):
        phi = 2.0 * np.pi * k / cfg.n_cameras
        c, s = np.cos(phi), np.sin(phi)
        # rows: camera x (right), y (down), z (forward) in world coordinates
        R = np.array([[s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]])
        cams.append(CameraModel(K=K, R=R, t=-R @ position, image_size=(h, w)))
    return cams


def _place_boxes(cfg: SimConfig, rng: np.random.Generator) -> List[Box3D]:
    weights = np.asarray(cfg.class_weights, dtype=np.float64)
    weights = weights / weights.sum()
    n = int(rng.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
    boxes: List[Box3D] = []
    skipped = 0
    for _ in range(n):
        cls = int(rng.choice(len(CLASS_NAMES), p=weights))
        size = CLASS_SIZES[cls] * (1.0 + cfg.size_jitter * rng.uniform(-1.0, 1.0, size=3))
        yaw = wrap_angle(rng.uniform(-np.pi, np.pi))
        half_diag = 0.5 * np.hypot(size[0], size[1])
        for _attempt in range(50):
            r = rng.uniform(cfg.min_range, cfg.scene_radius - half_diag)
            phi = rng.uniform(-np.pi, np.pi)
            xy = np.array([r * np.cos(phi), r * np.sin(phi)])
            clear = all(
                np.hypot(*(xy - b.center[:2])) > half_diag + 0.5 * np.hypot(b.size[0], b.size[1])
                for b in boxes)
            if clear:
                boxes.append(Box3D(center=[xy[0], xy[1], size[2] / 2.0], size=size,
                                   yaw=yaw, class_id=cls))
                break
        else:
            skipped += 1
    if skipped:
        logger.debug(f"placed {len(boxes)} of {n} objects; {skipped} found no free spot in 50 attempts")
    return boxes


def _surface_points(box: Box3D, n: int, lidar_origin: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    """n points on the faces of box that face the sensor (bottom excluded)"""
    l, w, h = box.size
    # (axis, sign, area) for +-x, +-y, +z faces
    faces = [(0, 1.0, w * h), (0, -1.0, w * h), (1, 1.0, l * h), (1, -1.0, l * h), (2, 1.0, l * w)]
    rot = box.rotation()
    sensor_local = box.to_local(lidar_origin[None, :])[0]
    visible = [f for f in faces if f[1] * sensor_local[f[0]] > box.size[f[0]] / 2.0]
    if not visible:
        visible = faces
    areas = np.array([f[2] for f in visible])
    choice = rng.choice(len(visible), size=n, p=areas / areas.sum())
    local = rng.uniform(-0.5, 0.5, size=(n, 3)) * box.size
    for i, idx in enumerate(choice):
        axis, sign, _ = visible[idx]
        local[i, axis] = sign * box.size[axis] / 2.0
    return local @ rot.T + box.center


def generate_scene(cfg: SimConfig, seed: int, scene_id: Optional[str] = None) -> Scene:
    cfg.validate()
    rng = np.random.default_rng(seed)
    boxes = _place_boxes(cfg, rng)
    lidar_origin = np.array([0.0, 0.0, cfg.lidar_height])

    chunks = []
    for box in boxes:
        budget = int(rng.integers(cfg.rays_per_object[0], cfg.rays_per_object[1] + 1))
        if budget == 0:
            continue
        r = float(np.hypot(box.center[0], box.center[1]))
        n = max(1, int(round(budget * min(1.0, (cfg.falloff_range / r) ** 2))))
        xyz = _surface_points(box, n, lidar_origin, rng)
        xyz = xyz + rng.normal(0.0, cfg.point_noise, size=xyz.shape) if cfg.point_noise > 0 else xyz
        chunks.append(np.column_stack([xyz, rng.uniform(0.4, 1.0, size=n)]))

    m = cfg.clutter_points
    radius = cfg.scene_radius * np.sqrt(rng.uniform(0.0, 1.0, size=m))
    phi = rng.uniform(-np.pi, np.pi, size=m)
    ground = np.column_stack([radius * np.cos(phi), radius * np.sin(phi), np.zeros(m)])
    if cfg.point_noise > 0:
        ground = ground + rng.normal(0.0, cfg.point_noise, size=ground.shape)
    chunks.append(np.column_stack([ground, rng.uniform(0.0, 0.3, size=m)]))

    return Scene(
        id=scene_id if scene_id is not None else f"scene-{seed}",
        gt_boxes=boxes,
        points=np.vstack(chunks),
        cameras=build_camera_rig(cfg),
        domain=DomainTag(DomainName.SOURCE, 0.0)
    )


def rain_drop_probability(ranges: np.ndarray, severity: float,
                          params: CorruptionParams = CorruptionParams()) -> np.ndarray:
    """Closed-form dropout curve; non-decreasing in range and severity"""
    scaled = np.clip(np.asarray(ranges, dtype=np.float64) / params.rain_range_max,
                     params.rain_range_floor, 1.0)
    return severity * (1.0 - params.rain_min_survival) * scaled


def points_in_box(box: Box3D, xyz: np.ndarray, margin: float) -> np.ndarray:
    local = box.to_local(xyz)
    return np.all(np.abs(local) <= box.size / 2.0 + margin, axis=1)


def apply_domain(scene: Scene, tag: DomainTag, seed: int,
                 params: CorruptionParams = CorruptionParams()) -> Scene:
    if tag.severity == 0.0 or tag.name is DomainName.SOURCE:
        return replace(scene, domain=tag)

    rng = np.random.default_rng(seed)
    points = np.array(scene.points)
    boxes = list(scene.gt_boxes)

    if tag.name is DomainName.RAIN:
        origin = np.array([0.0, 0.0, params.lidar_height])
        offsets = points[:, :3] - origin
        ranges = np.linalg.norm(offsets, axis=1)
        keep = rng.random(len(points)) >= rain_drop_probability(ranges, tag.severity, params)
        directions = offsets / np.maximum(ranges, 1e-9)[:, None]
        jitter = rng.normal(0.0, params.rain_jitter * tag.severity, size=len(points))
        points[:, :3] += directions * jitter[:, None]
        points = points[keep]
        logger.debug(f"rain severity {tag.severity}: kept {keep.sum()}/{len(keep)} points in {scene.id}")

    elif tag.name is DomainName.GEO:
        scale = 1.0 + params.geo_size_scale * tag.severity
        resized = []
        for box in boxes:
            inside = points_in_box(box, points[:, :3], margin=0.1)
            new_size = box.size * scale
            new_center = np.array([box.center[0], box.center[1], new_size[2] / 2.0])
            local = box.to_local(points[inside, :3]) * scale
            points[inside, :3] = local @ box.rotation().T + new_center
            resized.append(Box3D(center=new_center, size=new_size, yaw=box.yaw,
                                 score=box.score, class_id=box.class_id))
        boxes = resized
        keep = rng.random(len(points)) >= params.geo_density_drop * tag.severity
        points = points[keep]

    # Night degrades the camera only; the tag drives depth-noise inflation downstream.
    return Scene(id=scene.id, gt_boxes=boxes, points=points, cameras=scene.cameras, domain=tag)


def visible_projection(cam: CameraModel, box: Box3D) -> Optional[Box2D]:
    """Projected gt box for cameras that see the box center, else None"""
    if project_point(cam, box.center) is None:
        return None
    return project_box3d(cam, box)


def _jitter_box2d(box: Box2D, scale: float, cam: CameraModel, score: float,
                  rng: np.random.Generator) -> Optional[Box2D]:
    dx = rng.normal(0.0, scale * box.width, size=2)
    dy = rng.normal(0.0, scale * box.height, size=2)
    xs = np.clip(np.sort([box.x_min + dx[0], box.x_max + dx[1]]), 0, cam.width)
    ys = np.clip(np.sort([box.y_min + dy[0], box.y_max + dy[1]]), 0, cam.height)
    if xs[1] - xs[0] < 1e-6 or ys[1] - ys[0] < 1e-6:
        return None
    return Box2D(float(xs[0]), float(ys[0]), float(xs[1]), float(ys[1]),
                 score=score, class_id=box.class_id)


def simulate_proposals(scene: Scene, noise: ProposalNoise, seed: int) -> Proposals:
    rng = np.random.default_rng(seed)
    severity = scene.domain.severity
    box_scale = noise.box2d_jitter
    if scene.domain.name is DomainName.NIGHT:
        box_scale *= 1.0 + noise.night_box2d_scale * severity
    center_sigma = noise.center_jitter_3d
    if scene.domain.name is DomainName.RAIN:
        center_sigma *= 1.0 + noise.rain_center_scale * severity

    def tp_score() -> float:
        return float(np.clip(rng.normal(*noise.tp_score), 0.01, 1.0))

    def fp_score() -> float:
        return float(rng.uniform(*noise.fp_score))

    boxes2d, links2d = [], []
    for cam in scene.cameras:
        cam_boxes, cam_links = [], []
        for gi, gt in enumerate(scene.gt_boxes):
            proj = visible_projection(cam, gt)
            if proj is None or rng.random() >= noise.recall_2d:
                continue
            jittered = _jitter_box2d(proj, box_scale, cam, tp_score(), rng)
            if jittered is not None:
                cam_boxes.append(jittered)
                cam_links.append(gi)
        for _ in range(int(rng.poisson(noise.fp_rate_2d))):
            w = rng.uniform(0.05, 0.3) * cam.width
            h = rng.uniform(0.05, 0.3) * cam.height
            cx = rng.uniform(w / 2, cam.width - w / 2)
            cy = rng.uniform(h / 2, cam.height - h / 2)
            cam_boxes.append(Box2D(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2,
                                   score=fp_score(), class_id=int(rng.integers(len(CLASS_NAMES)))))
            cam_links.append(-1)
        boxes2d.append(cam_boxes)
        links2d.append(cam_links)

    boxes3d, links3d = [], []
    for gi, gt in enumerate(scene.gt_boxes):
        if rng.random() >= noise.recall_3d:
            continue
        center = gt.center + rng.normal(0.0, center_sigma, size=3)
        size = np.maximum(gt.size * (1.0 + rng.normal(0.0, noise.size_jitter_3d, size=3)), 0.1)
        yaw = wrap_angle(gt.yaw + rng.normal(0.0, noise.yaw_jitter_3d))
        boxes3d.append(Box3D(center=center, size=size, yaw=yaw, score=tp_score(), class_id=gt.class_id))
        links3d.append(gi)
    radius = max([float(np.hypot(*b.center[:2])) for b in scene.gt_boxes] + [10.0])
    for _ in range(int(rng.poisson(noise.fp_rate_3d))):
        cls = int(rng.integers(len(CLASS_NAMES)))
        r = radius * np.sqrt(rng.uniform())
        phi = rng.uniform(-np.pi, np.pi)
        size = CLASS_SIZES[cls]
        boxes3d.append(Box3D(center=[r * np.cos(phi), r * np.sin(phi), size[2] / 2.0], size=size,
                             yaw=wrap_angle(rng.uniform(-np.pi, np.pi)), score=fp_score(),
                             class_id=cls))
        links3d.append(-1)

    return Proposals(boxes2d=boxes2d, links2d=links2d, boxes3d=boxes3d, links3d=links3d)


def generate_split(cfg: SimConfig, n_scenes: int, base_seed: int, tag: DomainTag,
                   params: CorruptionParams = CorruptionParams(), prefix: str = 'scene',
                   threads: int = 1) -> List[Scene]:
    """Generate and corrupt n_scenes; order and content do not depend on threads"""
    def work(i: int) -> Scene:
        scene = generate_scene(cfg, derive_seed(base_seed, i), scene_id=f"{prefix}-{i:05d}")
        return apply_domain(scene, tag, derive_seed(base_seed, i, 1), params)

    cfg.validate()
    if threads <= 1:
        return [work(i) for i in range(n_scenes)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(work, range(n_scenes)))


def write_dataset(scenes: Sequence[Scene], path) -> None:
    path = Path(path)
    try:
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            for scene in scenes:
                f.write(json.dumps(scene.to_dict(), separators=(',', ':')))
                f.write('\n')
    except OSError as e:
        raise DatasetError(f"cannot write dataset: {e.strerror or e}", path=str(path)) from e
    logger.debug(f"wrote {len(scenes)} scenes to {path}")


def read_dataset(path) -> List[Scene]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DatasetError(f"cannot read dataset: {e.strerror or e}", path=str(path)) from e

    scenes = []
    offset = 0
    for lineno, line in enumerate(raw.split(b'\n'), start=1):
        if line.strip():
            try:
                scenes.append(Scene.from_dict(json.loads(line.decode('utf-8'))))
            except json.JSONDecodeError as e:
                raise DatasetError(f"malformed JSON: {e.msg}", path=str(path),
                                   line=lineno, offset=offset + e.pos) from e
            except (UnicodeDecodeError, KeyError, TypeError, ValueError, ConfigError, GeometryError) as e:
                raise DatasetError(f"invalid scene record: {e!r}", path=str(path),
                                   line=lineno, offset=offset) from e
        offset += len(line) + 1
    return scenes
