from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Tuple

import numpy as np
from typing_extensions import Self

from .errors import ConfigError, GeometryError

ORTHO_TOL = 1e-9


def wrap_angle(theta: float) -> float:
    """Map an angle onto (-pi, pi]"""
    wrapped = float(np.arctan2(np.sin(theta), np.cos(theta)))
    if wrapped <= -np.pi:
        wrapped = np.pi
    return wrapped


def _frozen_array(values, shape: Tuple[int, ...], name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise GeometryError(f"{name} must be finite")
    arr.setflags(write=False)
    return arr


class DomainName(str, Enum):
    SOURCE = "Source"
    RAIN = "Rain"
    NIGHT = "Night"
    GEO = "Geo"


class QueryOrigin(str, Enum):
    FROM_2D = "From2D"
    FROM_3D = "From3D"
    FUSED = "Fused"


class PassKind(str, Enum):
    TWO_D_ONLY = "2d"
    THREE_D_ONLY = "3d"
    FUSED = "fused"


@dataclass(frozen=True)
class DomainTag:
    name: DomainName = DomainName.SOURCE
    severity: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, 'name', DomainName(self.name))
        if not 0.0 <= self.severity <= 1.0:
            raise ConfigError("severity", f"must lie in [0, 1], got {self.severity}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> Self:
        return cls(name=DomainName(data['name']), severity=float(data['severity']))

    def to_dict(self) -> Dict[str, Any]:
        return {'name': self.name.value, 'severity': self.severity}


@dataclass(frozen=True)
class Box2D:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    score: float = 1.0
    class_id: int = 0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError(
                f"degenerate 2D box ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})")
        if not 0.0 <= self.score <= 1.0:
            raise GeometryError(f"score must lie in [0, 1], got {self.score}")

    @property
    def center(self) -> np.ndarray:
        return np.array([(self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0])

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def iou(self, other: 'Box2D') -> float:
        ix = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        iy = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        if ix <= 0 or iy <= 0:
            return 0.0
        inter = ix * iy
        return inter / (self.area + other.area - inter)


@dataclass(frozen=True, eq=False)
class Box3D:
    """7-DoF box in the world frame: center, (l, w, h) and yaw about +z"""
    center: np.ndarray
    size: np.ndarray
    yaw: float = 0.0
    score: float = 1.0
    class_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'center', _frozen_array(self.center, (3,), 'center'))
        object.__setattr__(self, 'size', _frozen_array(self.size, (3,), 'size'))
        object.__setattr__(self, 'yaw', float(self.yaw))
        if np.any(self.size <= 0):
            raise GeometryError(f"box sizes must be positive, got {self.size.tolist()}")
        if not -np.pi < self.yaw <= np.pi:
            raise GeometryError(f"yaw must lie in (-pi, pi], got {self.yaw}")
        if not 0.0 <= self.score <= 1.0:
            raise GeometryError(f"score must lie in [0, 1], got {self.score}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Box3D):
            return NotImplemented
        return (np.array_equal(self.center, other.center)
                and np.array_equal(self.size, other.size)
                and self.yaw == other.yaw
                and self.score == other.score
                and self.class_id == other.class_id)

    __hash__ = None

    def rotation(self) -> np.ndarray:
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def corners(self) -> np.ndarray:
        """The 8 corners as an (8, 3) array"""
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
                         dtype=np.float64)
        local = signs * (self.size / 2.0)
        return local @ self.rotation().T + self.center

    def to_local(self, points: np.ndarray) -> np.ndarray:
        """Express world points (N, 3) in the box frame"""
        return (np.asarray(points, dtype=np.float64) - self.center) @ self.rotation()

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> Self:
        return cls(
            center=data['c'],
            size=data['s'],
            yaw=data['yaw'],
            class_id=int(data['cls'])
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            'c': self.center.tolist(),
            's': self.size.tolist(),
            'yaw': self.yaw,
            'cls': self.class_id
        }


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera; R, t map world to camera (z forward, x right, y down)"""
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    image_size: Tuple[int, int]

    def __post_init__(self):
        K = _frozen_array(self.K, (3, 3), 'K')
        R = _frozen_array(self.R, (3, 3), 'R')
        object.__setattr__(self, 'K', K)
        object.__setattr__(self, 'R', R)
        object.__setattr__(self, 't', _frozen_array(self.t, (3,), 't'))
        h, w = (int(v) for v in self.image_size)
        object.__setattr__(self, 'image_size', (h, w))
        if h <= 0 or w <= 0:
            raise GeometryError(f"image size must be positive, got {(h, w)}")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[2, 2] != 1:
            raise GeometryError("K must be upper-triangular with K[2,2] = 1")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise GeometryError("focal lengths must be positive")
        if np.max(np.abs(R @ R.T - np.eye(3))) > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise GeometryError("R must be a proper rotation")

    def __eq__(self, other) -> bool:
        if not isinstance(other, CameraModel):
            return NotImplemented
        return (np.array_equal(self.K, other.K) and np.array_equal(self.R, other.R)
                and np.array_equal(self.t, other.t) and self.image_size == other.image_size)

    __hash__ = None

    @property
    def height(self) -> int:
        return self.image_size[0]

    @property
    def width(self) -> int:
        return self.image_size[1]

    @property
    def position(self) -> np.ndarray:
        """Camera center in the world frame"""
        return -self.R.T @ self.t

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> Self:
        return cls(
            K=np.reshape(data['K'], (3, 3)),
            R=np.reshape(data['R'], (3, 3)),
            t=data['t'],
            image_size=tuple(data['hw'])
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            'K': self.K.ravel().tolist(),
            'R': self.R.ravel().tolist(),
            't': self.t.tolist(),
            'hw': [self.height, self.width]
        }


@dataclass(frozen=True, eq=False)
class Scene:
    id: str
    gt_boxes: List[Box3D]
    points: np.ndarray  # (N, 4): x, y, z, intensity
    cameras: List[CameraModel]
    domain: DomainTag = field(default_factory=DomainTag)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 4)
        pts.setflags(write=False)
        object.__setattr__(self, 'points', pts)
        object.__setattr__(self, 'gt_boxes', list(self.gt_boxes))
        object.__setattr__(self, 'cameras', list(self.cameras))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.id == other.id and self.gt_boxes == other.gt_boxes
                and np.array_equal(self.points, other.points)
                and self.cameras == other.cameras and self.domain == other.domain)

    __hash__ = None

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> Self:
        return cls(
            id=data['id'],
            domain=DomainTag.from_dict(data['domain']),
            gt_boxes=[Box3D.from_dict(b) for b in data['gt']],
            points=np.array(data['pts'], dtype=np.float64).reshape(-1, 4),
            cameras=[CameraModel.from_dict(c) for c in data['cams']]
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            'id': self.id,
            'domain': self.domain.to_dict(),
            'gt': [b.to_dict() for b in self.gt_boxes],
            'pts': self.points.tolist(),
            'cams': [c.to_dict() for c in self.cameras]
        }


@dataclass(frozen=True)
class Detection:
    box: Box3D
    score: float
    class_id: int
    origin: QueryOrigin = QueryOrigin.FUSED

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise GeometryError(f"score must lie in [0, 1], got {self.score}")
