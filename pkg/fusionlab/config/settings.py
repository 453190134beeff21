import dataclasses
import json
import os
import typing
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from ..core.errors import ConfigError, FusionLabError
from ..core.evalkit import EvalConfig
from ..core.masking import GridParams, MaskPolicy
from ..core.pipeline import DepthConfig, TrainConfig
from ..core.scenesim import DEFAULT_SPLITS, CorruptionParams, ProposalNoise, SimConfig, SplitSpec

CONFIG_VERSION = "ccf-experiment-v1"
THREADS_ENV = "CCF_THREADS"

SECTIONS = {
    'sim': SimConfig,
    'noise': ProposalNoise,
    'corruption': CorruptionParams,
    'depth': DepthConfig,
    'train': TrainConfig,
    'eval': EvalConfig,
}


@dataclasses.dataclass(frozen=True)
class Paths:
    dataset: Path = Path('data')
    out: Path = Path('out')
    weights: Optional[Path] = None
    confidence: Optional[Path] = None

    def resolved(self, base: Path) -> 'Paths':
        def fix(p):
            if p is None:
                return None
            p = Path(p)
            return p if p.is_absolute() else (base / p)
        return Paths(dataset=fix(self.dataset), out=fix(self.out),
                     weights=fix(self.weights), confidence=fix(self.confidence))


def _check_value(path: str, value: Any, hint) -> Any:
    """Coerce a JSON value to a dataclass field type or raise ConfigError"""
    origin = getattr(hint, '__origin__', None)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if origin in (tuple, typing.Tuple):
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        args = getattr(hint, '__args__', ())
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_check_value(f"{path}[{i}]", v, args[0]) for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(path, f"expected {len(args)} values, got {len(value)}")
        return tuple(_check_value(f"{path}[{i}]", v, a) for i, (v, a) in enumerate(zip(value, args)))
    return value


def build_section(cls, data: Any, section: str):
    """Instantiate a config dataclass from a JSON object, rejecting unknown keys"""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(section, f"expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{section}.{key}", "unknown key")
    kwargs = {k: _check_value(f"{section}.{k}", v, hints[k]) for k, v in data.items()}
    try:
        obj = cls(**kwargs)
        return obj.validate() if hasattr(obj, 'validate') else obj
    except ConfigError:
        raise
    except (FusionLabError, TypeError, ValueError) as e:
        raise ConfigError(section, str(e)) from e


def _mask_policy(data: Any) -> MaskPolicy:
    if data is None:
        return MaskPolicy()
    if not isinstance(data, dict):
        raise ConfigError("mask", "expected an object")
    data = dict(data)
    grid = build_section(GridParams, data.pop('grid', None), "mask.grid")
    if 'kind' in data and not isinstance(data['kind'], str):
        raise ConfigError("mask.kind", f"expected a string, got {data['kind']!r}")
    known = {'kind', 'p_max', 'curriculum', 'invert'}
    for key in data:
        if key not in known:
            raise ConfigError(f"mask.{key}", "unknown key")
    hints = typing.get_type_hints(MaskPolicy)
    kwargs = {k: (v if k == 'kind' else _check_value(f"mask.{k}", v, hints[k])) for k, v in data.items()}
    try:
        return MaskPolicy(grid=grid, **kwargs)
    except (FusionLabError, TypeError, ValueError) as e:
        raise ConfigError("mask", str(e)) from e


def _splits(data: Any) -> Tuple[SplitSpec, ...]:
    if data is None:
        return DEFAULT_SPLITS
    if not isinstance(data, list):
        raise ConfigError("splits", "expected a list of split objects")
    specs = []
    for i, entry in enumerate(data):
        specs.append(build_section(SplitSpec, entry, f"splits[{i}]"))
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError("splits", f"duplicate split names in {names}")
    return tuple(specs)


def threads_from_env() -> int:
    raw = os.environ.get(THREADS_ENV, '1')
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(THREADS_ENV, f"expected a positive integer, got {raw!r}")
    if threads < 1:
        raise ConfigError(THREADS_ENV, f"expected a positive integer, got {raw!r}")
    return threads


class Config:
    def __init__(self, seed: int = 0, base_dir: Optional[Path] = None):
        self.debug = False
        self.debug_messages: List[Tuple[str, str]] = []
        self.max_debug_messages = 100
        self.config_file: Optional[Path] = None
        self.base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
        self.seed = seed
        self.paths = Paths().resolved(self.base_dir)
        self.sim = SimConfig()
        self.noise = ProposalNoise()
        self.corruption = CorruptionParams()
        self.depth = DepthConfig()
        self.mask = MaskPolicy()
        self.train = TrainConfig()
        self.eval = EvalConfig()
        self.splits: Tuple[SplitSpec, ...] = DEFAULT_SPLITS
        self.threads = threads_from_env()

    @classmethod
    def from_file(cls, path) -> 'Config':
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding='utf-8'))
        except OSError as e:
            raise ConfigError("config", f"cannot read {path}: {e.strerror or e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError("config", f"{path}: malformed JSON at line {e.lineno}: {e.msg}") from e
        config = cls.from_dict(data, base_dir=path.resolve().parent)
        config.config_file = path
        return config

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base_dir: Optional[Path] = None) -> 'Config':
        if not isinstance(data, dict):
            raise ConfigError("config", "top level must be a JSON object")
        known = {'version', 'seed', 'paths', 'splits', 'mask', 'debug'} | set(SECTIONS)
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown key")
        if data.get('version') != CONFIG_VERSION:
            raise ConfigError("version", f"expected {CONFIG_VERSION!r}, got {data.get('version')!r}")
        if 'seed' not in data:
            raise ConfigError("seed", "a seed is required")
        seed = _check_value("seed", data['seed'], int)

        config = cls(seed=seed, base_dir=base_dir)
        config.debug = _check_value("debug", data.get('debug', False), bool)
        paths = data.get('paths') or {}
        if not isinstance(paths, dict):
            raise ConfigError("paths", "expected an object")
        for key, value in paths.items():
            if key not in {'dataset', 'out', 'weights', 'confidence'}:
                raise ConfigError(f"paths.{key}", "unknown key")
            if value is not None and not isinstance(value, str):
                raise ConfigError(f"paths.{key}", f"expected a path string, got {value!r}")
        config.paths = Paths(**{k: Path(v) if v is not None else None for k, v in paths.items()}) \
            .resolved(config.base_dir)
        for name, cls_ in SECTIONS.items():
            setattr(config, name, build_section(cls_, data.get(name), name))
        config.mask = _mask_policy(data.get('mask'))
        config.splits = _splits(data.get('splits'))
        if config.train.split not in {s.name for s in config.splits}:
            raise ConfigError("train.split", f"no split named {config.train.split!r}")
        return config

    def split(self, name: str) -> SplitSpec:
        for s in self.splits:
            if s.name == name:
                return s
        raise ConfigError("splits", f"no split named {name!r}")

    def select_splits(self, names: Optional[List[str]]) -> Tuple[SplitSpec, ...]:
        if not names:
            return self.splits
        return tuple(self.split(n) for n in names)

    def add_debug_message(self, message: str):
        """Add a debug message to the history"""
        timestamp = datetime.now().strftime("%H:%M:%S")
        self.debug_messages.append((timestamp, message))
        if len(self.debug_messages) > self.max_debug_messages:
            self.debug_messages.pop(0)
