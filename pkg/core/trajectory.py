from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict, field, replace
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

import config
from core.errors import ValidationError
from core.safety_filter import CbfParams


@dataclass(frozen=True, eq=False)
class Path:
    """A stacked path of H+1 waypoints in d dimensions, stored as a d x (H+1) matrix.

    Column k is waypoint k. The underlying array is read-only, so a Path can be
    shared between threads without copying.
    """
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=float, copy=True)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValidationError(f"Path data must be a non-empty d x (H+1) matrix, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("Path contains non-finite entries")
        data.flags.writeable = False
        object.__setattr__(self, 'data', data)

    @property
    def d(self) -> int:
        return self.data.shape[0]

    @property
    def H(self) -> int:
        return self.data.shape[1] - 1

    @property
    def shape(self):
        return self.data.shape

    def waypoint(self, k: int) -> np.ndarray:
        return self.data[:, k]

    @classmethod
    def from_waypoints(cls, points) -> Path:
        return cls(np.asarray(points, dtype=float).T)

    def __add__(self, other: Path) -> Path:
        return Path(self.data + _as_array(other))

    def __sub__(self, other: Path) -> Path:
        return Path(self.data - _as_array(other))

    def __mul__(self, scale: float) -> Path:
        return Path(self.data * float(scale))

    __rmul__ = __mul__

    def __eq__(self, other) -> bool:
        if not isinstance(other, Path):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)

    def __hash__(self):
        return hash((self.data.shape, self.data.tobytes()))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'd': self.d,
            'H': self.H,
            'data': [[float(x) for x in column] for column in self.data.T],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> Path:
        d = int(data['d'])
        H = int(data['H'])
        points = np.asarray(data['data'], dtype=float)
        if points.shape != (H + 1, d):
            raise ValidationError(f"Path payload has shape {points.shape}, expected {(H + 1, d)}")
        return cls(points.T)

    def to_csv_rows(self) -> List[List[str]]:
        header = ['k'] + [f"x{i + 1}" for i in range(self.d)]
        rows = [header]
        for k in range(self.H + 1):
            rows.append([str(k)] + [repr(float(x)) for x in self.data[:, k]])
        return rows

    @classmethod
    def from_csv_rows(cls, rows: Sequence[Sequence[str]]) -> Path:
        header, body = rows[0], rows[1:]
        d = len(header) - 1
        points = np.array([[float(x) for x in row[1:1 + d]] for row in body], dtype=float)
        return cls(points.reshape(len(body), d).T)


def _as_array(value) -> np.ndarray:
    return value.data if isinstance(value, Path) else np.asarray(value, dtype=float)


@dataclass(frozen=True)
class TimeGrid:
    times: tuple

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        if len(times) < 2:
            raise ValidationError("A time grid needs at least two points")
        if times[0] != 0.0 or times[-1] != 1.0:
            raise ValidationError(f"A time grid must run from 0 to 1, got [{times[0]}, {times[-1]}]")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValidationError("Time grid points must be strictly increasing")
        object.__setattr__(self, 'times', times)

    @property
    def T(self) -> int:
        return len(self.times) - 1

    def steps(self) -> np.ndarray:
        return np.diff(np.asarray(self.times))

    def __iter__(self):
        """Yields (i, t_i, dt_i) for the T Euler steps."""
        for i in range(self.T):
            yield i, self.times[i], self.times[i + 1] - self.times[i]


def uniform_grid(T: int) -> TimeGrid:
    if int(T) != T or T < 1:
        raise ValidationError(f"Step count must be a positive integer, got {T}")
    T = int(T)
    return TimeGrid(tuple(i / T for i in range(T + 1)))


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based PCG64 stream keyed by the seed; identical seeds give identical streams."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def spawn_rngs(seed: int, count: int) -> List[np.random.Generator]:
    children = np.random.SeedSequence(int(seed)).spawn(count)
    return [np.random.Generator(np.random.PCG64(child)) for child in children]


def sample_prior(d: int, H: int, rng: np.random.Generator) -> Path:
    return Path(rng.standard_normal((d, H + 1)))


METHODS = ('fm_unsafe', 'safe_fm_naive', 'safeflowmatcher')
FIELDS = ('ot', 'gmm', 'mlp')


@dataclass(frozen=True)
class RunConfig:
    seed: int = config.SEED
    d: int = config.DIMENSION
    H: int = config.HORIZON
    T_pred: int = config.T_PRED
    T_corr: int = config.T_CORR
    alpha: float = config.ALPHA
    cbf: CbfParams = field(default_factory=CbfParams)
    field: str = config.FIELD
    environment: str = config.ENVIRONMENT
    method: str = 'safeflowmatcher'
    safety: bool = True
    checkpoint: Optional[str] = None
    dataset_size: int = config.DATASET_SIZE
    dataset_seed: int = config.DATASET_SEED
    gmm_components: int = config.GMM_COMPONENTS
    record_timing: bool = False

    def __post_init__(self):
        if self.d < 1 or self.H < 0:
            raise ValidationError(f"Invalid path shape d={self.d}, H={self.H}")
        if self.T_pred < 1 or self.T_corr < 1:
            raise ValidationError(f"T_pred and T_corr must be >= 1, got {self.T_pred}, {self.T_corr}")
        if not self.alpha >= 1.0:
            raise ValidationError(f"alpha must be >= 1, got {self.alpha}")
        if self.method not in METHODS:
            raise ValidationError(f"Unknown method '{self.method}', expected one of {METHODS}")
        if self.field not in FIELDS:
            raise ValidationError(f"Unknown field '{self.field}', expected one of {FIELDS}")
        if self.field == 'mlp' and not self.checkpoint:
            raise ValidationError("The mlp field needs a checkpoint path")
        if self.dataset_size < self.gmm_components:
            raise ValidationError("dataset_size must be at least gmm_components")

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d['cbf'] = self.cbf.to_dict()
        return d

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> RunConfig:
        data = dict(data)
        data.pop('schema_version', None)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"Unknown config keys: {sorted(unknown)}")
        if 'cbf' in data and not isinstance(data['cbf'], CbfParams):
            data['cbf'] = CbfParams.from_dict(data['cbf'])
        return cls(**data)

    def with_overrides(self, **overrides) -> RunConfig:
        overrides = {k: v for k, v in overrides.items() if v is not None}
        cbf_overrides = {k: overrides.pop(k) for k in list(overrides) if k in CbfParams.__dataclass_fields__}
        if cbf_overrides:
            overrides['cbf'] = replace(self.cbf, **cbf_overrides)
        return replace(self, **overrides)

    def config_hash(self) -> str:
        payload = self.to_dict()
        payload.pop('seed')
        payload.pop('record_timing')
        canonical = json.dumps(payload, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:16]
