from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from scipy.interpolate import CubicSpline

import config
from core.errors import ClusteringError, ValidationError
from core.safety_filter import BarrierSpec
from core.trajectory import Path, RunConfig, make_rng
from core.vector_fields import FlowField, GmmMarginalField, GmmTarget, OtConditionalField

logger = logging.getLogger(__name__)

CONTROL_FRACTIONS = (0.25, 0.5, 0.75)
STD_FLOOR = 1e-6
ZETA_SPACING_MULTIPLE = 4.0


@dataclass(frozen=True)
class Region:
    center: Tuple[float, float]
    radius: float

    def __post_init__(self):
        object.__setattr__(self, 'center', tuple(float(c) for c in self.center))
        if not self.radius > 0:
            raise ValidationError(f"Region radius must be positive, got {self.radius}")

    def contains(self, point, slack: float = 0.0) -> bool:
        return float(np.linalg.norm(np.asarray(point, dtype=float) - np.asarray(self.center))) <= self.radius + slack

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform draw from the disc."""
        angle = rng.uniform(0.0, 2.0 * np.pi)
        radius = self.radius * np.sqrt(rng.uniform(0.0, 1.0))
        return np.asarray(self.center) + radius * np.array([np.cos(angle), np.sin(angle)])

    def probe_points(self, rings: int = 8, angles: int = 64) -> np.ndarray:
        """Dense polar grid over the closed disc, shape (2, n)."""
        radii = self.radius * np.linspace(0.0, 1.0, rings + 1)
        theta = np.linspace(0.0, 2.0 * np.pi, angles, endpoint=False)
        rr, tt = np.meshgrid(radii, theta)
        return np.vstack([self.center[0] + (rr * np.cos(tt)).ravel(),
                          self.center[1] + (rr * np.sin(tt)).ravel()])

    def to_dict(self) -> Dict[str, Any]:
        return {'center': list(self.center), 'radius': self.radius}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> Region:
        return cls(center=tuple(data['center']), radius=float(data['radius']))


@dataclass(frozen=True)
class Environment:
    """A planar planning problem: box bounds, up to two barriers, start and goal discs."""
    name: str
    bounds: Tuple[Tuple[float, float], Tuple[float, float]]
    barriers: Tuple[BarrierSpec, ...]
    start: Region
    goal: Region
    H: int = config.HORIZON
    # std of the interior control-point offsets, across the start-goal line
    smoothness: float = 0.3
    jitter_scale: float = 0.25
    margin: float = config.DELTA

    def __post_init__(self):
        object.__setattr__(self, 'bounds', tuple(tuple(float(v) for v in axis) for axis in self.bounds))
        object.__setattr__(self, 'barriers', tuple(self.barriers))
        validate_layout(self)

    @property
    def d(self) -> int:
        return 2

    def to_dict(self) -> Dict[str, Any]:
        return {
            'name': self.name,
            'bounds': [list(axis) for axis in self.bounds],
            'barriers': [spec.to_dict() for spec in self.barriers],
            'start': self.start.to_dict(),
            'goal': self.goal.to_dict(),
            'H': self.H,
            'smoothness': self.smoothness,
            'jitter_scale': self.jitter_scale,
            'margin': self.margin,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> Environment:
        return cls(
            name=data['name'],
            bounds=tuple(tuple(axis) for axis in data['bounds']),
            barriers=tuple(BarrierSpec.from_dict(b) for b in data.get('barriers', [])),
            start=Region.from_dict(data['start']),
            goal=Region.from_dict(data['goal']),
            H=int(data.get('H', config.HORIZON)),
            smoothness=float(data.get('smoothness', 0.3)),
            jitter_scale=float(data.get('jitter_scale', 0.25)),
            margin=float(data.get('margin', config.DELTA)),
        )


def validate_layout(env: Environment) -> None:
    if len(env.barriers) > 2:
        raise ValidationError(f"Environment '{env.name}' has {len(env.barriers)} barriers; at most 2 are supported")
    if env.H < 1:
        raise ValidationError(f"Environment '{env.name}' needs H >= 1, got {env.H}")
    (x_lo, x_hi), (y_lo, y_hi) = env.bounds
    if not (x_lo < x_hi and y_lo < y_hi):
        raise ValidationError(f"Degenerate bounds {env.bounds}")
    for label, region in (('start', env.start), ('goal', env.goal)):
        cx, cy = region.center
        if not (x_lo < cx - region.radius and cx + region.radius < x_hi
                and y_lo < cy - region.radius and cy + region.radius < y_hi):
            raise ValidationError(f"The {label} region of '{env.name}' is not strictly inside the bounds")
        probes = region.probe_points()
        for spec in env.barriers:
            b, _ = spec.evaluate(probes)
            if np.min(b) < env.margin:
                raise ValidationError(f"The {label} region of '{env.name}' intersects the "
                                      f"{env.margin}-inflated unsafe set of barrier '{spec.name or spec.kind}'")


def corridor_environment(H: int = config.HORIZON) -> Environment:
    """Two obstacles with a diagonal corridor between them; data paths run through the corridor."""
    return Environment(
        name='corridor',
        bounds=((0.0, 8.0), (0.0, 8.0)),
        barriers=(
            BarrierSpec(kind='ellipse', center=(3.0, 4.0), axes=(0.8, 0.8), name='BS1'),
            BarrierSpec(kind='quartic', center=(5.5, 2.5), axes=(0.9, 0.9), name='BS2'),
        ),
        start=Region(center=(2.6, 0.8), radius=0.4),
        goal=Region(center=(5.9, 6.2), radius=0.6),
        H=H,
    )


def open_environment(H: int = config.HORIZON) -> Environment:
    """The corridor layout without obstacles."""
    corridor = corridor_environment(H)
    return Environment(name='open', bounds=corridor.bounds, barriers=(), start=corridor.start,
                       goal=corridor.goal, H=H)


def roof_environment(H: int = config.HORIZON) -> Environment:
    """Synthetic (z, v_z) head trajectories under the speed-dependent roof z + phi v_z <= h_r."""
    return Environment(
        name='roof',
        bounds=((-1.0, 2.0), (-2.5, 2.5)),
        barriers=(BarrierSpec(kind='halfspace_velocity', roof_height=1.0, velocity_scale=0.1,
                              indices=(0, 1), name='roof'),),
        start=Region(center=(0.2, -1.0), radius=0.1),
        goal=Region(center=(0.6, 1.0), radius=0.1),
        H=H,
        smoothness=0.35,
    )


BUILTIN_ENVIRONMENTS = {
    'corridor': corridor_environment,
    'open': open_environment,
    'roof': roof_environment,
}


def get_environment(name: str, H: int = config.HORIZON) -> Environment:
    if name not in BUILTIN_ENVIRONMENTS:
        raise ValidationError(f"Unknown environment '{name}', expected one of {sorted(BUILTIN_ENVIRONMENTS)}")
    return BUILTIN_ENVIRONMENTS[name](H)


@dataclass
class PathDataset:
    paths: List[Path]
    seed: Optional[int] = None
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.paths:
            raise ValidationError("A dataset needs at least one path")

    def __len__(self):
        return len(self.paths)

    def as_array(self) -> np.ndarray:
        return np.array([p.data for p in self.paths])

    def to_dict(self) -> Dict[str, Any]:
        return {
            'seed': self.seed,
            'params': self.params,
            'paths': [p.to_dict() for p in self.paths],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> PathDataset:
        return cls(paths=[Path.from_dict(p) for p in data['paths']], seed=data.get('seed'),
                   params=dict(data.get('params', {})))

    def __eq__(self, other) -> bool:
        if not isinstance(other, PathDataset):
            return NotImplemented
        return self.seed == other.seed and self.params == other.params and self.paths == other.paths


def smooth_curve(start: np.ndarray, goal: np.ndarray, controls: np.ndarray, H: int) -> np.ndarray:
    """Cubic spline through start, the interior control points and goal, sampled at H+1 waypoints."""
    knots = np.array([0.0, *CONTROL_FRACTIONS, 1.0])
    points = np.vstack([start, controls, goal])
    spline = CubicSpline(knots, points, axis=0)
    return spline(np.linspace(0.0, 1.0, H + 1))


def generate_path(env: Environment, rng: np.random.Generator, jitter_scale: Optional[float] = None) -> Path:
    jitter_scale = env.jitter_scale if jitter_scale is None else jitter_scale
    start = env.start.sample(rng)
    goal = env.goal.sample(rng)
    direction = goal - start
    length = float(np.linalg.norm(direction))
    if length == 0.0:
        raise ValidationError(f"Start and goal coincide in '{env.name}'")
    normal = np.array([-direction[1], direction[0]]) / length
    offsets = rng.normal(0.0, env.smoothness, size=len(CONTROL_FRACTIONS))
    controls = np.array([start + s * direction + o * normal for s, o in zip(CONTROL_FRACTIONS, offsets)])
    waypoints = smooth_curve(start, goal, controls, env.H)
    spacing = np.mean(np.linalg.norm(np.diff(waypoints, axis=0), axis=1))
    jitter = rng.normal(0.0, jitter_scale * spacing, size=waypoints.shape)
    # endpoints stay inside their regions
    jitter[0] = 0.0
    jitter[-1] = 0.0
    return Path.from_waypoints(waypoints + jitter)


def generate_dataset(env: Environment, n_paths: int, rng: np.random.Generator,
                     seed: Optional[int] = None, jitter_scale: Optional[float] = None) -> PathDataset:
    """Unfiltered smooth start-to-goal paths; some graze the obstacles."""
    if n_paths < 1:
        raise ValidationError(f"n_paths must be >= 1, got {n_paths}")
    paths = [generate_path(env, rng, jitter_scale) for _ in range(n_paths)]
    params = {
        'environment': env.name,
        'H': env.H,
        'n_paths': n_paths,
        'smoothness': env.smoothness,
        'jitter_scale': env.jitter_scale if jitter_scale is None else jitter_scale,
    }
    logger.info(f"Generated {n_paths} paths for '{env.name}' (H={env.H})")
    return PathDataset(paths=paths, seed=seed, params=params)


def fit_gmm_target(dataset: PathDataset, K: int = config.GMM_COMPONENTS, iterations: int = 50,
                   rng: Optional[np.random.Generator] = None) -> GmmTarget:
    """K-means on flattened paths; shared isotropic std is the RMS within-cluster deviation."""
    rng = rng if rng is not None else make_rng(dataset.seed or 0)
    data = dataset.as_array()
    shape = data.shape[1:]
    X = data.reshape(len(data), -1)
    distinct = len(np.unique(X, axis=0))
    if distinct < K:
        logger.warning(f"Only {distinct} distinct paths; fitting {distinct} component(s) instead of {K}")
        K = distinct
    if len(X) < K:
        raise ClusteringError(f"Need at least {K} paths for {K} components, got {len(X)}")

    centers = X[rng.choice(len(X), size=K, replace=False)].copy()
    reseeded = set()
    for _ in range(iterations):
        distances = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        labels = np.argmin(distances, axis=1)
        for j in range(K):
            members = X[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
                continue
            if j in reseeded:
                raise ClusteringError(f"Cluster {j} emptied again after re-seeding")
            reseeded.add(j)
            farthest = int(np.argmax(distances[np.arange(len(X)), labels]))
            logger.warning(f"Cluster {j} is empty; re-seeding it at path {farthest}")
            centers[j] = X[farthest]

    distances = np.sum((X[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    labels = np.argmin(distances, axis=1)
    counts = np.bincount(labels, minlength=K)
    if np.any(counts == 0):
        raise ClusteringError("K-means finished with an empty cluster")
    for j in range(K):
        centers[j] = X[labels == j].mean(axis=0)
    std = max(float(np.sqrt(np.mean((X - centers[labels]) ** 2))), STD_FLOOR)
    return GmmTarget(weights=counts / counts.sum(), means=centers.reshape((K,) + shape),
                     stds=np.full(K, std))


def median_spacing(dataset: PathDataset) -> float:
    data = dataset.as_array()
    segments = np.linalg.norm(np.diff(data, axis=2), axis=1)
    return float(np.median(segments))


def default_zeta(dataset: PathDataset) -> float:
    return ZETA_SPACING_MULTIPLE * median_spacing(dataset)


@lru_cache(maxsize=16)
def surrogate_data(env: Environment, n_paths: int, seed: int, K: int) -> Tuple[PathDataset, GmmTarget]:
    """The seeded dataset and its fitted mixture, shared by every run on the same environment."""
    dataset = generate_dataset(env, n_paths, make_rng(seed), seed=seed)
    return dataset, fit_gmm_target(dataset, K, rng=make_rng(seed))


def trap_threshold(run_config: RunConfig, env: Environment) -> float:
    if run_config.cbf.zeta is not None:
        return run_config.cbf.zeta
    dataset, _ = surrogate_data(env, run_config.dataset_size, run_config.dataset_seed, run_config.gmm_components)
    return default_zeta(dataset)


def build_field(run_config: RunConfig, env: Environment) -> FlowField:
    if env.H != run_config.H or env.d != run_config.d:
        raise ValidationError(f"Environment '{env.name}' plans {env.d} x {env.H + 1} paths, "
                              f"config asks for {run_config.d} x {run_config.H + 1}")
    if run_config.field == 'mlp':
        from core.artifact_store import ArtifactStore
        return ArtifactStore().load_checkpoint(run_config.checkpoint)
    _, gmm = surrogate_data(env, run_config.dataset_size, run_config.dataset_seed, run_config.gmm_components)
    if run_config.field == 'ot':
        return OtConditionalField(gmm.component_mean(int(np.argmax(gmm.weights))))
    return GmmMarginalField(gmm)
