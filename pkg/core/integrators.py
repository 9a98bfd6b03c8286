"""Euler flow integration, the prediction phase, time-scaled correction and the full planner."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import IntegrationError, SafeFlowError, SingularityError, ValidationError
from core.safety_filter import BarrierSpec, SafetyFilter
from core.trajectory import Path, RunConfig, TimeGrid, make_rng, sample_prior, uniform_grid
from core.vector_fields import T_MAX, FlowField

if TYPE_CHECKING:
    from core.environment import Environment
    from core.metrics import RunRecord

logger = logging.getLogger(__name__)


class CountingField(FlowField):
    """Counts every evaluation of the wrapped field, including posterior-mean calls."""

    def __init__(self, base: FlowField):
        self.base = base
        self.ot_form = base.ot_form
        self.evaluations = 0

    def velocity(self, x, t):
        self.evaluations += 1
        return self.base.velocity(x, t)

    def posterior_mean(self, x, t):
        self.evaluations += 1
        return self.base.posterior_mean(x, t)


class TimeScaledField(FlowField):
    """alpha * (1 - t) * v_t(tau), the vanishing time-scaled field.

    For OT-form fields v = (E[tau_1 | tau] - tau) / (1 - t), so the (1 - t)
    factor cancels and the field is alpha * (E[tau_1 | tau] - tau), finite at
    t = 1. Other fields are evaluated at min(t, 1 - 1e-9).
    """

    def __init__(self, base: FlowField, alpha: float):
        self.base = base
        self.alpha = float(alpha)

    def velocity(self, x, t):
        if self.base.ot_form:
            return self.alpha * (self.base.posterior_mean(x, t) - x)
        t = min(t, T_MAX)
        return self.alpha * (1.0 - t) * self.base.velocity(x, t)


def vtfd_field(field: FlowField, alpha: float) -> TimeScaledField:
    if not alpha >= 1.0:
        raise ValidationError(f"alpha must be >= 1, got {alpha}")
    return TimeScaledField(field, alpha)


def path_shape_of(field: FlowField) -> Tuple[int, int]:
    base = field
    while hasattr(base, 'base'):
        base = base.base
    if hasattr(base, 'gmm'):
        return base.gmm.path_shape
    if hasattr(base, 'target'):
        return base.target.shape
    if getattr(base, 'path_shape', None):
        return tuple(base.path_shape)
    raise ValidationError(f"Cannot infer the path shape of {type(base).__name__}; pass it explicitly")


def _field_step(field: FlowField, x: np.ndarray, t: float, step: int, phase: str) -> np.ndarray:
    try:
        v = field.velocity(x, t)
    except SingularityError as e:
        raise IntegrationError(str(e), step=step, phase=phase) from e
    if not np.all(np.isfinite(v)):
        raise IntegrationError("non-finite field value", step=step, phase=phase)
    return v


def euler_integrate(field: FlowField, grid: TimeGrid, start: Path, phase: str = 'euler',
                    norms: Optional[List[float]] = None) -> Path:
    """tau_{i+1} = tau_i + dt_i * v(tau_i, t_i); the field is never evaluated at t_T = 1."""
    x = np.array(start.data, dtype=float, copy=True)
    for i, t, dt in grid:
        v = _field_step(field, x, t, i, phase)
        if norms is not None:
            norms.append(float(np.linalg.norm(v)))
        x = x + dt * v
        if not np.all(np.isfinite(x)):
            raise IntegrationError("non-finite path", step=i, phase=phase)
    return Path(x)


@dataclass
class PredictionResult:
    path: Path
    steps_used: int
    field_norms: List[float] = field(default_factory=list)
    start: Optional[Path] = None


def predict(field: FlowField, T_pred: int, rng: np.random.Generator,
            shape: Optional[Tuple[int, int]] = None) -> PredictionResult:
    if T_pred < 1:
        raise ValidationError(f"T_pred must be >= 1, got {T_pred}")
    d, width = shape or path_shape_of(field)
    start = sample_prior(d, width - 1, rng)
    norms: List[float] = []
    path = euler_integrate(field, uniform_grid(T_pred), start, phase='prediction', norms=norms)
    logger.debug(f"prediction finished in {T_pred} step(s), last field norm {norms[-1]:.4f}")
    return PredictionResult(path=path, steps_used=T_pred, field_norms=norms, start=start)


@dataclass
class Snapshot:
    t: float
    path: Path
    barrier: np.ndarray       # (m, H+1)
    slack: np.ndarray         # (H+1,)
    multipliers: np.ndarray   # (m, H+1)
    degenerate: np.ndarray    # (H+1,) bool


@dataclass
class CorrectionTrace:
    snapshots: List[Snapshot]
    barrier_names: Tuple[str, ...] = ()
    interventions: int = 0

    @property
    def final(self) -> Path:
        return self.snapshots[-1].path

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.snapshots])

    def barrier_series(self) -> np.ndarray:
        """Barrier values over time, shape (n_snapshots, m, H+1)."""
        return np.array([s.barrier for s in self.snapshots])

    def paths(self) -> np.ndarray:
        return np.array([s.path.data for s in self.snapshots])

    def to_csv_rows(self) -> List[List[str]]:
        first = self.snapshots[0]
        d = first.path.d
        m = first.barrier.shape[0]
        header = (['t', 'k'] + [f"x{i + 1}" for i in range(d)] + [f"b{j + 1}" for j in range(m)]
                  + ['slack'] + [f"lambda{j + 1}" for j in range(m)] + ['degenerate'])
        rows = [header]
        for snap in self.snapshots:
            for k in range(snap.path.H + 1):
                rows.append([repr(float(snap.t)), str(k)]
                            + [repr(float(x)) for x in snap.path.data[:, k]]
                            + [repr(float(b)) for b in snap.barrier[:, k]]
                            + [repr(float(snap.slack[k]))]
                            + [repr(float(mu)) for mu in snap.multipliers[:, k]]
                            + [str(int(snap.degenerate[k]))])
        return rows

    @classmethod
    def from_csv_rows(cls, rows: Sequence[Sequence[str]], barrier_names: Tuple[str, ...] = ()) -> CorrectionTrace:
        header = list(rows[0])
        d = sum(1 for name in header if name.startswith('x'))
        m = sum(1 for name in header if name.startswith('b'))
        grouped: List[Tuple[float, List[Sequence[str]]]] = []
        for row in rows[1:]:
            t = float(row[0])
            if not grouped or grouped[-1][0] != t:
                grouped.append((t, []))
            grouped[-1][1].append(row)
        snapshots = []
        for t, group in grouped:
            body = np.array([[float(v) for v in row[2:-1]] for row in group])
            positions = body[:, :d].T
            barrier = body[:, d:d + m].T
            slack = body[:, d + m]
            multipliers = body[:, d + m + 1:d + 2 * m + 1].T
            degenerate = np.array([row[-1] == '1' for row in group])
            snapshots.append(Snapshot(t=t, path=Path(positions), barrier=barrier.reshape(m, -1),
                                      slack=slack, multipliers=multipliers.reshape(m, -1), degenerate=degenerate))
        return cls(snapshots=snapshots, barrier_names=barrier_names)


def _snapshot(t: float, x: np.ndarray, monitor: Optional[SafetyFilter], outcome=None) -> Snapshot:
    n = x.shape[1]
    m = len(monitor.specs) if monitor is not None else 0
    barrier = monitor.barrier_values(x) if monitor is not None else np.zeros((0, n))
    if outcome is None:
        return Snapshot(t=t, path=Path(x), barrier=barrier, slack=np.zeros(n),
                        multipliers=np.zeros((m, n)), degenerate=np.zeros(n, dtype=bool))
    return Snapshot(t=t, path=Path(x), barrier=barrier, slack=outcome.slack,
                    multipliers=outcome.multipliers, degenerate=outcome.degenerate)


def run_filtered_flow(field: FlowField, grid: TimeGrid, start: Path,
                      safety_filter: Optional[SafetyFilter] = None,
                      barriers: Optional[Sequence[BarrierSpec]] = None,
                      phase: str = 'correction') -> CorrectionTrace:
    """Euler integration of `field` with the per-waypoint QP applied at every step.

    Snapshots are taken at every grid time; each carries the path at t_i, the
    barrier values there and the QP slacks/multipliers of the step taken from t_i.
    """
    if safety_filter is not None:
        monitor = safety_filter
    elif barriers:
        monitor = SafetyFilter(barriers)
    else:
        monitor = None
    x = np.array(start.data, dtype=float, copy=True)
    snapshots: List[Snapshot] = []
    interventions = 0
    for i, t, dt in grid:
        v = _field_step(field, x, t, i, phase)
        outcome = None
        if safety_filter is not None:
            try:
                outcome = safety_filter.apply(v, x, t)
            except SafeFlowError as e:
                raise IntegrationError(f"safety filter failed: {e}", step=i, phase=phase) from e
            v = outcome.velocity
            interventions += outcome.interventions
        snapshots.append(_snapshot(t, x, monitor, outcome))
        x = x + dt * v
        if not np.all(np.isfinite(x)):
            raise IntegrationError("non-finite path", step=i, phase=phase)
    snapshots.append(_snapshot(grid.times[-1], x, monitor))
    names = tuple(spec.name or spec.kind for spec in monitor.specs) if monitor is not None else ()
    return CorrectionTrace(snapshots=snapshots, barrier_names=names, interventions=interventions)


def run_correction(field: FlowField, alpha: float, T_corr: int, start: Path,
                   safety_filter: Optional[SafetyFilter] = None,
                   barriers: Optional[Sequence[BarrierSpec]] = None) -> CorrectionTrace:
    """Correction phase: time-scaled flow from tau_0^c = start on a fresh [0, 1] clock."""
    if T_corr < 1:
        raise ValidationError(f"T_corr must be >= 1, got {T_corr}")
    trace = run_filtered_flow(vtfd_field(field, alpha), uniform_grid(T_corr), start,
                              safety_filter, barriers, phase='correction')
    logger.debug(f"correction finished: {T_corr} steps, {trace.interventions} QP interventions")
    return trace


def run_naive(field: FlowField, T: int, rng: np.random.Generator,
              safety_filter: Optional[SafetyFilter] = None,
              barriers: Optional[Sequence[BarrierSpec]] = None,
              shape: Optional[Tuple[int, int]] = None) -> CorrectionTrace:
    """Filtered integration of the unscaled field over the whole noise-to-target flow."""
    d, width = shape or path_shape_of(field)
    start = sample_prior(d, width - 1, rng)
    return run_filtered_flow(field, uniform_grid(T), start, safety_filter, barriers, phase='naive')


def plan(config: RunConfig, env: Environment, field: Optional[FlowField] = None) -> Tuple[CorrectionTrace, RunRecord]:
    """Predict without safety, then correct with the safety filter, then score the final path."""
    from core.environment import build_field
    from core.metrics import build_run_record

    if field is None:
        field = build_field(config, env)
    counting = CountingField(field)
    shape = (config.d, config.H + 1)
    rng = make_rng(config.seed)
    safety_filter = SafetyFilter(env.barriers, config.cbf) if config.safety else None

    started = time.perf_counter()
    if config.method == 'safeflowmatcher':
        prediction = predict(counting, config.T_pred, rng, shape)
        trace = run_correction(counting, config.alpha, config.T_corr, prediction.path,
                               safety_filter, env.barriers)
    elif config.method == 'safe_fm_naive':
        trace = run_naive(counting, config.T_pred + config.T_corr, rng, safety_filter, env.barriers, shape)
    else:
        trace = run_naive(counting, config.T_pred + config.T_corr, rng, None, env.barriers, shape)
    elapsed_ms = (time.perf_counter() - started) * 1000.0

    record = build_run_record(trace, config, env, elapsed_ms, counting.evaluations)
    logger.info(f"seed {config.seed} [{config.method}]: min barrier {min(record.min_barrier, default=float('nan')):.4f}, "
                f"trap={record.trap}, {counting.evaluations} field evaluations")
    return trace, record
