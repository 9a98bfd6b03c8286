from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import ValidationError
from core.safety_filter import BarrierSpec
from core.trajectory import Path, RunConfig

if TYPE_CHECKING:
    from core.environment import Environment
    from core.integrators import CorrectionTrace


@dataclass
class RunRecord:
    seed: int
    method: str
    config_hash: str
    min_barrier: Tuple[float, ...]
    barrier_names: Tuple[str, ...]
    score_proxy: float
    trap: bool
    curvature: float
    acceleration: float
    field_evaluations: int
    convergence_time: float
    interventions: int = 0
    # wall clock is excluded from equality so identical configs give equal records
    time_per_step: Optional[float] = field(default=None, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.score_proxy <= 1.0:
            raise ValidationError(f"score_proxy must lie in [0, 1], got {self.score_proxy}")
        if self.time_per_step is not None and not self.time_per_step > 0:
            raise ValidationError(f"time_per_step must be positive, got {self.time_per_step}")

    def csv_header(self) -> List[str]:
        return (['seed', 'method', 'config_hash'] + list(self.barrier_names)
                + ['score', 'trap', 'time_per_step_ms', 'curvature', 'acceleration',
                   'field_evaluations', 'convergence_time', 'interventions'])

    def to_csv_row(self, include_timing: bool = False) -> List[str]:
        timing = repr(self.time_per_step) if include_timing and self.time_per_step is not None else ''
        return ([str(self.seed), self.method, self.config_hash] + [repr(float(b)) for b in self.min_barrier]
                + [repr(float(self.score_proxy)), str(int(self.trap)), timing, repr(float(self.curvature)),
                   repr(float(self.acceleration)), str(self.field_evaluations),
                   repr(float(self.convergence_time)), str(self.interventions)])

    @classmethod
    def from_csv(cls, header: Sequence[str], row: Sequence[str]) -> RunRecord:
        values = dict(zip(header, row))
        fixed = {'seed', 'method', 'config_hash', 'score', 'trap', 'time_per_step_ms', 'curvature',
                 'acceleration', 'field_evaluations', 'convergence_time', 'interventions'}
        names = tuple(name for name in header if name not in fixed)
        timing = values.get('time_per_step_ms', '')
        return cls(
            seed=int(values['seed']),
            method=values['method'],
            config_hash=values['config_hash'],
            min_barrier=tuple(float(values[name]) for name in names),
            barrier_names=names,
            score_proxy=float(values['score']),
            trap=values['trap'] == '1',
            curvature=float(values['curvature']),
            acceleration=float(values['acceleration']),
            field_evaluations=int(values['field_evaluations']),
            convergence_time=float(values['convergence_time']),
            interventions=int(values.get('interventions', 0) or 0),
            time_per_step=float(timing) if timing else None,
        )


def barrier_safety(paths: Sequence[Path], spec: BarrierSpec) -> float:
    """min over runs i and waypoints k of b(tau_1^{i,k})."""
    if not paths:
        raise ValidationError("barrier_safety needs at least one run")
    return float(min(np.min(spec.evaluate(p.data)[0]) for p in paths))


def segment_lengths(path: Path) -> np.ndarray:
    return np.linalg.norm(np.diff(path.data, axis=1), axis=0)


def score_proxy(path: Path, env: Environment, zeta: float) -> float:
    """(H - k*)/H for the first waypoint k* inside the goal with no trap segment before it, else 0.

    An open-loop surrogate for the closed-loop benchmark score.
    """
    if path.H < 1:
        raise ValidationError("score_proxy needs H >= 1")
    lengths = segment_lengths(path)
    for k in range(path.H + 1):
        if k >= 1 and lengths[k - 1] > zeta:
            return 0.0
        if env.goal.contains(path.waypoint(k)):
            return (path.H - k) / path.H
    return 0.0


def _require_joints(path: Path, name: str) -> None:
    if path.H < 2:
        raise ValidationError(f"{name} needs H >= 2, got H={path.H}")


def curvature(path: Path) -> float:
    """Mean unsigned turning angle between consecutive segments."""
    _require_joints(path, 'curvature')
    segments = np.diff(path.data, axis=1)
    a, b = segments[:, :-1], segments[:, 1:]
    dot = np.einsum('dk,dk->k', a, b)
    if path.d == 2:
        cross = np.abs(a[0] * b[1] - a[1] * b[0])
    else:
        cross = np.sqrt(np.maximum(np.einsum('dk,dk->k', a, a) * np.einsum('dk,dk->k', b, b) - dot ** 2, 0.0))
    # atan2(0, 0) = 0, so zero-length segments count as straight
    return float(np.mean(np.arctan2(cross, dot)))


def acceleration(path: Path) -> float:
    """Mean squared second difference ||tau^{k+1} - 2 tau^k + tau^{k-1}||^2."""
    _require_joints(path, 'acceleration')
    second = path.data[:, 2:] - 2.0 * path.data[:, 1:-1] + path.data[:, :-2]
    return float(np.mean(np.sum(second ** 2, axis=0)))


def time_per_step(total_elapsed: float, T_pred: int, T_corr: int) -> float:
    """Total sampling time (QP included) divided by the number of integration updates."""
    if not total_elapsed > 0:
        raise ValidationError(f"Elapsed time must be positive, got {total_elapsed}")
    if T_pred < 1 or T_corr < 1:
        raise ValidationError(f"T_pred and T_corr must be >= 1, got {T_pred}, {T_corr}")
    return total_elapsed / (T_pred + T_corr)


def detect_trap_flag(path: Path, zeta: float) -> bool:
    from core.certificates import detect_trap
    return detect_trap(path, zeta)[0]


def build_run_record(trace: CorrectionTrace, run_config: RunConfig, env: Environment,
                     elapsed_ms: float, evaluations: int) -> RunRecord:
    from core.certificates import convergence_time
    from core.environment import trap_threshold

    final = trace.final
    zeta = trap_threshold(run_config, env)
    barrier = trace.snapshots[-1].barrier
    smooth = final.H >= 2
    return RunRecord(
        seed=run_config.seed,
        method=run_config.method,
        config_hash=run_config.config_hash(),
        min_barrier=tuple(float(np.min(row)) for row in barrier),
        barrier_names=trace.barrier_names,
        score_proxy=score_proxy(final, env, zeta),
        trap=detect_trap_flag(final, zeta),
        curvature=curvature(final) if smooth else math.nan,
        acceleration=acceleration(final) if smooth else math.nan,
        field_evaluations=evaluations,
        convergence_time=convergence_time(trace, run_config.cbf),
        interventions=trace.interventions,
        time_per_step=time_per_step(elapsed_ms, run_config.T_pred, run_config.T_corr) if elapsed_ms > 0 else None,
    )


TABLE_COLUMNS = ('BS1', 'BS2', 'Score', 'Time', 'TrapRate', 'kappa', 'a')


def aggregate_records(records: Sequence[RunRecord], label: Dict[str, Any], include_timing: bool = False) -> Dict[str, Any]:
    """One summary row: min barrier over runs per constraint, mean and std of the rest."""
    if not records:
        raise ValidationError("Cannot aggregate an empty run collection")
    row: Dict[str, Any] = dict(label)
    row['runs'] = len(records)
    names = records[0].barrier_names
    for j, slot in enumerate(('BS1', 'BS2')):
        row[slot] = min(r.min_barrier[j] for r in records) if j < len(names) else math.nan
    scores = np.array([r.score_proxy for r in records])
    row['Score'] = float(np.mean(scores))
    row['Score_std'] = float(np.std(scores))
    times = [r.time_per_step for r in records if r.time_per_step is not None]
    row['Time'] = float(np.mean(times)) if include_timing and times else None
    row['TrapRate'] = float(np.mean([r.trap for r in records]))
    for key, attr in (('kappa', 'curvature'), ('a', 'acceleration')):
        values = np.array([getattr(r, attr) for r in records])
        row[key] = float(np.mean(values))
        row[f"{key}_std"] = float(np.std(values))
    return row
