"""Post-hoc checks of the barrier certificate on recorded correction traces.

The Lyapunov candidate V = max(delta - b, 0) is compared with the solution of
the extinction ODE phi' = -eps * phi^rho started at t_w. Euler traces cannot
satisfy continuous-time inequalities exactly, so every check is relaxed by
tol_disc = L * dt with L the largest observed |db/dt| in the trace.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import nnls

from core.errors import ValidationError
from core.safety_filter import BarrierSpec, CbfParams
from core.trajectory import Path

if TYPE_CHECKING:
    from core.integrators import CorrectionTrace
    from core.vector_fields import FlowField

logger = logging.getLogger(__name__)

CONSISTENCY_TOL = 1e-9
BOUNDARY_TOL = 0.05


def lyapunov_value(b_value, delta: float):
    """V = max(delta - b, 0); elementwise for arrays."""
    if np.ndim(b_value):
        return np.maximum(delta - np.asarray(b_value, dtype=float), 0.0)
    return max(delta - float(b_value), 0.0)


def _check_rho(rho: float) -> None:
    if not 0 < rho < 1:
        raise ValidationError(f"rho must lie in (0, 1), got {rho}")


def comparison_solution(V0: float, epsilon: float, rho: float, t_w: float, t: float) -> float:
    """phi(t) = (V0^(1-rho) - (1-rho) eps (t - t_w))^(1/(1-rho)), zero after extinction."""
    _check_rho(rho)
    if V0 < 0:
        raise ValidationError(f"V0 must be >= 0, got {V0}")
    if t < t_w:
        raise ValidationError(f"comparison solution is defined for t >= t_w ({t} < {t_w})")
    base = V0 ** (1.0 - rho) - (1.0 - rho) * epsilon * (t - t_w)
    if base <= 0:
        return 0.0
    return base ** (1.0 / (1.0 - rho))


def extinction_delay(V0: float, epsilon: float, rho: float) -> float:
    return V0 ** (1.0 - rho) / (epsilon * (1.0 - rho))


def convergence_bound(b_at_tw: float, params: CbfParams, start: Optional[float] = None) -> float:
    """T = t_w + max(delta - b, 0)^(1-rho) / (eps (1-rho)); `start` overrides t_w."""
    t0 = params.t_w if start is None else start
    return t0 + extinction_delay(lyapunov_value(b_at_tw, params.delta), params.epsilon, params.rho)


@dataclass
class Violation:
    check: str
    waypoint: int
    barrier: int
    snapshot: int
    time: float
    margin: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class WaypointCertificate:
    barrier: int
    waypoint: int
    b_at_tw: float
    bound: float
    reach_time: Optional[float]
    held: bool
    max_violation: float


@dataclass
class EnvelopeFit:
    """e(t) ~ C1 exp(-alpha t) + C2 (1 - t)^2, fitted with non-negative least squares."""
    C1: float
    C2: float
    alpha: float
    residual: float

    def evaluate(self, times) -> np.ndarray:
        times = np.asarray(times, dtype=float)
        return self.C1 * np.exp(-self.alpha * times) + self.C2 * (1.0 - times) ** 2


@dataclass
class CertificateReport:
    waypoints: List[WaypointCertificate] = field(default_factory=list)
    violations: List[Violation] = field(default_factory=list)
    tol_disc: float = 0.0
    lipschitz: float = 0.0
    trap: bool = False
    trap_indices: Tuple[int, ...] = ()
    envelope: Optional[EnvelopeFit] = None

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self) -> Dict[str, Any]:
        return {
            'passed': self.passed,
            'tol_disc': self.tol_disc,
            'lipschitz': self.lipschitz,
            'trap': self.trap,
            'trap_indices': list(self.trap_indices),
            'envelope': asdict(self.envelope) if self.envelope else None,
            'waypoints': [asdict(w) for w in self.waypoints],
            'violations': [v.to_dict() for v in self.violations],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> CertificateReport:
        envelope = data.get('envelope')
        return cls(
            waypoints=[WaypointCertificate(**w) for w in data.get('waypoints', [])],
            violations=[Violation(**v) for v in data.get('violations', [])],
            tol_disc=float(data.get('tol_disc', 0.0)),
            lipschitz=float(data.get('lipschitz', 0.0)),
            trap=bool(data.get('trap', False)),
            trap_indices=tuple(data.get('trap_indices', ())),
            envelope=EnvelopeFit(**envelope) if envelope else None,
        )

    def summary_row(self) -> Dict[str, Any]:
        reach = [w.reach_time for w in self.waypoints if w.reach_time is not None]
        return {
            'passed': int(self.passed),
            'violations': len(self.violations),
            'tol_disc': self.tol_disc,
            'max_reach_time': max(reach) if reach else math.nan,
            'trap': int(self.trap),
        }


def _barrier_series(trace: CorrectionTrace, specs: Optional[Sequence[BarrierSpec]],
                    violations: List[Violation]) -> np.ndarray:
    recorded = trace.barrier_series()
    if not specs:
        return recorded
    recomputed = np.array([[spec.evaluate(snap.path.data)[0] for spec in specs] for snap in trace.snapshots])
    if recorded.shape == recomputed.shape and recorded.size:
        gap = np.abs(recorded - recomputed)
        for s, j, k in zip(*np.nonzero(gap > CONSISTENCY_TOL)):
            violations.append(Violation('consistency', int(k), int(j), int(s),
                                        float(trace.snapshots[s].t), float(gap[s, j, k])))
    return recomputed


def lipschitz_estimate(times: np.ndarray, series: np.ndarray) -> float:
    """max |db/dt| over consecutive snapshots."""
    if series.shape[0] < 2 or series.size == 0:
        return 0.0
    dt = np.diff(times)[:, None, None]
    return float(np.max(np.abs(np.diff(series, axis=0)) / dt))


def verify_invariance(trace: CorrectionTrace, params: CbfParams,
                      specs: Optional[Sequence[BarrierSpec]] = None,
                      tol: Optional[float] = None,
                      zeta: Optional[float] = None) -> CertificateReport:
    """Checks reach, stay, reach-time bound and the comparison bound for every waypoint and barrier.

    With `specs` the barrier values are recomputed from the recorded positions
    and any disagreement with the recorded columns is reported as well.
    """
    violations: List[Violation] = []
    series = _barrier_series(trace, specs, violations)
    times = trace.times
    lipschitz = lipschitz_estimate(times, series)
    dt = float(np.max(np.diff(times))) if len(times) > 1 else 0.0
    tol_disc = lipschitz * dt if tol is None else float(tol)
    report = CertificateReport(violations=violations, tol_disc=tol_disc, lipschitz=lipschitz)

    if zeta is None:
        zeta = params.zeta
    if zeta is not None and trace.final.H >= 1:
        report.trap, report.trap_indices = detect_trap(trace.final, zeta)

    after = np.flatnonzero(times >= params.t_w)
    if series.size == 0 or after.size == 0:
        return report
    first = int(after[0])
    t0 = float(times[first])
    floor = params.delta - tol_disc
    _, m, width = series.shape
    for j in range(m):
        for k in range(width):
            values = series[first:, j, k]
            b0 = float(values[0])
            V0 = lyapunov_value(b0, params.delta)
            bound = convergence_bound(b0, params, start=t0)
            reached = np.flatnonzero(values >= floor)
            if reached.size == 0:
                cert = WaypointCertificate(j, k, b0, bound, None, False, float(floor - np.max(values)))
                if bound + dt <= times[-1]:
                    violations.append(Violation('reach', k, j, len(times) - 1, float(times[-1]),
                                                float(floor - values[-1])))
            else:
                r = int(reached[0])
                reach_time = float(times[first + r])
                tail = values[r:]
                worst = float(np.max(floor - tail))
                held = worst <= 0
                cert = WaypointCertificate(j, k, b0, bound, reach_time, held, max(worst, 0.0))
                if not held:
                    dip = r + int(np.argmax(floor - tail))
                    violations.append(Violation('invariance', k, j, first + dip,
                                                float(times[first + dip]), worst))
                if reach_time > bound + dt:
                    violations.append(Violation('reach_time', k, j, first + r, reach_time,
                                                reach_time - bound - dt))
            for s, b in enumerate(values):
                t = float(times[first + s])
                excess = lyapunov_value(float(b), params.delta) - comparison_solution(
                    V0, params.epsilon, params.rho, t0, t) - tol_disc
                if excess > 0:
                    violations.append(Violation('comparison', k, j, first + s, t, float(excess)))
                    break
            report.waypoints.append(cert)
    if violations:
        logger.warning(f"certificate check found {len(violations)} violation(s); first: {violations[0].check} "
                       f"at waypoint {violations[0].waypoint}, t={violations[0].time:.4f}")
    return report


def detect_trap(path: Path, zeta: float, barrier_values: Optional[np.ndarray] = None,
                require_boundary: bool = False, boundary_tol: float = BOUNDARY_TOL) -> Tuple[bool, Tuple[int, ...]]:
    """Indices k in 1..H with ||tau^k - tau^{k-1}|| > zeta.

    The relaxed definition ignores barrier values. With `require_boundary`
    a jump only counts when one of its endpoints sits on a constraint boundary
    (|b| <= boundary_tol), which needs `barrier_values` of shape (m, H+1).
    """
    if path.H < 1:
        raise ValidationError("detect_trap needs H >= 1")
    if not zeta > 0:
        raise ValidationError(f"zeta must be > 0, got {zeta}")
    lengths = np.linalg.norm(np.diff(path.data, axis=1), axis=0)
    candidates = np.flatnonzero(lengths > zeta) + 1
    if require_boundary:
        if barrier_values is None:
            raise ValidationError("require_boundary needs barrier values")
        on_boundary = np.any(np.abs(np.atleast_2d(barrier_values)) <= boundary_tol, axis=0)
        candidates = np.array([k for k in candidates if on_boundary[k] or on_boundary[k - 1]], dtype=int)
    indices = tuple(int(k) for k in candidates)
    return bool(indices), indices


def reach_times(trace: CorrectionTrace, params: CbfParams) -> np.ndarray:
    """First snapshot time at or after t_w with b >= delta, shape (m, H+1); NaN if never reached."""
    series = trace.barrier_series()
    times = trace.times
    after = np.flatnonzero(times >= params.t_w)
    if series.size == 0 or after.size == 0:
        return np.zeros((0, trace.final.H + 1))
    tail = series[after[0]:] >= params.delta
    first = np.argmax(tail, axis=0)
    result = times[after[0] + first]
    return np.where(np.any(tail, axis=0), result, np.nan)


def convergence_time(trace: CorrectionTrace, params: CbfParams) -> float:
    """Time by which every waypoint has entered the robust safe set; t_w when unconstrained."""
    reach = reach_times(trace, params)
    if reach.size == 0:
        return float(params.t_w)
    return float(np.max(reach))


def fit_error_envelope(times, errors, alpha: float) -> EnvelopeFit:
    times = np.asarray(times, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if times.shape != errors.shape or times.size < 2:
        raise ValidationError("fit_error_envelope needs matching time and error arrays of length >= 2")
    basis = np.column_stack([np.exp(-alpha * times), (1.0 - times) ** 2])
    (C1, C2), residual = nnls(basis, errors)
    return EnvelopeFit(C1=float(C1), C2=float(C2), alpha=float(alpha), residual=float(residual))


def correction_envelope(trace: CorrectionTrace, alpha: float) -> EnvelopeFit:
    """Envelope of the distance from each snapshot to the final path."""
    paths = trace.paths()
    errors = np.linalg.norm((paths - paths[-1]).reshape(len(paths), -1), axis=1)
    return fit_error_envelope(trace.times, errors, alpha)


def log_slope(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValidationError("log-log slope needs positive values")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def posterior_contraction_slope(field: FlowField, mode: Path, start: Path, times) -> float:
    """Slope of log ||E[tau_1 | tau_t] - mode|| against log(1 - t) along the interpolant start -> mode."""
    times = np.asarray(times, dtype=float)
    errors = []
    for t in times:
        x = t * mode.data + (1.0 - t) * start.data
        errors.append(float(np.linalg.norm(field.posterior_mean(x, float(t)) - mode.data)))
    return log_slope(1.0 - times, errors)
