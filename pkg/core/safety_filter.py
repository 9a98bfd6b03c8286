"""Barrier functions and the per-waypoint CBF-QP safety filter.

The corrected flow dtau/dt = u is directly velocity controlled, so the barrier
certificate for waypoint k reduces to the row

    grad b(tau^k)^T u + eps * sgn(b - delta) * |b - delta|^rho + w_t * r >= 0

and the filter solves min ||u - v_ref||^2 + r^2 over (u, r) subject to at most
two such rows sharing one slack r. With z = (u, r) this is the Euclidean
projection of (v_ref, 0) onto at most two half-spaces, solved in closed form by
enumerating active sets.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, asdict, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

import config
from core.errors import QpInfeasibleError, ValidationError

logger = logging.getLogger(__name__)

BARRIER_KINDS = ('ellipse', 'quartic', 'halfspace_velocity')
SGN_ZERO_BAND = 1e-12
GRAM_CONDITION_LIMIT = 1e12
FEASIBILITY_TOL = 1e-12
MAX_ROWS = 2


@dataclass(frozen=True)
class CbfParams:
    epsilon: float = config.EPSILON
    rho: float = config.RHO
    delta: float = config.DELTA
    t_w: float = config.T_W
    w0: float = config.W0
    # None means "use the environment default" (4x median waypoint spacing)
    zeta: Optional[float] = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValidationError(f"epsilon must be > 0, got {self.epsilon}")
        if not 0 < self.rho < 1:
            raise ValidationError(f"rho must lie in (0, 1), got {self.rho}")
        if not self.delta > 0:
            raise ValidationError(f"delta must be > 0, got {self.delta}")
        if not 0 <= self.t_w < 1:
            raise ValidationError(f"t_w must lie in [0, 1), got {self.t_w}")
        if not self.w0 >= 0:
            raise ValidationError(f"w0 must be >= 0, got {self.w0}")
        if self.zeta is not None and not self.zeta > 0:
            raise ValidationError(f"zeta must be > 0, got {self.zeta}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> CbfParams:
        return cls(**data)


@dataclass(frozen=True)
class BarrierSpec:
    """A differentiable barrier b whose superlevel set {b >= 0} is safe.

    ellipse:  ((x - x0)/a)^2 + ((y - y0)/b)^2 - 1
    quartic:  ((x - x0)/a)^4 + ((y - y0)/b)^4 - 1
    halfspace_velocity:  h_r - z - phi * v_z   (roof constraint)

    `indices` names the waypoint coordinates the barrier reads: (x, y) for the
    obstacle kinds and (z, v_z) for the roof.
    """
    kind: str
    center: Tuple[float, float] = (0.0, 0.0)
    axes: Tuple[float, float] = (1.0, 1.0)
    roof_height: float = 1.0
    velocity_scale: float = 0.1
    indices: Tuple[int, int] = (0, 1)
    name: str = ''

    def __post_init__(self):
        if self.kind not in BARRIER_KINDS:
            raise ValidationError(f"Unknown barrier kind '{self.kind}'")
        object.__setattr__(self, 'center', tuple(float(c) for c in self.center))
        object.__setattr__(self, 'axes', tuple(float(a) for a in self.axes))
        object.__setattr__(self, 'indices', tuple(int(i) for i in self.indices))
        if len(self.center) != 2 or len(self.axes) != 2 or len(self.indices) != 2:
            raise ValidationError("center, axes and indices must each have two entries")
        if self.kind == 'halfspace_velocity':
            if not (self.roof_height > 0 and self.velocity_scale > 0):
                raise ValidationError("roof height and velocity scale must be positive")
        elif min(self.axes) <= 0:
            raise ValidationError(f"semi-axes must be positive, got {self.axes}")

    def evaluate(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Barrier values and gradients for a batch of waypoints.

        points has shape (d, n); returns b of shape (n,) and grad of shape (d, n).
        """
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        d = points.shape[0]
        i, j = self.indices
        if max(i, j) >= d:
            raise ValidationError(f"Barrier '{self.name or self.kind}' reads coordinates {self.indices} "
                                  f"but waypoints have dimension {d}")
        grad = np.zeros_like(points)
        if self.kind == 'halfspace_velocity':
            z, vz = points[i], points[j]
            b = self.roof_height - z - self.velocity_scale * vz
            grad[i] = -1.0
            grad[j] = -self.velocity_scale
            return b, grad

        ax, ay = self.axes
        px = (points[i] - self.center[0]) / ax
        py = (points[j] - self.center[1]) / ay
        if self.kind == 'ellipse':
            b = px ** 2 + py ** 2 - 1.0
            grad[i] = 2.0 * px / ax
            grad[j] = 2.0 * py / ay
        else:
            b = px ** 4 + py ** 4 - 1.0
            grad[i] = 4.0 * px ** 3 / ax
            grad[j] = 4.0 * py ** 3 / ay
        return b, grad

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> BarrierSpec:
        return cls(**data)


def barrier_eval(spec: BarrierSpec, waypoint) -> Tuple[float, np.ndarray]:
    b, grad = spec.evaluate(np.asarray(waypoint, dtype=float)[:, None])
    return float(b[0]), grad[:, 0]


def weight_schedule(t: float, t_w: float, w0: float) -> float:
    """Linear relaxation ramp w0 * max(0, 1 - t/t_w), identically zero on [t_w, 1]."""
    if t_w <= 0 or t >= t_w:
        return 0.0
    return w0 * max(0.0, 1.0 - t / t_w)


def finite_time_term(b, params: CbfParams):
    """eps * sgn(b - delta) * |b - delta|^rho with sgn(0) = 0."""
    gap = np.asarray(b, dtype=float) - params.delta
    term = params.epsilon * np.sign(gap) * np.abs(gap) ** params.rho
    return np.where(np.abs(gap) < SGN_ZERO_BAND, 0.0, term)


@dataclass(frozen=True)
class CbfRow:
    """The constraint a^T u + c + w r >= 0."""
    a: np.ndarray
    c: float
    w: float


def cbf_row(spec: BarrierSpec, params: CbfParams, waypoint, t: float) -> CbfRow:
    b, grad = barrier_eval(spec, waypoint)
    c = float(finite_time_term(b, params))
    return CbfRow(a=grad, c=c, w=weight_schedule(t, params.t_w, params.w0))


@dataclass
class QpSolution:
    u: np.ndarray
    r: float
    # Multipliers for the objective ||u - v_ref||^2 + r^2 as stated (not halved)
    multipliers: np.ndarray
    active_set: Tuple[int, ...] = ()
    degenerate: bool = False

    @property
    def intervened(self) -> bool:
        return bool(self.active_set)


def _lifted(rows: Sequence[CbfRow], w: float) -> Tuple[np.ndarray, np.ndarray]:
    A = np.array([np.append(np.asarray(row.a, dtype=float), w) for row in rows])
    c = np.array([float(row.c) for row in rows])
    return A, c


def qp_project(rows: Sequence[CbfRow], v_ref, w: float) -> QpSolution:
    """Closed-form solution of min ||u - v_ref||^2 + r^2 s.t. a_j^T u + c_j + w r >= 0.

    The slack column is present only while w > 0; for w = 0 the returned r is 0.
    """
    if not 1 <= len(rows) <= MAX_ROWS:
        raise ValidationError(f"qp_project handles one or two rows, got {len(rows)}")
    v_ref = np.asarray(v_ref, dtype=float)
    d = v_ref.shape[0]
    A, c = _lifted(rows, w)
    z0 = np.append(v_ref, 0.0)
    g = A @ z0 + c
    m = len(rows)

    if np.all(g >= 0):
        return QpSolution(u=v_ref.copy(), r=0.0, multipliers=np.zeros(m))

    norms = np.einsum('ij,ij->i', A, A)
    for j in range(m):
        if norms[j] == 0.0 and g[j] < 0:
            raise QpInfeasibleError(f"Constraint {j} is violated (residual {g[j]:.3e}) and has a zero gradient")

    candidates: List[Tuple[float, np.ndarray, np.ndarray, Tuple[int, ...]]] = []
    for j in range(m):
        if g[j] >= 0:
            continue
        lam = np.zeros(m)
        lam[j] = -g[j] / norms[j]
        z = z0 + lam[j] * A[j]
        if np.all(A @ z + c >= -FEASIBILITY_TOL * (1.0 + np.abs(c))):
            candidates.append((float(np.sum((z - z0) ** 2)), z, lam, (j,)))

    degenerate = False
    if m == 2:
        gram = A @ A.T
        if np.linalg.cond(gram) <= GRAM_CONDITION_LIMIT:
            lam = np.linalg.solve(gram, -g)
            if np.all(lam >= 0):
                z = z0 + A.T @ lam
                candidates.append((float(np.sum((z - z0) ** 2)), z, lam, (0, 1)))
        elif not candidates:
            # near-parallel active gradients: keep the more violated row only
            j = int(np.argmin(g))
            lam = np.zeros(m)
            lam[j] = -g[j] / norms[j]
            z = z0 + lam[j] * A[j]
            candidates.append((float(np.sum((z - z0) ** 2)), z, lam, (j,)))
            degenerate = True
            logger.warning(f"Near-parallel barrier gradients; falling back to constraint {j}")

    if not candidates:
        raise QpInfeasibleError(f"No feasible active set for residuals {g}")

    _, z, lam, active = min(candidates, key=lambda item: item[0])
    r = float(z[d]) if w > 0 else 0.0
    return QpSolution(u=z[:d], r=r, multipliers=2.0 * lam, active_set=active, degenerate=degenerate)


def kkt_residuals(rows: Sequence[CbfRow], v_ref, w: float, solution: QpSolution) -> Dict[str, float]:
    v_ref = np.asarray(v_ref, dtype=float)
    A, c = _lifted(rows, w)
    z0 = np.append(v_ref, 0.0)
    z = np.append(solution.u, solution.r)
    mu = np.asarray(solution.multipliers, dtype=float)
    slack = A @ z + c
    return {
        'stationarity': float(np.max(np.abs(2.0 * (z - z0) - A.T @ mu))),
        'primal': float(np.max(np.maximum(-slack, 0.0))),
        'dual': float(np.max(np.maximum(-mu, 0.0))),
        'complementarity': float(np.max(np.abs(mu * slack))),
    }


def filter_step(velocity, specs: Sequence[BarrierSpec], params: CbfParams, waypoint, t: float) -> QpSolution:
    if len(specs) > MAX_ROWS:
        raise ValidationError(f"At most {MAX_ROWS} barriers per environment, got {len(specs)}")
    velocity = np.asarray(velocity, dtype=float)
    if not specs:
        return QpSolution(u=velocity.copy(), r=0.0, multipliers=np.zeros(0))
    rows = [cbf_row(spec, params, waypoint, t) for spec in specs]
    return qp_project(rows, velocity, rows[0].w)


@dataclass
class FilterOutcome:
    """Filtered velocities for a whole path at one time step."""
    velocity: np.ndarray
    slack: np.ndarray
    multipliers: np.ndarray
    degenerate: np.ndarray
    interventions: int = 0


@dataclass
class SafetyFilter:
    specs: Sequence[BarrierSpec]
    params: CbfParams = field(default_factory=CbfParams)

    def __post_init__(self):
        self.specs = tuple(self.specs)
        if len(self.specs) > MAX_ROWS:
            raise ValidationError(f"At most {MAX_ROWS} barriers per environment, got {len(self.specs)}")

    def barrier_values(self, positions: np.ndarray) -> np.ndarray:
        """Barrier values, shape (m, H+1)."""
        if not self.specs:
            return np.zeros((0, positions.shape[1]))
        return np.array([spec.evaluate(positions)[0] for spec in self.specs])

    def apply(self, velocity: np.ndarray, positions: np.ndarray, t: float) -> FilterOutcome:
        """Runs filter_step on every waypoint whose rows are violated at the reference velocity.

        Waypoints whose constraints already hold keep their reference velocity
        untouched, which is what the QP returns for them anyway.
        """
        n = positions.shape[1]
        m = len(self.specs)
        outcome = FilterOutcome(velocity=np.array(velocity, dtype=float, copy=True),
                                slack=np.zeros(n), multipliers=np.zeros((m, n)),
                                degenerate=np.zeros(n, dtype=bool))
        if not m:
            return outcome
        violated = np.zeros(n, dtype=bool)
        for spec in self.specs:
            b, grad = spec.evaluate(positions)
            residual = np.einsum('dk,dk->k', grad, velocity) + finite_time_term(b, self.params)
            violated |= residual < 0
        for k in np.flatnonzero(violated):
            solution = filter_step(velocity[:, k], self.specs, self.params, positions[:, k], t)
            outcome.velocity[:, k] = solution.u
            outcome.slack[k] = solution.r
            outcome.multipliers[:, k] = solution.multipliers
            outcome.degenerate[k] = solution.degenerate
        outcome.interventions = int(np.count_nonzero(violated))
        return outcome
