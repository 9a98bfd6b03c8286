"""Flow fields v_t(tau) on paths.

Three fields are provided: the OT-conditional field toward a single endpoint,
the exact marginal field of a Gaussian-mixture target under the OT probability
path, and a small tanh MLP trained with the conditional flow matching loss.
Fields work on raw (d, H+1) arrays internally; calling a field with a Path
returns a Path.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from core.errors import SingularityError, TrainingDivergedError, ValidationError
from core.trajectory import Path

logger = logging.getLogger(__name__)

SINGULARITY_GUARD = 1e-9
T_MAX = 1.0 - SINGULARITY_GUARD
WEIGHT_TOL = 1e-12

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def check_time(t: float) -> None:
    if not t < T_MAX:
        raise SingularityError(f"Field evaluated at t={t!r}; OT fields are singular for t >= 1 - {SINGULARITY_GUARD}")


class FlowField:
    """Base class: subclasses implement velocity(x, t) on (d, H+1) arrays."""

    # OT-form fields expose E[tau_1 | tau_t = x]; the time-scaled field uses it
    # to cancel the 1/(1-t) factor symbolically.
    ot_form = False

    def velocity(self, x: np.ndarray, t: float) -> np.ndarray:
        raise NotImplementedError

    def posterior_mean(self, x: np.ndarray, t: float) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no closed-form posterior mean")

    def __call__(self, tau, t: float):
        if isinstance(tau, Path):
            return Path(self.velocity(tau.data, t))
        return self.velocity(np.asarray(tau, dtype=float), t)


class CallableField(FlowField):
    """Adapter for plain functions (x, t) -> velocity."""

    def __init__(self, fn: Callable[[np.ndarray, float], np.ndarray]):
        self.fn = fn

    def velocity(self, x, t):
        return np.asarray(self.fn(x, t), dtype=float)


def ot_conditional(target: Path, tau: Path, t: float) -> Path:
    check_time(t)
    return Path((target.data - tau.data) / (1.0 - t))


class OtConditionalField(FlowField):
    ot_form = True

    def __init__(self, target: Path):
        self.target = target

    def velocity(self, x, t):
        check_time(t)
        return (self.target.data - x) / (1.0 - t)

    def posterior_mean(self, x, t):
        return np.array(self.target.data, copy=True)


@dataclass(frozen=True, eq=False)
class GmmTarget:
    """Isotropic Gaussian mixture over paths: sum_i pi_i N(mu_i, s_i^2 I)."""
    weights: np.ndarray
    means: np.ndarray  # (K, d, H+1)
    stds: np.ndarray

    def __post_init__(self):
        weights = np.array(self.weights, dtype=float)
        means = np.array(self.means, dtype=float)
        stds = np.array(self.stds, dtype=float)
        if weights.ndim != 1 or weights.size == 0:
            raise ValidationError("A mixture needs at least one component")
        if means.ndim != 3 or means.shape[0] != weights.size or stds.shape != weights.shape:
            raise ValidationError(f"Inconsistent mixture shapes: weights {weights.shape}, "
                                  f"means {means.shape}, stds {stds.shape}")
        if np.any(weights <= 0) or abs(weights.sum() - 1.0) > WEIGHT_TOL:
            raise ValidationError(f"Mixture weights must be positive and sum to 1, got sum {weights.sum()!r}")
        if np.any(stds <= 0) or not np.all(np.isfinite(means)):
            raise ValidationError("Mixture stds must be positive and means finite")
        for arr in (weights, means, stds):
            arr.flags.writeable = False
        object.__setattr__(self, 'weights', weights)
        object.__setattr__(self, 'means', means)
        object.__setattr__(self, 'stds', stds)

    @property
    def K(self) -> int:
        return self.weights.size

    @property
    def path_shape(self) -> Tuple[int, int]:
        return self.means.shape[1], self.means.shape[2]

    def component_mean(self, i: int) -> Path:
        return Path(self.means[i])

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """n flattened draws, shape (n, d*(H+1))."""
        components = rng.choice(self.K, size=n, p=self.weights)
        flat_means = self.means.reshape(self.K, -1)
        noise = rng.standard_normal((n, flat_means.shape[1]))
        return flat_means[components] + self.stds[components, None] * noise

    def to_dict(self) -> Dict[str, Any]:
        return {
            'weights': [float(w) for w in self.weights],
            'means': [Path(m).to_dict() for m in self.means],
            'stds': [float(s) for s in self.stds],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> GmmTarget:
        means = np.array([Path.from_dict(m).data for m in data['means']])
        return cls(weights=np.asarray(data['weights']), means=means, stds=np.asarray(data['stds']))


def gmm_posterior(gmm: GmmTarget, x: np.ndarray, t: float,
                  prior_mean: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Posterior component weights and E[tau_1 | tau_t = x].

    Component i moves through the OT path with time-t marginal
    N((1-t) o + t mu_i, ((t s_i)^2 + (1-t)^2) I), where o is the noise mean
    (zero unless the whole problem is translated).
    """
    flat = np.asarray(x, dtype=float).reshape(-1)
    means = gmm.means.reshape(gmm.K, -1)
    origin = 0.0 if prior_mean is None else np.asarray(prior_mean, dtype=float).reshape(-1)
    D = flat.size
    var = (t * gmm.stds) ** 2 + (1.0 - t) ** 2
    offset = flat[None, :] - (1.0 - t) * origin - t * means
    log_w = (np.log(gmm.weights) - 0.5 * D * np.log(2.0 * np.pi * var)
             - 0.5 * np.einsum('kd,kd->k', offset, offset) / var)
    weights = np.exp(log_w - logsumexp(log_w))
    gain = t * gmm.stds ** 2 / var
    component_means = means + gain[:, None] * offset
    return weights, (weights @ component_means).reshape(np.shape(x))


def gmm_marginal(gmm: GmmTarget, tau: Path, t: float, prior_mean: Optional[np.ndarray] = None) -> Path:
    check_time(t)
    _, mean = gmm_posterior(gmm, tau.data, t, prior_mean)
    return Path((mean - tau.data) / (1.0 - t))


class GmmMarginalField(FlowField):
    ot_form = True

    def __init__(self, gmm: GmmTarget, prior_mean: Optional[np.ndarray] = None):
        self.gmm = gmm
        self.prior_mean = prior_mean

    def velocity(self, x, t):
        check_time(t)
        return (self.posterior_mean(x, t) - x) / (1.0 - t)

    def posterior_mean(self, x, t):
        return gmm_posterior(self.gmm, x, min(t, T_MAX), self.prior_mean)[1]


@dataclass
class CfmBatchLoss:
    value: float
    grad_norm: float


class MlpField(FlowField):
    """tanh MLP mapping (flattened tau, t) to a flattened velocity.

    widths lists every layer size including input and output; a field over
    d x (H+1) paths has widths[0] == d*(H+1) + 1 and widths[-1] == d*(H+1).
    Adam moments live on the model so training can resume from a checkpoint.
    """
    activation = 'tanh'

    def __init__(self, widths: Sequence[int], rng: np.random.Generator,
                 path_shape: Optional[Tuple[int, int]] = None):
        self.widths = [int(w) for w in widths]
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ValidationError(f"Invalid layer widths {self.widths}")
        if path_shape is not None:
            flat = path_shape[0] * path_shape[1]
            if self.widths[0] != flat + 1 or self.widths[-1] != flat:
                raise ValidationError(f"Widths {self.widths} do not match paths of shape {path_shape}")
        self.path_shape = tuple(path_shape) if path_shape is not None else None
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for fan_in, fan_out in zip(self.widths, self.widths[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))
        self.rng = rng
        self.step_count = 0
        self._m = [np.zeros_like(p) for p in self.parameters()]
        self._v = [np.zeros_like(p) for p in self.parameters()]

    @classmethod
    def for_paths(cls, d: int, H: int, hidden: Sequence[int], rng: np.random.Generator) -> MlpField:
        flat = d * (H + 1)
        return cls([flat + 1, *hidden, flat], rng, path_shape=(d, H + 1))

    def parameters(self) -> List[np.ndarray]:
        params = []
        for W, b in zip(self.weights, self.biases):
            params.extend([W, b])
        return params

    def forward(self, inputs: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
        """Batch forward pass; inputs (n, widths[0]). Returns outputs and layer activations."""
        activations = [inputs]
        h = inputs
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W.T + b
            if i < last:
                h = np.tanh(h)
            activations.append(h)
        return h, activations

    def loss_and_gradients(self, inputs: np.ndarray, targets: np.ndarray) -> Tuple[float, List[np.ndarray]]:
        """Mean over the batch of the squared error ||f(x) - y||^2, with backprop gradients."""
        outputs, activations = self.forward(inputs)
        n = inputs.shape[0]
        residual = outputs - targets
        loss = float(np.sum(residual ** 2) / n)
        delta = 2.0 * residual / n
        grads: List[np.ndarray] = []
        for i in range(len(self.weights) - 1, -1, -1):
            grads.append(delta.sum(axis=0))
            grads.append(delta.T @ activations[i])
            if i > 0:
                delta = (delta @ self.weights[i]) * (1.0 - activations[i] ** 2)
        grads.reverse()
        # reversed order is (W0, b0, W1, b1, ...) to match parameters()
        return loss, grads

    def adam_update(self, grads: Sequence[np.ndarray], learning_rate: float) -> None:
        self.step_count += 1
        bias1 = 1.0 - ADAM_BETA1 ** self.step_count
        bias2 = 1.0 - ADAM_BETA2 ** self.step_count
        for param, grad, m, v in zip(self.parameters(), grads, self._m, self._v):
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * grad
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * grad ** 2
            param -= learning_rate * (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)

    def velocity(self, x, t):
        inputs = np.append(np.asarray(x, dtype=float).reshape(-1), float(t))[None, :]
        outputs, _ = self.forward(inputs)
        return outputs[0].reshape(np.shape(x))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'widths': self.widths,
            'path_shape': list(self.path_shape) if self.path_shape else None,
            'weights': [W.tolist() for W in self.weights],
            'biases': [b.tolist() for b in self.biases],
            'activation': self.activation,
            'step_count': self.step_count,
            'adam_m': [m.tolist() for m in self._m],
            'adam_v': [v.tolist() for v in self._v],
            'rng_state': self.rng.bit_generator.state,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> MlpField:
        if data.get('activation', 'tanh') != 'tanh':
            raise ValidationError(f"Unsupported activation '{data['activation']}'")
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = data['rng_state']
        path_shape = tuple(data['path_shape']) if data.get('path_shape') else None
        model = cls(data['widths'], np.random.Generator(np.random.PCG64(0)), path_shape=path_shape)
        model.rng = rng
        model.weights = [np.asarray(W, dtype=float).reshape(model.weights[i].shape)
                         for i, W in enumerate(data['weights'])]
        model.biases = [np.asarray(b, dtype=float).reshape(model.biases[i].shape)
                        for i, b in enumerate(data['biases'])]
        model.step_count = int(data.get('step_count', 0))
        if 'adam_m' in data:
            model._m = [np.asarray(m, dtype=float).reshape(p.shape) for m, p in zip(data['adam_m'], model.parameters())]
            model._v = [np.asarray(v, dtype=float).reshape(p.shape) for v, p in zip(data['adam_v'], model.parameters())]
        return model


def cfm_batch(gmm: GmmTarget, batch_size: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Inputs (tau_t, t) and regression targets tau_1 - tau_0 along linear interpolants."""
    t = rng.uniform(0.0, 1.0, size=batch_size)
    dim = gmm.means[0].size
    tau0 = rng.standard_normal((batch_size, dim))
    tau1 = gmm.sample(batch_size, rng)
    tau_t = (1.0 - t)[:, None] * tau0 + t[:, None] * tau1
    return np.hstack([tau_t, t[:, None]]), tau1 - tau0


def cfm_train_step(model: MlpField, gmm: GmmTarget, batch_size: int, learning_rate: float,
                   rng: Optional[np.random.Generator] = None) -> CfmBatchLoss:
    """One Adam step on the CFM loss; returns the batch loss before the update."""
    if batch_size < 1 or not learning_rate > 0:
        raise ValidationError(f"Invalid batch size {batch_size} or learning rate {learning_rate}")
    rng = rng if rng is not None else model.rng
    inputs, targets = cfm_batch(gmm, batch_size, rng)
    loss, grads = model.loss_and_gradients(inputs, targets)
    grad_norm = float(np.sqrt(sum(np.sum(g ** 2) for g in grads)))
    if not (np.isfinite(loss) and np.isfinite(grad_norm)):
        raise TrainingDivergedError(f"Non-finite loss {loss} or gradient norm {grad_norm} at step {model.step_count}")
    model.adam_update(grads, learning_rate)
    if not all(np.all(np.isfinite(p)) for p in model.parameters()):
        raise TrainingDivergedError(f"Parameters became non-finite at step {model.step_count}")
    return CfmBatchLoss(value=loss, grad_norm=grad_norm)


def sample_probes(gmm: GmmTarget, n: int, rng: np.random.Generator, t_max: float = 0.9) -> List[Tuple[Path, float]]:
    """Probe points drawn along the OT interpolants of the target."""
    d, width = gmm.path_shape
    t = rng.uniform(0.0, t_max, size=n)
    tau0 = rng.standard_normal((n, d * width))
    tau1 = gmm.sample(n, rng)
    tau_t = (1.0 - t)[:, None] * tau0 + t[:, None] * tau1
    return [(Path(row.reshape(d, width)), float(ti)) for row, ti in zip(tau_t, t)]


def field_distance(a: FlowField, b: FlowField, probes: Sequence[Tuple[Path, float]]) -> float:
    """Root-mean-square of ||a(tau, t) - b(tau, t)|| over the probes."""
    if not probes:
        raise ValidationError("field_distance needs at least one probe")
    for _, t in probes:
        check_time(t)
    squared = [np.sum((a.velocity(tau.data, t) - b.velocity(tau.data, t)) ** 2) for tau, t in probes]
    return float(np.sqrt(np.mean(squared)))


def train_field(model: MlpField, gmm: GmmTarget, steps: int, batch_size: int, learning_rate: float,
                log_every: int = 500) -> List[CfmBatchLoss]:
    history = []
    for step in range(steps):
        history.append(cfm_train_step(model, gmm, batch_size, learning_rate))
        if log_every and (step + 1) % log_every == 0:
            recent = history[-log_every:]
            logger.info(f"step {step + 1}/{steps}: mean loss {np.mean([h.value for h in recent]):.4f}")
    return history


def smoothed(values: Sequence[float], window: int = 50) -> np.ndarray:
    """Trailing moving average."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return values
    window = max(1, min(window, values.size))
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode='valid')
