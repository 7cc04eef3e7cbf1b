"""
Routing controllers: the fixed score threshold, the FuncDyn network-aware
threshold, and PolicyNet, a small MLP that predicts the probability of
routing a step to the cloud.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import special
from scipy.optimize import minimize, nnls

from lab.exceptions import DomainError, UsageError
from lab.services.econ import CLOUD, EDGE
from lab.services.net_model import MBIT, MS, NetworkState
from lab.services.theory import empirical_tau0

logger = logging.getLogger(__name__)

# Edge wins ties at p = 0.5
CLOUD_PROBABILITY_CUTOFF = 0.5

_P_EPS = 1e-12
_GAP_EPS = 1e-3
_MIN_SLOPE = 1e-6


@dataclass(frozen=True)
class NormBounds:
    """Min-max bounds used to map link state and score into [0, 1]"""
    rtt: tuple[float, float] = (20 * MS, 130 * MS)
    bw: tuple[float, float] = (5 * MBIT, 200 * MBIT)
    score: tuple[float, float] = (-5.0, 5.0)

    def __post_init__(self):
        for label, (lo, hi) in (('rtt', self.rtt), ('bw', self.bw), ('score', self.score)):
            if not lo < hi:
                raise UsageError(f"Normalization bounds for {label} must satisfy min < max")

    def normalize(self, value: float, which: str) -> float:
        lo, hi = getattr(self, which)
        return float(np.clip((value - lo) / (hi - lo), 0.0, 1.0))


@dataclass(frozen=True)
class RouteDecision:
    choice: str
    score: float
    # tau for threshold rules, p for PolicyNet
    threshold: float


def route_fixed(s: float, tau: float) -> RouteDecision:
    """Edge iff s >= tau"""
    return RouteDecision(choice=EDGE if s >= tau else CLOUD, score=s, threshold=tau)


@dataclass(frozen=True)
class FuncDynParams:
    tau0: float = 4.0
    a_rtt: float = 1.0
    b_bw: float = 0.5
    g_hist: float = 0.5
    norm: NormBounds = field(default_factory=NormBounds)

    def __post_init__(self):
        if min(self.a_rtt, self.b_bw, self.g_hist) < 0:
            raise UsageError("FuncDyn coefficients must be non-negative")


def funcdyn_threshold(params: FuncDynParams, state: NetworkState, q_hat: float) -> float:
    """tau = tau0 - a*rtt_norm + b*bw_norm - g*q_hat"""
    rtt_norm = params.norm.normalize(state.rtt, 'rtt')
    bw_norm = params.norm.normalize(state.bw, 'bw')
    return params.tau0 - params.a_rtt * rtt_norm + params.b_bw * bw_norm - params.g_hist * q_hat


def route_funcdyn(s: float, params: FuncDynParams, state: NetworkState, q_hat: float) -> RouteDecision:
    return route_fixed(s, funcdyn_threshold(params, state, q_hat))


def _fit_quality_gap(z: np.ndarray, gap: np.ndarray, ridge: float) -> np.ndarray:
    """Logistic fit of E[gap | z] = expit(theta0 + theta1 * z) with an L2 ridge"""
    def loss(theta):
        p = special.expit(theta[0] + theta[1] * z)
        value = -np.sum(gap * np.log(p + _P_EPS) + (1.0 - gap) * np.log(1.0 - p + _P_EPS)) / z.size
        residual = (p - gap) / z.size
        grad = np.array([residual.sum(), (residual * z).sum()])
        return value + ridge * theta @ theta, grad + 2.0 * ridge * theta

    return minimize(loss, np.zeros(2), jac=True, method='L-BFGS-B').x


def calibrate_funcdyn(
    records: np.ndarray,
    params: FuncDynParams,
    min_records: int = 20,
    ridge: float = 1e-2,
) -> FuncDynParams:
    """
    Fit (tau0, a_rtt, b_bw) from counterfactual records with rows
    (score, j_edge, j_cloud, rtt_norm, bw_norm, q_hat, dq), dq = q_cloud - q_edge.

    The cloud's quality gain is fitted as a decreasing logistic curve of the
    score. Each record's break-even threshold is the score at which that gain
    equals its own offload penalty lam * (c_cloud - c_edge), recovered as
    dq - (j_cloud - j_edge). a_rtt and b_bw come from non-negative least squares
    of the centred break-even scores on the link features; tau0 is anchored at
    the empirical fixed threshold. g_hist is kept.
    """
    records = np.asarray(records, dtype=float)
    if records.size == 0:
        raise UsageError("FuncDyn calibration needs at least one record")
    records = records.reshape(-1, 7)
    means = records[:, 3:6].mean(axis=0)
    tau_center = empirical_tau0(records[:, :3])

    a_rtt, b_bw = params.a_rtt, params.b_bw
    scores = records[:, 0]
    spread = float(scores.std())
    if len(records) < min_records:
        logger.warning("FuncDyn calibration: %d records, below %d; keeping coefficients", len(records), min_records)
    elif spread == 0.0:
        logger.warning("FuncDyn calibration: scores do not vary; keeping coefficients")
    else:
        center = float(scores.mean())
        dq = records[:, 6]
        theta = _fit_quality_gap((scores - center) / spread, np.clip(dq, 0.0, 1.0), ridge)
        if theta[1] > -_MIN_SLOPE:
            logger.warning("FuncDyn calibration: cloud gain does not fall with the score, keeping coefficients")
        else:
            penalty = np.clip(dq - (records[:, 2] - records[:, 1]), _GAP_EPS, 1.0 - _GAP_EPS)
            breakeven = center + spread * (special.logit(penalty) - theta[0]) / theta[1]
            design = np.column_stack([-(records[:, 3] - means[0]), records[:, 4] - means[1]])
            if np.any(np.abs(design) > 0):
                (a_rtt, b_bw), _ = nnls(design, breakeven - breakeven.mean())

    tau0 = tau_center + a_rtt * means[0] - b_bw * means[1] + params.g_hist * means[2]
    return replace(params, tau0=float(tau0), a_rtt=float(a_rtt), b_bw=float(b_bw))


def recalibrate_threshold(old_scores: Sequence[float], new_scores: Sequence[float], tau: float) -> float:
    """Carry tau onto a new score scale by matching its quantile on the same samples"""
    old_scores = np.asarray(old_scores, dtype=float)
    new_scores = np.asarray(new_scores, dtype=float)
    if old_scores.size == 0 or old_scores.size != new_scores.size:
        raise UsageError("Recalibration needs matched, non-empty score samples")
    if tau <= old_scores.min():
        return float(new_scores.min() - (old_scores.min() - tau))
    if tau > old_scores.max():
        return float(new_scores.max() + (tau - old_scores.max()))
    old_sorted, new_sorted = np.sort(old_scores), np.sort(new_scores)
    # tau lies in (old_sorted[k - 1], old_sorted[k]]; keep its relative position there
    k = int(np.searchsorted(old_sorted, tau, side='left'))
    lo, hi = old_sorted[k - 1], old_sorted[k]
    weight = (tau - lo) / (hi - lo)
    return float(new_sorted[k - 1] + weight * (new_sorted[k] - new_sorted[k - 1]))


ACTIVATIONS = {
    'tanh': (np.tanh, lambda h: 1.0 - h ** 2),
    'sigmoid': (special.expit, lambda h: h * (1.0 - h)),
}


class PolicyNet:
    """Dense MLP router; output is the probability of routing to the cloud"""

    def __init__(
        self,
        widths: Sequence[int] = (4, 50, 50, 1),
        activation: str = 'tanh',
        norm: Optional[NormBounds] = None,
        seed: int = 0,
    ):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or widths[0] != 4 or widths[-1] != 1:
            raise UsageError(f"PolicyNet widths must start at 4 inputs and end at 1 output, got {widths}")
        if activation not in ACTIVATIONS:
            raise UsageError(f"Unknown activation '{activation}'")
        self.widths = widths
        self.activation = activation
        self.norm = norm or NormBounds()
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))

    @property
    def parameter_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> 'PolicyNet':
        clone = PolicyNet.__new__(PolicyNet)
        clone.widths = self.widths
        clone.activation = self.activation
        clone.norm = self.norm
        clone.weights = [w.copy() for w in self.weights]
        clone.biases = [b.copy() for b in self.biases]
        return clone

    def features(self, state: NetworkState, score: float, q_hat: float) -> np.ndarray:
        return np.array([
            self.norm.normalize(state.rtt, 'rtt'),
            self.norm.normalize(state.bw, 'bw'),
            self.norm.normalize(score, 'score'),
            q_hat,
        ])

    def _forward(self, x: np.ndarray) -> list[np.ndarray]:
        act, _ = ACTIVATIONS[self.activation]
        layers = [x]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            layers.append(act(layers[-1] @ w + b))
        logits = layers[-1] @ self.weights[-1] + self.biases[-1]
        layers.append(np.clip(special.expit(logits), _P_EPS, 1.0 - _P_EPS))
        return layers

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Batch forward; rows are (rtt_norm, bw_norm, s_norm, q_hat)"""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if not np.all(np.isfinite(x)):
            raise DomainError("PolicyNet features must be finite")
        return self._forward(x)[-1][:, 0]

    def loss_and_gradients(self, x: np.ndarray, y: np.ndarray):
        """Mean binary cross-entropy and its gradients by backprop"""
        _, act_grad = ACTIVATIONS[self.activation]
        layers = self._forward(x)
        p = layers[-1][:, 0]
        loss = float(-np.mean(special.xlogy(y, p) + special.xlogy(1 - y, 1 - p)))
        delta = ((p - y) / len(y))[:, None]
        grad_w = [None] * len(self.weights)
        grad_b = [None] * len(self.biases)
        for i in reversed(range(len(self.weights))):
            grad_w[i] = layers[i].T @ delta
            grad_b[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * act_grad(layers[i])
        return loss, grad_w, grad_b

    def to_checkpoint(self) -> dict:
        return {
            'format': 'routelab.policynet',
            'version': 1,
            'widths': list(self.widths),
            'activation': self.activation,
            'norm': {
                'rtt': list(self.norm.rtt),
                'bw': list(self.norm.bw),
                'score': list(self.norm.score),
            },
            'weights': [w.tolist() for w in self.weights],
            'biases': [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_checkpoint(cls, payload: dict) -> 'PolicyNet':
        if payload.get('format') != 'routelab.policynet':
            raise UsageError("Not a PolicyNet checkpoint")
        net = cls.__new__(cls)
        net.widths = tuple(payload['widths'])
        net.activation = payload['activation']
        net.norm = NormBounds(**{k: tuple(v) for k, v in payload['norm'].items()})
        net.weights = [np.array(w, dtype=float).reshape(a, b)
                       for w, a, b in zip(payload['weights'], net.widths[:-1], net.widths[1:])]
        net.biases = [np.array(b, dtype=float) for b in payload['biases']]
        return net


def policynet_forward(net: PolicyNet, features: Sequence[float]) -> float:
    return float(net.predict(np.asarray(features, dtype=float))[0])


def route_policynet(net: PolicyNet, state: NetworkState, s: float, q_hat: float) -> RouteDecision:
    """Cloud iff p > 0.5"""
    p = policynet_forward(net, net.features(state, s, q_hat))
    return RouteDecision(choice=CLOUD if p > CLOUD_PROBABILITY_CUTOFF else EDGE, score=s, threshold=p)


def policynet_labels(paired: Sequence[tuple[float, float, float, float]], lam: float) -> list[int]:
    """1 (cloud) iff the cloud utility strictly beats the edge utility"""
    if not paired:
        raise UsageError("policynet_labels needs at least one record")
    labels = []
    for q_edge, c_edge, q_cloud, c_cloud in paired:
        labels.append(int(q_cloud - lam * c_cloud > q_edge - lam * c_edge))
    return labels


@dataclass
class TrainResult:
    net: PolicyNet
    losses: list[float]
    degenerate: bool


def policynet_train(
    net: PolicyNet,
    features: np.ndarray,
    labels: np.ndarray,
    lr: float = 0.05,
    epochs: int = 200,
    batch: int = 32,
    seed: int = 0,
) -> TrainResult:
    """Mini-batch gradient descent on binary cross-entropy"""
    x = np.atleast_2d(np.asarray(features, dtype=float))
    y = np.asarray(labels, dtype=float)
    if len(y) == 0:
        raise UsageError("PolicyNet training needs a non-empty dataset")
    if not np.all((y == 0) | (y == 1)):
        raise UsageError("PolicyNet labels must be 0 or 1")
    if not np.all(np.isfinite(x)):
        raise DomainError("PolicyNet features must be finite")

    degenerate = bool(np.all(y == y[0]))
    if degenerate:
        logger.warning("PolicyNet dataset has a single class (%d); training anyway", int(y[0]))

    net = net.copy()
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), batch):
            idx = order[start:start + batch]
            _, grad_w, grad_b = net.loss_and_gradients(x[idx], y[idx])
            for i in range(len(net.weights)):
                net.weights[i] -= lr * grad_w[i]
                net.biases[i] -= lr * grad_b[i]
        losses.append(net.loss_and_gradients(x, y)[0])
    return TrainResult(net=net, losses=losses, degenerate=degenerate)
