"""Sample-quality targets, per-sample weights and the bilevel data-weight update.

The detector here is a linear least-squares scorer, so the inner step and the
gradient of the validation soft-AUC with respect to each data weight are all
closed form.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from defectforge.errors import DimensionError, ParameterError


def quality_targets(losses, eps: float = 1e-8) -> np.ndarray:
    """``1 - (l - min l) / (max l - min l + eps)``; the lowest-loss sample maps to 1."""
    l = np.asarray(losses, dtype=np.float64).ravel()
    if l.size == 0:
        raise ParameterError("quality_targets needs at least one loss")
    if not eps > 0:
        raise ParameterError(f"eps must be > 0, got {eps}")
    lo = l.min()
    return 1.0 - (l - lo) / (l.max() - lo + eps)


def sample_weights(q, d, lambda_sqe: float = 1.0, lambda_bi: float = 1.0) -> np.ndarray:
    """``lambda_sqe * q + lambda_bi * d``, or uniform ones when ``lambda_sqe == 0``."""
    q = np.asarray(q, dtype=np.float64).ravel()
    d = np.asarray(d, dtype=np.float64).ravel()
    if q.shape != d.shape:
        raise ParameterError(f"q has {q.size} entries but d has {d.size}")
    if lambda_sqe == 0:
        return np.ones_like(q)
    return lambda_sqe * q + lambda_bi * d


def soft_auc(pos_scores, neg_scores, alpha: float = 1.0) -> float:
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ParameterError("soft-AUC needs at least one positive and one negative score")
    if not alpha > 0:
        raise ParameterError(f"alpha must be > 0, got {alpha}")
    return float(expit(alpha * (pos[:, None] - neg[None, :])).mean())


def soft_auc_loss(pos_scores, neg_scores, alpha: float = 1.0) -> float:
    """``1 - mean_ij sigmoid(alpha * (s_pos_i - s_neg_j))``."""
    return 1.0 - soft_auc(pos_scores, neg_scores, alpha)


def exact_auc(pos_scores, neg_scores) -> float:
    """Wilcoxon-Mann-Whitney AUC with ties counted as one half."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0) + 0.5 * (diff == 0)).mean())


def bernoulli_entropy(q) -> np.ndarray:
    q = np.clip(np.asarray(q, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    return -(q * np.log(q) + (1.0 - q) * np.log(1.0 - q))


def highest_entropy_subset(q, fraction: float = 0.05) -> np.ndarray:
    """Indices of the ``fraction`` of samples whose quality score is most uncertain.

    Always returns at least one index; ties break by lower index first.
    """
    q = np.asarray(q, dtype=np.float64).ravel()
    if q.size == 0:
        raise ParameterError("cannot select from an empty set")
    if not 0 < fraction <= 1:
        raise ParameterError(f"fraction must lie in (0, 1], got {fraction}")
    n = max(1, int(round(fraction * q.size)))
    order = np.argsort(-bernoulli_entropy(q), kind="stable")
    return np.sort(order[:n])


@dataclass
class WeightState:
    losses: np.ndarray
    q: np.ndarray
    d: np.ndarray
    lambda_sqe: float = 1.0
    lambda_bi: float = 1.0
    eps: float = 1e-8

    def __post_init__(self):
        self.losses = np.asarray(self.losses, dtype=np.float64).ravel()
        self.q = np.asarray(self.q, dtype=np.float64).ravel()
        self.d = np.asarray(self.d, dtype=np.float64).ravel()
        if not (self.losses.size == self.q.size == self.d.size):
            raise DimensionError("losses, q and d must have equal length")
        if ((self.q < 0) | (self.q > 1)).any():
            raise ParameterError("quality scores must lie in [0, 1]")
        if self.lambda_sqe < 0 or self.lambda_bi < 0:
            raise ParameterError("lambdas must be >= 0")

    @property
    def weights(self) -> np.ndarray:
        return sample_weights(self.q, self.d, self.lambda_sqe, self.lambda_bi)

    def to_json(self) -> str:
        return json.dumps(
            {
                "losses": self.losses.tolist(),
                "q": self.q.tolist(),
                "d": self.d.tolist(),
                "lambdas": {"sqe": self.lambda_sqe, "bi": self.lambda_bi},
                "eps": self.eps,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "WeightState":
        rec = json.loads(text)
        lambdas = rec.get("lambdas", {})
        return cls(
            losses=rec["losses"],
            q=rec["q"],
            d=rec["d"],
            lambda_sqe=lambdas.get("sqe", 1.0),
            lambda_bi=lambdas.get("bi", 1.0),
            eps=rec.get("eps", 1e-8),
        )


@dataclass
class ToyDetector:
    """Linear scorer ``s = theta . x`` trained on squared error to targets ``t``."""

    theta: np.ndarray
    X: np.ndarray
    t: np.ndarray
    inner_lr: float = 0.1
    outer_lr: float = 1e-4

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).ravel()
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.t = np.asarray(self.t, dtype=np.float64).ravel()
        if self.X.shape != (self.t.size, self.theta.size):
            raise DimensionError(f"features {self.X.shape} do not match {self.t.size} targets and dim {self.theta.size}")

    def residuals(self, theta=None) -> np.ndarray:
        th = self.theta if theta is None else theta
        return self.X @ th - self.t

    def losses(self, theta=None) -> np.ndarray:
        return self.residuals(theta) ** 2

    def sample_grads(self, theta=None) -> np.ndarray:
        """Row ``i`` is the gradient of sample ``i``'s loss with respect to theta."""
        return 2.0 * self.residuals(theta)[:, None] * self.X


def toy_inner_step(det: ToyDetector, weights) -> np.ndarray:
    """``theta - inner_lr * sum_i w_i * grad l_i(theta)``; ``det`` is not modified."""
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size != det.t.size:
        raise DimensionError(f"{w.size} weights for {det.t.size} samples")
    return det.theta - det.inner_lr * (w @ det.sample_grads())


def _val_features(samples, dim: int) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    x = x.reshape(-1, dim) if x.size else x.reshape(0, dim)
    return x


def validation_loss(det: ToyDetector, theta, val_pos, val_neg, alpha: float) -> float:
    dim = det.theta.size
    return soft_auc_loss(_val_features(val_pos, dim) @ theta, _val_features(val_neg, dim) @ theta, alpha)


def outer_gradient(det: ToyDetector, state: WeightState, val_pos, val_neg, alpha: float) -> np.ndarray:
    """Exact ``dL_val(theta') / dd_i`` through one inner step."""
    dim = det.theta.size
    xp = _val_features(val_pos, dim)
    xn = _val_features(val_neg, dim)
    if len(xp) == 0 or len(xn) == 0:
        raise ParameterError("validation needs at least one positive and one negative sample")
    if not alpha > 0:
        raise ParameterError(f"alpha must be > 0, got {alpha}")
    if state.d.size != det.t.size:
        raise DimensionError(f"{state.d.size} data weights for {det.t.size} samples")
    theta_new = toy_inner_step(det, state.weights)
    sig = expit(alpha * ((xp @ theta_new)[:, None] - (xn @ theta_new)[None, :]))
    dsig = sig * (1.0 - sig)
    # dL/dtheta' = -(alpha / (N+ N-)) * sum_ij sigma'(.) (x+_i - x-_j)
    grad_theta = -alpha * (dsig.sum(axis=1) @ xp - dsig.sum(axis=0) @ xn) / dsig.size
    dw_dd = 0.0 if state.lambda_sqe == 0 else state.lambda_bi
    return grad_theta @ (-det.inner_lr * dw_dd * det.sample_grads().T)


def outer_update_weights(det: ToyDetector, state: WeightState, val_pos, val_neg, alpha: float = 1.0) -> np.ndarray:
    """One gradient step on the data weights; returns the new ``d``.

    ``det.theta`` is left untouched: the adapted parameters only live inside
    this call.
    """
    grad = outer_gradient(det, state, val_pos, val_neg, alpha)
    return state.d - det.outer_lr * grad
