"""Contrastive objectives over cosine similarity scores.

Every loss consumes one positive score and a batch of negative scores and
returns both its value and the exact partial derivatives with respect to
each score. The derivatives are what the trainer backpropagates; they are
also validated against finite differences in the test suite.

The plain softmax loss is the common ancestor: with logits
``[s_p, s_n_1, ..., s_n_{N-1}]`` its value is ``logsumexp(s) - s_p``. The
temperature-scaled variant divides every score by ``tau`` first (so it
reduces to the softmax loss exactly at ``tau = 1``). The circle loss
rescales each score by an adaptive weight before the same log-ratio:

    u_p = gamma * relu(1 + m - s_p) * (s_p - (1 - m))
    u_n = gamma * relu(s_n + m) * (s_n - m)
    loss = softplus(logsumexp(u_n) - u_p)

Gradients differentiate through the adaptive weights (subgradient 0 at the
hinge kinks), so they agree with finite differences of the value itself.
All exponentials go through max-subtracted log-sum-exp; gamma = 256 would
otherwise overflow even in float64 once scores approach +/-1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .validation import DegenerateInputError, MalformedInputError

_SCORE_SLACK = 1e-9


@dataclass(frozen=True)
class ScoreSet:
    """One positive similarity and at least one negative similarity."""

    s_p: float
    s_n: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "s_n", np.asarray(self.s_n, dtype=np.float64))
        if self.s_n.ndim != 1 or self.s_n.size < 1:
            raise MalformedInputError("ScoreSet needs at least one negative score")
        if not (np.isfinite(self.s_p) and np.all(np.isfinite(self.s_n))):
            raise MalformedInputError("similarity scores must be finite")
        lo, hi = -1.0 - _SCORE_SLACK, 1.0 + _SCORE_SLACK
        if not (lo <= self.s_p <= hi) or self.s_n.min() < lo or self.s_n.max() > hi:
            raise MalformedInputError("similarity scores must lie in [-1, 1]")


@dataclass(frozen=True)
class CircleParams:
    gamma: float = 256.0
    margin: float = 0.25

    def __post_init__(self):
        if self.gamma <= 0.0:
            raise MalformedInputError("gamma must be positive")
        if not 0.0 < self.margin < 1.0:
            raise MalformedInputError("margin must lie in (0, 1)")


@dataclass
class LossOutput:
    value: float
    d_sp: float
    d_sn: np.ndarray = field(repr=False)


def similarity_scores(anchor_w, pos_w, negs_w) -> ScoreSet:
    """Cosine similarities of a raw anchor against a positive and negatives."""
    anchor = _unit(anchor_w, "anchor")
    pos = _unit(pos_w, "positive")
    s_n = np.array([float(anchor @ _unit(neg, f"negative {j}")) for j, neg in enumerate(negs_w)])
    return ScoreSet(s_p=float(np.clip(anchor @ pos, -1.0, 1.0)),
                    s_n=np.clip(s_n, -1.0, 1.0))


def _unit(v, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm <= 1e-12:
        raise DegenerateInputError(f"{name} vector has near-zero norm")
    return v / norm


def _softmax_over_scores(s_p: float, s_n: np.ndarray) -> tuple[float, float, np.ndarray]:
    """Value and softmax weights of the log-ratio loss on given logits."""
    logits = np.concatenate(([s_p], s_n))
    m = logits.max()
    exps = np.exp(logits - m)
    total = exps.sum()
    value = float(np.log(total) + m - s_p)
    sigma = exps / total
    return value, float(sigma[0]), sigma[1:]


def softmax_loss(scores: ScoreSet) -> LossOutput:
    """Log-ratio of the positive against all scores, with exact gradients."""
    value, sigma_p, sigma_n = _softmax_over_scores(scores.s_p, scores.s_n)
    return LossOutput(value=value, d_sp=sigma_p - 1.0, d_sn=sigma_n)


def infonce_loss(scores: ScoreSet, tau: float = 0.07) -> LossOutput:
    """Temperature-scaled softmax loss; identical to ``softmax_loss`` at tau=1."""
    if tau <= 0.0:
        raise MalformedInputError(f"temperature must be positive, got {tau}")
    value, sigma_p, sigma_n = _softmax_over_scores(scores.s_p / tau, scores.s_n / tau)
    return LossOutput(value=value, d_sp=(sigma_p - 1.0) / tau, d_sn=sigma_n / tau)


def _stable_sigmoid(z: float) -> float:
    if z >= 0.0:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z)
    return e / (1.0 + e)


def circle_loss(scores: ScoreSet, params: CircleParams = CircleParams()) -> LossOutput:
    """Adaptively weighted log-ratio loss with within/between-class margins."""
    g, m = params.gamma, params.margin
    s_p, s_n = scores.s_p, scores.s_n

    alpha_p = max(1.0 + m - s_p, 0.0)
    alpha_n = np.maximum(s_n + m, 0.0)
    u_p = g * alpha_p * (s_p - (1.0 - m))
    u_n = g * alpha_n * (s_n - m)

    mx = u_n.max()
    exps = np.exp(u_n - mx)
    lse_n = float(np.log(exps.sum()) + mx)
    z = lse_n - u_p
    value = float(np.logaddexp(0.0, z))
    sig = _stable_sigmoid(z)
    w_n = exps / exps.sum()

    # d u_p / d s_p = 2 g (1 - s_p) where the positive hinge passes, else 0;
    # same product-rule form for the negatives (2 g s_n).
    du_p = 2.0 * g * (1.0 - s_p) if alpha_p > 0.0 else 0.0
    du_n = np.where(alpha_n > 0.0, 2.0 * g * s_n, 0.0)
    return LossOutput(value=value, d_sp=-sig * du_p, d_sn=sig * w_n * du_n)


LOSS_NAMES = ("softmax", "infonce", "circle")


def evaluate_loss(
    scores: ScoreSet,
    loss: str,
    *,
    tau: float = 0.07,
    gamma: float = 256.0,
    margin: float = 0.25,
) -> LossOutput:
    """Dispatch by loss name; the trainer's single entry point."""
    if loss == "softmax":
        return softmax_loss(scores)
    if loss == "infonce":
        return infonce_loss(scores, tau=tau)
    if loss == "circle":
        return circle_loss(scores, CircleParams(gamma=gamma, margin=margin))
    raise MalformedInputError(f"unknown loss {loss!r}; expected one of {LOSS_NAMES}")


def anchor_gradient_analytic(anchor_w, pos_w, negs_w) -> np.ndarray:
    """Closed-form gradient of softmax_loss(similarity_scores(...)) in the raw anchor.

    Equals (1/||w_a||) (I - z_a z_a^T) [(sigma_p - 1) z_p + sum_j sigma_n^j z_n^j],
    which is orthogonal to the normalized anchor by construction.
    """
    anchor_w = np.asarray(anchor_w, dtype=np.float64)
    norm = float(np.linalg.norm(anchor_w))
    if norm <= 1e-12:
        raise DegenerateInputError("anchor vector has near-zero norm")
    z_a = anchor_w / norm
    z_p = _unit(pos_w, "positive")
    z_n = np.stack([_unit(neg, f"negative {j}") for j, neg in enumerate(negs_w)])

    scores = similarity_scores(anchor_w, pos_w, negs_w)
    _, sigma_p, sigma_n = _softmax_over_scores(scores.s_p, scores.s_n)
    direction = (sigma_p - 1.0) * z_p + sigma_n @ z_n
    return (direction - z_a * float(z_a @ direction)) / norm


def negative_contribution(scores: ScoreSet, j: int) -> float:
    """Gradient magnitude contributed by negative ``j`` under the softmax loss.

    Zero at s_n = -1 (easy negative) and at s_n = +1 (colinear degenerate);
    maximal for moderate similarities, which is the automatic hard-negative
    weighting the contrastive objective performs.
    """
    if not 0 <= j < scores.s_n.size:
        raise IndexError(f"negative index {j} out of range for {scores.s_n.size}")
    _, _, sigma_n = _softmax_over_scores(scores.s_p, scores.s_n)
    s = float(scores.s_n[j])
    return float(sigma_n[j] * np.sqrt(max(1.0 - s * s, 0.0)))
