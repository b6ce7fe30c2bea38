"""Classifier objective: coarse cross-entropy, neighbour consistency,
confidence against a masked sharpened target, and marginal-entropy regulariser.

Each term returns its value together with the gradient w.r.t. the fine
probabilities ``p_f``; :func:`total_loss` chains the weighted sum through the
softmax to obtain the gradient w.r.t. the current logits.

Every logarithm is evaluated at ``max(x, EPS)``. Entries that hit the clamp
contribute zero gradient and are counted in ``LossTerm.clamped``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InfeasibleRelationError, NumericError
from .nncore import softmax_backward, softmax_rows

EPS = 1e-12


@dataclass
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 0.5
    lambda3: float = 2.0
    lambda_m: float = 0.1
    temperature: float = 0.9
    gamma: float = 0.99
    num_neighbors: int = 20
    update_period: int = 20

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda_m"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if self.num_neighbors < 1 or self.update_period < 1:
            raise ValueError("num_neighbors and update_period must be >= 1")


@dataclass
class LossTerm:
    value: float
    grad: np.ndarray
    clamped: int = 0


@dataclass
class TotalLoss:
    value: float
    grad_logits: np.ndarray
    parts: dict[str, float] = field(default_factory=dict)
    clamped: int = 0


def sibling_mask(relation: np.ndarray, coarse_labels: np.ndarray) -> np.ndarray:
    """Row n is column ``coarse_labels[n]`` of the relation matrix: the fine classes under that coarse label."""
    relation = np.asarray(relation)
    labels = np.asarray(coarse_labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= relation.shape[1]):
        raise ValueError(f"coarse labels must lie in [0, {relation.shape[1]})")
    return relation[:, labels].T.astype(bool)


def coarse_loss(probs: np.ndarray, siblings: np.ndarray) -> LossTerm:
    """Mean of -ln p_c[y_c], where p_c[y_c] is the fine mass on the siblings of y_c."""
    probs = np.asarray(probs, dtype=np.float64)
    if siblings.shape != probs.shape:
        raise DimensionError(f"sibling mask {siblings.shape} vs probabilities {probs.shape}")
    n = probs.shape[0]
    mass = np.sum(probs * siblings, axis=1)
    ok = mass >= EPS
    value = -np.mean(np.log(np.maximum(mass, EPS)))
    scale = np.where(ok, -1.0 / (n * np.where(ok, mass, 1.0)), 0.0)
    grad = siblings * scale[:, None]
    return LossTerm(float(value), grad, int(np.count_nonzero(~ok)))


def neighbor_loss(probs: np.ndarray, neighbor_probs: np.ndarray) -> LossTerm:
    """-1/(N L) sum_n sum_l ln <neighbor_probs[n, l], probs[n]>.

    ``neighbor_probs`` has shape (N, L, K_F) and is treated as a constant.
    """
    probs = np.asarray(probs, dtype=np.float64)
    neighbor_probs = np.asarray(neighbor_probs, dtype=np.float64)
    if neighbor_probs.ndim != 3 or neighbor_probs.shape[0] != probs.shape[0] \
            or neighbor_probs.shape[2] != probs.shape[1]:
        raise DimensionError(f"neighbour block {neighbor_probs.shape} vs probabilities {probs.shape}")
    n, n_nb, _ = neighbor_probs.shape
    dots = np.einsum("nlk,nk->nl", neighbor_probs, probs)
    ok = dots >= EPS
    value = -np.sum(np.log(np.maximum(dots, EPS))) / (n * n_nb)
    inv = np.where(ok, 1.0 / np.where(ok, dots, 1.0), 0.0)
    grad = -np.einsum("nl,nlk->nk", inv, neighbor_probs) / (n * n_nb)
    return LossTerm(float(value), grad, int(np.count_nonzero(~ok)))


def target_q(ema_logits: np.ndarray, siblings: np.ndarray, temperature: float) -> np.ndarray:
    """Temperature softmax of the EMA logits restricted to each row's sibling set."""
    ema_logits = np.atleast_2d(np.asarray(ema_logits, dtype=np.float64))
    siblings = np.atleast_2d(np.asarray(siblings, dtype=bool))
    if siblings.shape != ema_logits.shape:
        raise DimensionError(f"sibling mask {siblings.shape} vs logits {ema_logits.shape}")
    if not np.all(siblings.any(axis=1)):
        raise InfeasibleRelationError("a coarse label has no fine classes assigned to it")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not np.all(np.isfinite(ema_logits)):
        raise NumericError("non-finite logits")
    z = np.where(siblings, ema_logits, -np.inf) / temperature
    z = z - z.max(axis=1, keepdims=True)
    q = np.where(siblings, np.exp(z), 0.0)
    return q / q.sum(axis=1, keepdims=True)


def confidence_loss(q: np.ndarray, probs: np.ndarray) -> LossTerm:
    """Mean cross-entropy CE(q, p_f); q is a constant target."""
    probs = np.asarray(probs, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if q.shape != probs.shape:
        raise DimensionError(f"target {q.shape} vs probabilities {probs.shape}")
    n = probs.shape[0]
    ok = probs >= EPS
    value = -np.sum(q * np.log(np.maximum(probs, EPS))) / n
    grad = np.where(ok, -q / (n * np.where(ok, probs, 1.0)), 0.0)
    clamped = int(np.count_nonzero(~ok & (q > 0)))
    return LossTerm(float(value), grad, clamped)


def fine_loss(probs: np.ndarray, neighbor_probs: np.ndarray, q: np.ndarray) -> LossTerm:
    nn_term = neighbor_loss(probs, neighbor_probs)
    conf_term = confidence_loss(q, probs)
    return LossTerm(nn_term.value + conf_term.value, nn_term.grad + conf_term.grad,
                    nn_term.clamped + conf_term.clamped)


def entropy_reg(probs: np.ndarray) -> LossTerm:
    """ln K_F + sum_i pbar_i ln pbar_i for the batch-mean prediction pbar (0 ln 0 = 0)."""
    probs = np.asarray(probs, dtype=np.float64)
    n, k = probs.shape
    pbar = probs.mean(axis=0)
    pos = pbar > 0
    value = np.log(k) + np.sum(pbar[pos] * np.log(pbar[pos]))
    grad_pbar = np.log(np.maximum(pbar, EPS)) + 1.0
    grad = np.broadcast_to(grad_pbar / n, probs.shape).copy()
    # nonnegative by Jensen; clip rounding noise at the uniform optimum
    return LossTerm(float(max(value, 0.0)), grad)


def total_loss(logits: np.ndarray, siblings: np.ndarray, neighbor_probs: np.ndarray,
               ema_logits: np.ndarray, weights: LossWeights, *, use_coarse: bool = True,
               use_fine: bool = True, use_reg: bool = True) -> TotalLoss:
    """lambda1 * coarse + lambda2 * fine + lambda3 * reg, with gradient w.r.t. ``logits``.

    The confidence part of the fine term needs the relation matrix, so it is
    dropped together with the coarse term when ``use_coarse`` is False.
    """
    probs = softmax_rows(logits)
    grad_p = np.zeros_like(probs)
    parts: dict[str, float] = {"coarse": 0.0, "neighbor": 0.0, "confidence": 0.0, "fine": 0.0, "reg": 0.0}
    clamped = 0
    if use_coarse:
        t = coarse_loss(probs, siblings)
        parts["coarse"] = t.value
        grad_p += weights.lambda1 * t.grad
        clamped += t.clamped
    if use_fine:
        t = neighbor_loss(probs, neighbor_probs)
        parts["neighbor"] = t.value
        grad_p += weights.lambda2 * t.grad
        clamped += t.clamped
        if use_coarse:
            q = target_q(ema_logits, siblings, weights.temperature)
            t = confidence_loss(q, probs)
            parts["confidence"] = t.value
            grad_p += weights.lambda2 * t.grad
            clamped += t.clamped
        parts["fine"] = parts["neighbor"] + parts["confidence"]
    if use_reg:
        t = entropy_reg(probs)
        parts["reg"] = t.value
        grad_p += weights.lambda3 * t.grad
    value = (weights.lambda1 * parts["coarse"] + weights.lambda2 * parts["fine"]
             + weights.lambda3 * parts["reg"])
    parts["total"] = value
    return TotalLoss(float(value), softmax_backward(probs, grad_p), parts, clamped)
