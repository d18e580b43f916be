"""Loss functions returning (scalar loss, gradient w.r.t. predictions)."""

from __future__ import annotations

import numpy as np

PROB_CLAMP = 1e-7


def mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all elements."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"mse shape mismatch: pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    n = pred.size
    loss = float(np.sum(diff * diff) / n)
    return loss, 2.0 * diff / n


def weighted_bce(
    pred: np.ndarray,
    target: np.ndarray,
    w_pos: float = 1.0,
    w_neg: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Class-weighted binary cross-entropy on probabilities.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the log; targets
    must be exactly 0 or 1.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"bce shape mismatch: pred {pred.shape} vs target {target.shape}")
    if not np.all((target == 0.0) | (target == 1.0)):
        raise ValueError("weighted_bce targets must be exactly 0 or 1")
    if w_pos <= 0 or w_neg <= 0:
        raise ValueError(f"class weights must be positive, got w_pos={w_pos} w_neg={w_neg}")
    p = np.clip(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    n = pred.size
    loss = float(-np.sum(w_pos * target * np.log(p) + w_neg * (1.0 - target) * np.log1p(-p)) / n)
    grad_p = -(w_pos * target / p - w_neg * (1.0 - target) / (1.0 - p)) / n
    # clamp is flat outside its range, so no gradient flows there
    inside = (pred > PROB_CLAMP) & (pred < 1.0 - PROB_CLAMP)
    return loss, grad_p * inside


def cosine_contrastive(
    emb_a: np.ndarray,
    emb_b: np.ndarray,
    similar: bool,
    margin: float = 0.2,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Contrastive loss on the cosine of an embedding pair.

    Similar pairs pay 1 - cos(a, b); dissimilar pairs pay
    max(0, cos(a, b) - margin).  Returns (loss, grad_a, grad_b).
    """
    a = np.asarray(emb_a, dtype=np.float64)
    b = np.asarray(emb_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"expected two equal-length vectors, got {a.shape} and {b.shape}")
    if not 0.0 <= margin < 1.0:
        raise ValueError(f"margin must be in [0, 1), got {margin}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine_contrastive requires non-zero vectors")
    cos = float(a @ b / (na * nb))
    dcos_da = b / (na * nb) - cos * a / (na * na)
    dcos_db = a / (na * nb) - cos * b / (nb * nb)
    if similar:
        return 1.0 - cos, -dcos_da, -dcos_db
    if cos > margin:
        return cos - margin, dcos_da, dcos_db
    return 0.0, np.zeros_like(a), np.zeros_like(b)


def softmax_cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of a softmax over raw logits against an integer label.

    Used by the category classifier; the gradient is softmax(logits) minus
    the one-hot label.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError(f"expected a logit vector, got shape {z.shape}")
    if not 0 <= label < z.shape[0]:
        raise ValueError(f"label {label} out of range for {z.shape[0]} classes")
    shifted = z - z.max()
    logsumexp = float(np.log(np.sum(np.exp(shifted))))
    loss = logsumexp - float(shifted[label])
    probs = np.exp(shifted - logsumexp)
    grad = probs.copy()
    grad[label] -= 1.0
    return loss, grad
