"""Training objectives with analytic gradients.

Every function returns a :class:`LossResult`. ``grad_embeddings`` is always the
gradient with respect to the first matrix argument (embeddings, first view, or
student logits, depending on the loss).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .etf import AllocationLedger, EtfFrame
from .numkit import l2_normalize_backward, l2_normalize_rows, logsumexp, softmax


class DegenerateBatchError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.07
    lambda_rep: float = 0.35
    lambda_A: float = 0.7
    epsilon: float = 2.0
    teacher_temp: float = 0.05
    literal_eq5_denominator: bool = False

    def __post_init__(self):
        if self.tau <= 0 or self.teacher_temp <= 0:
            raise ValueError("tau and teacher_temp must be positive")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if not 0 <= self.lambda_rep <= 1:
            raise ValueError("lambda_rep must lie in [0, 1]")
        if self.lambda_A < 0:
            raise ValueError("lambda_A must be non-negative")


@dataclass
class LossResult:
    value: float
    grad_embeddings: np.ndarray
    grad_view_b: np.ndarray | None = None
    grad_weights: np.ndarray | None = None


def _add(a, b):
    if a is None:
        return None if b is None else b.copy()
    if b is None:
        return a.copy()
    if a.shape != b.shape:
        raise ValueError(f"gradient shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def combine(terms: list[tuple[float, LossResult]]) -> LossResult:
    """Weighted sum of loss results; missing gradients count as zero."""
    value = 0.0
    ge = gb = gw = None
    for w, r in terms:
        value += w * r.value
        ge = _add(ge, None if r.grad_embeddings is None else w * r.grad_embeddings)
        gb = _add(gb, None if r.grad_view_b is None else w * r.grad_view_b)
        gw = _add(gw, None if r.grad_weights is None else w * r.grad_weights)
    return LossResult(float(value), ge, gb, gw)


def _alignment(embeddings: np.ndarray, targets: np.ndarray) -> LossResult:
    E = np.asarray(embeddings, dtype=np.float64)
    E_hat, norms = l2_normalize_rows(E)
    n = E.shape[0]
    value = -float(np.sum(E_hat * targets)) / n
    grad = l2_normalize_backward(E_hat, norms, -targets / n)
    return LossResult(value, grad)


def supervised_alignment(embeddings, labels, frame: EtfFrame, ledger: AllocationLedger) -> LossResult:
    """Pull each normalized embedding towards the prototype bound to its label."""
    cols = ledger.columns(np.asarray(labels).tolist())
    return _alignment(embeddings, frame.P[:, cols].T)


def unsup_alignment(embeddings, prototype_indices, frame: EtfFrame) -> LossResult:
    idx = np.asarray(prototype_indices, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= frame.K):
        raise IndexError(f"prototype index out of range [0, {frame.K})")
    if len(idx) != len(embeddings) or len(idx) == 0:
        raise ValueError("need one prototype index per embedding and at least one row")
    return _alignment(embeddings, frame.P[:, idx].T)


def unsup_contrastive(view_a, view_b, cfg: LossConfig) -> LossResult:
    """InfoNCE between two views; negatives are the other first-view rows.

    With ``cfg.literal_eq5_denominator`` the positive pair is dropped from the
    denominator.
    """
    a = np.asarray(view_a, dtype=np.float64)
    b = np.asarray(view_b, dtype=np.float64)
    B = a.shape[0]
    if B < 2:
        raise DegenerateBatchError("contrastive loss needs at least 2 samples")
    if b.shape != a.shape:
        raise ValueError("views must have the same shape")
    tau = cfg.tau
    pos = np.sum(a * b, axis=1) / tau
    neg = a @ a.T / tau
    np.fill_diagonal(neg, -np.inf)
    if cfg.literal_eq5_denominator:
        full = neg
    else:
        full = np.concatenate([pos[:, None], neg], axis=1)
    lse = logsumexp(full, axis=1)
    value = float(np.mean(lse - pos))

    w = np.exp(full - lse[:, None])
    if cfg.literal_eq5_denominator:
        w_pos = np.zeros(B)
        w_neg = w
    else:
        w_pos, w_neg = w[:, 0], w[:, 1:]
    c = (w_pos - 1.0) / B
    grad_a = (c[:, None] * b + (w_neg + w_neg.T) @ a / B) / tau
    grad_b = c[:, None] * a / tau
    return LossResult(value, grad_a, grad_b)


def sup_contrastive(view_a, labels, cfg: LossConfig) -> LossResult:
    a = np.asarray(view_a, dtype=np.float64)
    y = np.asarray(labels)
    B = a.shape[0]
    S = a @ a.T / cfg.tau
    np.fill_diagonal(S, -np.inf)
    pos_mask = (y[:, None] == y[None, :]) & ~np.eye(B, dtype=bool)
    n_pos = pos_mask.sum(axis=1)
    valid = n_pos > 0
    if not np.any(valid):
        raise DegenerateBatchError("every label in the batch is unique; no positive pairs")
    lse = logsumexp(S, axis=1)
    log_prob = np.where(pos_mask, S - lse[:, None], 0.0)
    per_anchor = -log_prob.sum(axis=1)[valid] / n_pos[valid]
    V = int(valid.sum())
    value = float(np.mean(per_anchor))

    soft = np.exp(S - lse[:, None])
    G = np.zeros((B, B))
    G[valid] = (soft[valid] - pos_mask[valid] / n_pos[valid, None]) / V
    grad = (G + G.T) @ a / cfg.tau
    return LossResult(value, grad)


def base_rep(view_a, view_b, labels, cfg: LossConfig) -> LossResult:
    """(1 - lambda_rep) * unsupervised + lambda_rep * supervised contrastive."""
    lam = cfg.lambda_rep
    terms = []
    if lam < 1:
        terms.append((1.0 - lam, unsup_contrastive(view_a, view_b, cfg)))
    if lam > 0:
        terms.append((lam, sup_contrastive(view_a, labels, cfg)))
    r = combine(terms)
    if r.grad_view_b is None:
        r.grad_view_b = np.zeros_like(np.asarray(view_b, dtype=np.float64))
    return r


def cls_cross_entropy(embeddings, labels, W) -> LossResult:
    E = np.asarray(embeddings, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    K = W.shape[1]
    if np.any(y < 0) or np.any(y >= K):
        raise IndexError(f"label out of range [0, {K})")
    B = E.shape[0]
    logits = E @ W
    lse = logsumexp(logits, axis=1)
    value = float(np.mean(lse - logits[np.arange(B), y]))
    G = softmax(logits)
    G[np.arange(B), y] -= 1.0
    G /= B
    return LossResult(value, G @ W.T, grad_weights=E.T @ G)


def unsup_cls(student_logits, teacher_logits, cfg: LossConfig) -> LossResult:
    """Cross-entropy to a sharpened, gradient-blocked teacher minus epsilon * H(mean prediction).

    The returned gradient is with respect to ``student_logits``.
    """
    s_logits = np.asarray(student_logits, dtype=np.float64)
    t_logits = np.asarray(teacher_logits, dtype=np.float64)
    if s_logits.shape != t_logits.shape or s_logits.ndim != 2 or s_logits.shape[1] < 1:
        raise ValueError("student and teacher logits must share a (B, K) shape with K >= 1")
    B = s_logits.shape[0]
    z = softmax(t_logits, cfg.teacher_temp)
    log_s = s_logits - logsumexp(s_logits, axis=1)[:, None]
    s = np.exp(log_s)
    ce = -np.sum(z * log_s) / B
    s_bar = s.mean(axis=0)
    log_s_bar = np.log(np.maximum(s_bar, np.finfo(float).tiny))
    h_bar = -float(np.sum(s_bar * log_s_bar))
    value = float(ce - cfg.epsilon * h_bar)

    grad = (s - z) / B
    if cfg.epsilon:
        g = -(log_s_bar + 1.0)
        dh = s * (g[None, :] - (s @ g)[:, None]) / B
        grad = grad - cfg.epsilon * dh
    return LossResult(value, grad)


def base_total(align: LossResult | None, rep: LossResult, cls: LossResult) -> LossResult:
    """Base-session objective: alignment + contrastive + cross-entropy."""
    terms = [(1.0, rep), (1.0, cls)]
    if align is not None:
        terms.insert(0, (1.0, align))
    return combine(terms)


def incremental_total(align: LossResult | None, rep: LossResult, cls: LossResult, cfg: LossConfig) -> LossResult:
    """Discovery-session objective: lambda_A * alignment + contrastive + classification."""
    terms = [(1.0, rep), (1.0, cls)]
    if align is not None:
        terms.insert(0, (cfg.lambda_A, align))
    return combine(terms)
