"""Joint multi-task loss and its gradients.

total = alpha * smooth_l1(mos) + beta * ce_smoothed(cls)
        + gamma * (lambda1 * diversity + lambda2 * sparsity)

sparsity is the mean per-sample gate entropy; diversity is the negative
entropy of the batch-mean gate vector.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .numkernel import as_real, log_softmax

_TINY = 1e-300


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.0
    gamma: float = 0.01
    lambda1: float = 1.0
    lambda2: float = 1.0
    epsilon: float = 0.1

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "lambda1", "lambda2", "epsilon"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.epsilon >= 1.0:
            raise ValueError("epsilon must be < 1")

    def with_tasks(self, alpha: float, beta: float) -> "LossWeights":
        return replace(self, alpha=alpha, beta=beta)


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    mos: float
    classification: float
    diversity: float
    sparsity: float


def smooth_l1(pred, target) -> float:
    return float(_smooth_l1(pred, target)[0])


def _smooth_l1(pred, target):
    pred = np.atleast_1d(as_real(pred))
    target = np.atleast_1d(as_real(target))
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: pred {pred.shape} vs target {target.shape}")
    if pred.size == 0:
        raise ValueError("smooth_l1 of empty input")
    d = pred - target
    ad = np.abs(d)
    small = ad < 1.0
    value = np.where(small, 0.5 * d * d, ad - 0.5).mean()
    grad = np.where(small, d, np.sign(d)) / d.size
    return value, grad


def ce_label_smoothed(logits, labels, eps: float) -> float:
    return float(_ce_label_smoothed(logits, labels, eps)[0])


def _ce_label_smoothed(logits, labels, eps: float):
    logits = np.atleast_2d(as_real(logits))
    labels = np.atleast_1d(np.asarray(labels))
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"label smoothing eps must be in [0, 1), got {eps}")
    B, C = logits.shape
    if labels.shape != (B,):
        raise ValueError(f"got {labels.shape[0]} labels for {B} logit rows")
    if np.any(labels < 0) or np.any(labels >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    target = np.full((B, C), eps / C)
    target[np.arange(B), labels.astype(np.int64)] += 1.0 - eps
    logp = log_softmax(logits)
    value = -(target * logp).sum(axis=1).mean()
    grad = (np.exp(logp) - target) / B
    return value, grad


def _entropy(p: np.ndarray) -> np.ndarray:
    return -(p * np.log(np.maximum(p, _TINY))).sum(axis=-1)


def gate_regularizers(gates) -> tuple[float, float]:
    """(diversity, sparsity) for a batch of gate probability vectors."""
    div, sp, _, _ = _gate_regularizers(gates)
    return float(div), float(sp)


def _gate_regularizers(gates):
    g = np.atleast_2d(as_real(gates))
    if g.shape[0] == 0:
        raise ValueError("gate_regularizers needs a nonempty batch")
    if np.any(np.abs(g.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("every gate row must sum to 1")
    B = g.shape[0]
    sparsity = _entropy(g).mean()
    gbar = g.mean(axis=0)
    diversity = -_entropy(gbar)
    d_sparsity = -(np.log(np.maximum(g, _TINY)) + 1.0) / B
    d_diversity = np.broadcast_to((np.log(np.maximum(gbar, _TINY)) + 1.0) / B, g.shape)
    return diversity, sparsity, d_diversity, d_sparsity


def loss_and_grads(fwd, mos_target, labels, w: LossWeights):
    """LossBreakdown plus dL/d(mos_raw), dL/d(logits), dL/d(gates).

    The MOS term is skipped (reported as 0) when alpha is 0, so unlabeled
    auxiliary data can drive classification-only training.
    """
    return _loss_and_grads(fwd, mos_target, labels, w)[:4]


def _loss_and_grads(fwd, mos_target, labels, w: LossWeights):
    mos_raw = np.atleast_1d(fwd.mos_raw)
    logits = np.atleast_2d(fwd.class_logits)
    gates = np.atleast_2d(fwd.gate_weights)
    B = mos_raw.shape[0]
    if logits.shape[0] != B or gates.shape[0] != B:
        raise ValueError("inconsistent batch sizes in forward output")
    if w.alpha > 0:
        mos_target = np.atleast_1d(as_real(mos_target))
        if mos_target.shape != (B,):
            raise ValueError(f"expected {B} MOS targets, got {mos_target.shape}")
        if np.isnan(mos_target).any():
            raise ValueError("MOS targets missing while alpha > 0")
        l_mos, g_mos = _smooth_l1(mos_raw, mos_target)
    else:
        l_mos, g_mos = 0.0, np.zeros(B)
    if w.beta > 0:
        l_cls, g_cls = _ce_label_smoothed(logits, labels, w.epsilon)
    else:
        l_cls, g_cls = 0.0, np.zeros_like(logits)
        if labels is not None:
            l_cls = _ce_label_smoothed(logits, labels, w.epsilon)[0]
    div, sp, g_div, g_sp = _gate_regularizers(gates)
    total = w.alpha * l_mos + w.beta * l_cls + w.gamma * (w.lambda1 * div + w.lambda2 * sp)
    breakdown = LossBreakdown(float(total), float(l_mos), float(l_cls), float(div), float(sp))
    d_gates = w.gamma * (w.lambda1 * g_div + w.lambda2 * g_sp)
    return breakdown, w.alpha * g_mos, w.beta * g_cls, d_gates, total


def total_loss(fwd, mos_target, labels, w: LossWeights) -> LossBreakdown:
    return _loss_and_grads(fwd, mos_target, labels, w)[0]


def objective(fwd, mos_target, labels, w: LossWeights):
    """Total loss as a numpy scalar in the forward pass's own precision."""
    return _loss_and_grads(fwd, mos_target, labels, w)[4]


def task_weight_schedule(stage: int, epoch: int, epochs_in_stage: int) -> tuple[float, float]:
    """(alpha, beta) for a given stage and epoch.

    Stage 1 is classification only, stage 2 moves linearly from 0.3:0.7 at
    its first epoch to 0.7:0.3 at its last, stage 3 holds 0.9:0.1.
    """
    if stage not in (1, 2, 3):
        raise ValueError(f"invalid stage {stage}")
    if not 0 <= epoch < epochs_in_stage:
        raise ValueError(f"epoch {epoch} outside stage of {epochs_in_stage} epochs")
    if stage == 1:
        return 0.0, 1.0
    if stage == 3:
        return 0.9, 0.1
    if epochs_in_stage == 1:
        return 0.3, 0.7
    t = epoch / (epochs_in_stage - 1)
    # convex-combination form hits both endpoints exactly in floating point
    return (1.0 - t) * 0.3 + t * 0.7, (1.0 - t) * 0.7 + t * 0.3
