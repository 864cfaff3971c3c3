"""Training losses with analytic gradients w.r.t. pre-softmax logits.

Three terms: transferability-weighted cross-entropy on labeled source
pixels, symmetric cross-entropy on pseudo-labeled target pixels, and a KL
consistency term against a frozen teacher.  Reduction defaults to a plain
sum over contributing pixels; "mean" divides by their count.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .dataio import LabelMap, ProbMap, require_same_grid
from .errors import ShapeError, ValidationError
from .pla import PseudoLabelMap
from .stm import TransferabilityMap

PROB_FLOOR = 1e-12
LABEL_CLAMP = 1e-4
DEFAULT_ALPHA = 0.1
DEFAULT_BETA = 1.0
DEFAULT_LAMBDA = 20.0
DEFAULT_EMA = 0.999


@dataclass(frozen=True)
class LossValue:
    """Scalar loss with its per-term breakdown and the logit gradient."""

    total: float
    ce: float = 0.0
    sce: float = 0.0
    consist: float = 0.0
    gradient: np.ndarray | None = None  # same (H, W, C) as the prediction


def _check_reduction(reduction: str) -> None:
    if reduction not in ("sum", "mean"):
        raise ValidationError(f"reduction must be 'sum' or 'mean', got {reduction!r}")


def _valid_labels(labels: np.ndarray, classes: int) -> np.ndarray:
    if labels.max(initial=-1) >= classes:
        raise ValidationError("labels reference classes beyond the prediction map")
    return labels >= 0


def weighted_ce(
    pred: ProbMap,
    gt: LabelMap,
    w: TransferabilityMap,
    reduction: str = "sum",
) -> LossValue:
    """Per-pixel cross-entropy scaled by the transferability weight."""
    _check_reduction(reduction)
    require_same_grid(pred, gt, w)
    labels = gt.flat()
    valid = _valid_labels(labels, pred.classes)
    weights = w.weights.reshape(-1)

    probs = pred.flat()
    grad = np.zeros_like(probs)
    idx = np.flatnonzero(valid)
    cls = labels[idx]
    wv = weights[idx]
    logp = np.log(np.maximum(probs[idx, cls], PROB_FLOOR))
    loss = float(-(wv * logp).sum())
    grad[idx] = probs[idx] * wv[:, None]
    grad[idx, cls] -= wv
    if reduction == "mean":
        scale = 1.0 / max(idx.size, 1)
        loss *= scale
        grad *= scale
    return LossValue(
        total=loss, ce=loss, gradient=grad.reshape(pred.height, pred.width, pred.classes)
    )


def sce(
    pred: ProbMap,
    pl: PseudoLabelMap,
    alpha: float = DEFAULT_ALPHA,
    beta: float = DEFAULT_BETA,
    reduction: str = "sum",
) -> LossValue:
    """Symmetric cross-entropy against clamped one-hot pseudo labels.

    The reverse term treats log(0) as log(LABEL_CLAMP); pixels without a
    pseudo label contribute nothing.
    """
    _check_reduction(reduction)
    require_same_grid(pred, pl)
    labels = pl.labels.reshape(-1)
    valid = _valid_labels(labels, pred.classes)

    probs = pred.flat()
    grad = np.zeros_like(probs)
    idx = np.flatnonzero(valid)
    loss = 0.0
    if idx.size:
        p = probs[idx]
        cls = labels[idx]
        rows = np.arange(idx.size)
        forward = -np.log(np.maximum(p[rows, cls], PROB_FLOOR))
        # log of the clamped one-hot label: 0 at the assigned class, log(clamp) elsewhere
        log_label = np.full_like(p, np.log(LABEL_CLAMP))
        log_label[rows, cls] = 0.0
        reverse = -(p * log_label).sum(axis=1)
        loss = float(alpha * forward.sum() + beta * reverse.sum())
        g = alpha * p.copy()
        g[rows, cls] -= alpha
        inner = (p * log_label).sum(axis=1, keepdims=True)
        g += beta * p * (inner - log_label)
        grad[idx] = g
    if reduction == "mean":
        scale = 1.0 / max(idx.size, 1)
        loss *= scale
        grad *= scale
    return LossValue(
        total=loss, sce=loss, gradient=grad.reshape(pred.height, pred.width, pred.classes)
    )


def kld_consistency(student: ProbMap, teacher: ProbMap, reduction: str = "sum") -> LossValue:
    """KL(teacher || student) summed over pixels; the teacher is a constant."""
    _check_reduction(reduction)
    require_same_grid(student, teacher)
    if student.classes != teacher.classes:
        raise ShapeError("student and teacher disagree on the number of classes")
    p = student.flat()
    q = teacher.flat()
    log_p = np.log(np.maximum(p, PROB_FLOOR))
    log_q = np.log(np.maximum(q, PROB_FLOOR))
    loss = float((q * (log_q - log_p)).sum())
    grad = p - q
    if reduction == "mean":
        scale = 1.0 / max(p.shape[0], 1)
        loss *= scale
        grad = grad * scale
    return LossValue(
        total=loss,
        consist=loss,
        gradient=grad.reshape(student.height, student.width, student.classes),
    )


def total_loss(
    ce: LossValue, sce_term: LossValue, consist: LossValue, lam: float = DEFAULT_LAMBDA
) -> LossValue:
    """Combine the three terms; gradients add when co-located, else concatenate.

    Terms computed on disjoint pixel sets (source vs. target batches) end up
    stacked as one flat (N, C) gradient.
    """
    total = ce.total + sce_term.total + lam * consist.total
    parts = [
        (term.gradient, scale)
        for term, scale in ((ce, 1.0), (sce_term, 1.0), (consist, lam))
        if term.gradient is not None
    ]
    gradient = None
    if parts:
        shapes = {g.shape for g, _ in parts}
        if len(shapes) == 1:
            gradient = sum(scale * g for g, scale in parts)
        else:
            classes = {g.shape[-1] for g, _ in parts}
            if len(classes) != 1:
                raise ShapeError("cannot combine gradients over different class counts")
            gradient = np.concatenate(
                [(scale * g).reshape(-1, g.shape[-1]) for g, scale in parts], axis=0
            )
    return LossValue(
        total=total,
        ce=ce.total,
        sce=sce_term.total,
        consist=consist.total,
        gradient=gradient,
    )


def ema_update(
    teacher: Mapping[str, np.ndarray],
    student: Mapping[str, np.ndarray],
    m: float = DEFAULT_EMA,
) -> dict[str, np.ndarray]:
    """Exponential moving average of parameter arrays: m*teacher + (1-m)*student."""
    if not (0.0 <= m <= 1.0):
        raise ValidationError(f"EMA coefficient must be in [0, 1], got {m}")
    if set(teacher) != set(student):
        raise ShapeError("teacher and student expose different parameter names")
    out = {}
    for name, t in teacher.items():
        s = student[name]
        if np.shape(t) != np.shape(s):
            raise ShapeError(f"parameter {name!r} shape mismatch: {np.shape(t)} vs {np.shape(s)}")
        out[name] = m * np.asarray(t, dtype=np.float64) + (1.0 - m) * np.asarray(
            s, dtype=np.float64
        )
    return out
