"""Contrastive and distillation losses with closed-form gradients.

Stage 1 uses the in-batch softmax contrastive loss over a square score
matrix (positives on the diagonal). Stage 2 widens each row to
[positive | hard negatives | in-batch negatives] and optionally adds a
KL distillation term against teacher scores for the first block. All
gradients are analytic; finite_difference_grad is the independent check.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NonPositiveTemperature, NonSquareMatrix, ShapeMismatch


@dataclass
class LossOutput:
    """Scalar loss (nats) and its gradient w.r.t. the input score matrix."""

    loss: float
    grad_scores: np.ndarray


def _check_tau(tau: float, name: str = "tau") -> float:
    tau = float(tau)
    if not tau > 0.0:
        raise NonPositiveTemperature(f"{name} must be > 0, got {tau}")
    return tau


def _softmax_rows(scores: np.ndarray, tau: float) -> np.ndarray:
    z = scores / tau
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax_rows(scores: np.ndarray, tau: float) -> np.ndarray:
    z = scores / tau
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _contrastive(scores: np.ndarray, tau: float, positive_col: np.ndarray) -> LossOutput:
    """Mean negative log-softmax of the positive column per row."""
    n = scores.shape[0]
    log_probs = _log_softmax_rows(scores, tau)
    loss = -float(log_probs[np.arange(n), positive_col].mean())
    grad = _softmax_rows(scores, tau)
    grad[np.arange(n), positive_col] -= 1.0
    grad /= n * tau
    return LossOutput(loss, grad)


def info_nce(scores, tau: float, bidirectional: bool = False) -> LossOutput:
    """In-batch contrastive loss; entry (i, i) is query i's positive.

    With bidirectional=True the symmetric (column-wise) direction is
    averaged in; the default is the one-directional query->candidates form.
    """
    s = np.asarray(scores, dtype=np.float64)
    tau = _check_tau(tau)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise NonSquareMatrix(f"expected a square score matrix, got shape {s.shape}")
    diag = np.arange(s.shape[0])
    out = _contrastive(s, tau, diag)
    if bidirectional:
        rev = _contrastive(s.T, tau, diag)
        out = LossOutput(0.5 * (out.loss + rev.loss), 0.5 * (out.grad_scores + rev.grad_scores.T))
    return out


def kd_divergence(teacher, student, tau_teacher: float = 1.0, tau_student: float = 1.0) -> LossOutput:
    """Mean per-row KL(softmax(teacher/tau_t) || softmax(student/tau_s)).

    The gradient is taken with respect to the student scores; the teacher
    is a constant.
    """
    t = np.asarray(teacher, dtype=np.float64)
    s = np.asarray(student, dtype=np.float64)
    tau_t = _check_tau(tau_teacher, "tau_teacher")
    tau_s = _check_tau(tau_student, "tau_student")
    if t.shape != s.shape:
        raise ShapeMismatch(f"teacher shape {t.shape} != student shape {s.shape}")
    if t.ndim != 2 or t.shape[1] < 2:
        raise ShapeMismatch(f"need >= 2 candidates per query, got shape {t.shape}")
    n = t.shape[0]
    p = _softmax_rows(t, tau_t)
    log_q = _log_softmax_rows(s, tau_s)
    log_p = _log_softmax_rows(t, tau_t)
    loss = float((p * (log_p - log_q)).sum(axis=1).mean())
    grad = (_softmax_rows(s, tau_s) - p) / (n * tau_s)
    return LossOutput(loss, grad)


def finetune_loss(
    student_scores,
    teacher=None,
    tau: float = 0.01,
    alpha: float = 1.0,
    tau_teacher: float = 1.0,
    tau_student: float = 1.0,
) -> LossOutput:
    """Fine-tuning objective over rows laid out [positive | hard | in-batch].

    Column 0 holds each query's positive. When teacher scores are given
    they cover the leading columns (positive + hard negatives) and add
    alpha * KL distillation restricted to that block. A single-column
    teacher block is degenerate (both distributions are trivially equal)
    and contributes zero.
    """
    s = np.asarray(student_scores, dtype=np.float64)
    tau = _check_tau(tau)
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if s.ndim != 2 or s.shape[1] < 1:
        raise ShapeMismatch(f"expected a 2-D score matrix, got shape {s.shape}")
    out = _contrastive(s, tau, np.zeros(s.shape[0], dtype=np.intp))
    if teacher is None or alpha == 0.0:
        return out
    t = np.asarray(teacher, dtype=np.float64)
    if t.ndim != 2 or t.shape[0] != s.shape[0] or t.shape[1] > s.shape[1]:
        raise ShapeMismatch(
            f"teacher shape {t.shape} incompatible with student shape {s.shape}"
        )
    if t.shape[1] < 2:
        return out
    kd = kd_divergence(t, s[:, : t.shape[1]], tau_teacher, tau_student)
    grad = out.grad_scores
    grad[:, : t.shape[1]] += alpha * kd.grad_scores
    return LossOutput(out.loss + alpha * kd.loss, grad)


def finite_difference_grad(
    f: Callable[[np.ndarray], float], x, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function of a matrix."""
    if not eps > 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        bumped = x.copy()
        bumped[idx] = x[idx] + eps
        hi = f(bumped)
        bumped[idx] = x[idx] - eps
        lo = f(bumped)
        grad[idx] = (hi - lo) / (2.0 * eps)
        it.iternext()
    return grad
