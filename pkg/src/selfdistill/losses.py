"""Distillation losses for self-knowledge distillation.

Two layers live here. The distribution-level primitives
(:func:`softened_distribution`, :func:`cross_entropy`, :func:`kl_divergence`)
take probability tensors and clamp log arguments at ``EPS``. The composite
losses (:func:`hard_label_loss`, :func:`reverse_guidance_loss`,
:func:`drg_loss`, :func:`shape_regularization_loss`, :func:`dsr_loss`,
:func:`combined_loss`) take raw logits and work in log space, which is what
the trainers back-propagate through.

Every function accepts a single vector of shape ``(K,)`` or a batch of shape
``(B, K)``. Per-sample values are averaged over the batch unless
``reduction="none"``.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import Tensor

__all__ = [
    "EPS",
    "RankedLogits",
    "softened_distribution",
    "log_softened",
    "cross_entropy",
    "kl_divergence",
    "kd_loss",
    "classification_loss",
    "rank_ascending",
    "hard_label_loss",
    "reverse_guidance_loss",
    "drg_loss",
    "shape_regularization_loss",
    "dsr_loss",
    "combined_loss",
]

EPS = 1e-12


class RankedLogits(NamedTuple):
    """Row-wise ascending logits plus the permutation that produced them.

    ``values == logits.gather(-1, permutation)``.
    """

    values: Tensor
    permutation: Tensor


def _check_finite(x: Tensor, name: str) -> None:
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite entries")


def _check_tau(tau: float) -> None:
    if not (tau > 0 and math.isfinite(tau)):
        raise ValueError(f"temperature must be a positive finite number, got {tau!r}")


def _check_coefficient(value: float, name: str) -> None:
    if not value >= 0:
        raise ValueError(f"{name} must be >= 0, got {value!r}")


def _same_k(a: Tensor, b: Tensor) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"class count mismatch: {a.shape[-1]} vs {b.shape[-1]}")


def _reduce(per_sample: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return per_sample.mean()
    if reduction == "none":
        return per_sample
    raise ValueError(f"unknown reduction {reduction!r}")


def _non_negative(kl: Tensor) -> Tensor:
    # rounding can push a KL value a few ulps below zero; clamp the value, keep the gradient
    return kl + (kl.clamp_min(0.0) - kl).detach()


def _true_class(logp: Tensor, y: Tensor | int) -> Tensor:
    y = torch.as_tensor(y, device=logp.device)
    if logp.dim() == 1:
        if y.dim() != 0:
            raise ValueError("a single distribution needs a scalar label")
        k = int(y)
        if not 0 <= k < logp.shape[-1]:
            raise ValueError(f"label {k} outside [0, {logp.shape[-1]})")
        return logp[k]
    if y.shape != logp.shape[:1]:
        raise ValueError(f"labels of shape {tuple(y.shape)} do not match batch {logp.shape[0]}")
    if (y < 0).any() or (y >= logp.shape[-1]).any():
        raise ValueError(f"labels outside [0, {logp.shape[-1]})")
    return logp.gather(-1, y.long().unsqueeze(-1)).squeeze(-1)


# ---------------------------------------------------------------------------
# distribution-level primitives


def softened_distribution(z: Tensor, tau: float = 1.0) -> Tensor:
    """Temperature softmax ``exp(z/tau) / sum(exp(z/tau))`` along the last axis.

    The max logit is subtracted before exponentiation.
    """
    _check_tau(tau)
    _check_finite(z, "logits")
    scaled = z / tau
    scaled = scaled - scaled.max(dim=-1, keepdim=True).values.detach()
    e = scaled.exp()
    return e / e.sum(dim=-1, keepdim=True)


def log_softened(z: Tensor, tau: float = 1.0) -> Tensor:
    """Log of :func:`softened_distribution`, computed without leaving log space."""
    _check_tau(tau)
    _check_finite(z, "logits")
    return F.log_softmax(z / tau, dim=-1)


def cross_entropy(p: Tensor, y: Tensor | int, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood ``-log p_y`` of a probability distribution."""
    logp = p.clamp_min(EPS).log()
    return _reduce(-_true_class(logp, y), reduction)


def kl_divergence(q: Tensor, p: Tensor, reduction: str = "mean") -> Tensor:
    """``KL(q || p) = sum_k q_k (log q_k - log p_k)``; ``q`` is the target.

    Both inputs are renormalised first, so distributions that are only
    normalised to within rounding still give a non-negative value.
    """
    _same_k(q, p)
    q = q / q.sum(dim=-1, keepdim=True)
    p = p / p.sum(dim=-1, keepdim=True)
    per_sample = _non_negative((q * (q.clamp_min(EPS).log() - p.clamp_min(EPS).log())).sum(dim=-1))
    return _reduce(per_sample, reduction)


def kd_loss(
    p: Tensor,
    y: Tensor | int,
    q_soft: Tensor,
    p_soft: Tensor,
    tau: float,
    reduction: str = "mean",
) -> Tensor:
    """Vanilla KD objective ``CE(p, y) + tau^2 * KL(q_soft || p_soft)``.

    ``p`` is the student at temperature 1; ``q_soft`` and ``p_soft`` are
    teacher and student softened at ``tau``.
    """
    _check_tau(tau)
    per_sample = cross_entropy(p, y, "none") + tau**2 * kl_divergence(q_soft, p_soft, "none")
    return _reduce(per_sample, reduction)


# ---------------------------------------------------------------------------
# logit-level composites used for training


def _ce_logits(z: Tensor, y: Tensor | int) -> Tensor:
    return -_true_class(log_softened(z, 1.0), y)


def _kl_logits(target_logits: Tensor, z: Tensor, tau: float) -> Tensor:
    log_q = log_softened(target_logits, tau)
    log_p = log_softened(z, tau)
    return _non_negative((log_q.exp() * (log_q - log_p)).sum(dim=-1))


def classification_loss(logits: Tensor, y: Tensor | int, reduction: str = "mean") -> Tensor:
    """Cross-entropy of raw logits against hard labels."""
    return _reduce(_ce_logits(logits, y), reduction)


def rank_ascending(z: Tensor) -> RankedLogits:
    """Sort each row of ``z`` ascending; ties keep their original order.

    Gradients w.r.t. the sorted values flow back to the original positions.
    """
    _check_finite(z, "logits")
    values, permutation = torch.sort(z, dim=-1, stable=True)
    return RankedLogits(values, permutation)


def hard_label_loss(
    aux_logits: Tensor, logits: Tensor, y: Tensor | int, reduction: str = "mean"
) -> Tensor:
    """Cross-entropy of the auxiliary teacher plus that of the whole model."""
    _same_k(aux_logits, logits)
    return _reduce(_ce_logits(aux_logits, y) + _ce_logits(logits, y), reduction)


def reverse_guidance_loss(
    aux_logits: Tensor, logits: Tensor, tau: float, reduction: str = "mean"
) -> Tensor:
    """``tau^2 * KL(q || p)`` with the auxiliary teacher's ``q`` as target.

    Nothing is detached here; callers that want a frozen target pass
    ``aux_logits.detach()``.
    """
    _same_k(aux_logits, logits)
    return _reduce(tau**2 * _kl_logits(aux_logits, logits, tau), reduction)


def drg_loss(
    aux_logits: Tensor,
    logits: Tensor,
    y: Tensor | int,
    tau: float,
    alpha: float,
    reduction: str = "mean",
    *,
    detach_teacher: bool = False,
) -> Tensor:
    """Reverse-guidance objective: hard-label loss + ``alpha`` * reverse guidance.

    With ``detach_teacher`` the KL target carries no gradient; the teacher
    still learns from its own cross-entropy term.
    """
    _check_coefficient(alpha, "alpha")
    target = aux_logits.detach() if detach_teacher else aux_logits
    per_sample = hard_label_loss(aux_logits, logits, y, "none") + alpha * reverse_guidance_loss(
        target, logits, tau, "none"
    )
    return _reduce(per_sample, reduction)


def shape_regularization_loss(
    prev_ranked: Tensor, cur_ranked: Tensor, tau: float, reduction: str = "mean"
) -> Tensor:
    """``tau^2 * KL(softmax(prev/tau) || softmax(cur/tau))`` on ranked logits.

    ``prev_ranked`` is a stored constant and is detached here.
    ``cur_ranked`` should be ``rank_ascending(z).values`` so gradients reach
    the original logits through the sort.
    """
    if prev_ranked.shape != cur_ranked.shape:
        raise ValueError(
            f"ranked shapes differ: {tuple(prev_ranked.shape)} vs {tuple(cur_ranked.shape)}"
        )
    _check_tau(tau)
    per_sample = tau**2 * _kl_logits(prev_ranked.detach(), cur_ranked, tau)
    return _reduce(per_sample, reduction)


def dsr_loss(
    logits: Tensor,
    y: Tensor | int,
    sr: Tensor,
    beta: float,
    reduction: str = "mean",
) -> Tensor:
    """``CE(p, y) + beta * sr``.

    ``sr`` is a per-sample shape-regularization tensor (``reduction="none"``)
    or a scalar that is broadcast over the batch.
    """
    _check_coefficient(beta, "beta")
    return _reduce(_ce_logits(logits, y) + beta * sr, reduction)


def combined_loss(
    aux_logits: Tensor,
    logits: Tensor,
    y: Tensor | int,
    sr: Tensor,
    tau: float,
    alpha: float,
    beta: float,
    reduction: str = "mean",
    *,
    detach_teacher: bool = False,
) -> Tensor:
    """Hard-label loss + ``alpha`` * reverse guidance + ``beta`` * shape term.

    ``tau`` is the reverse-guidance temperature; ``sr`` arrives already
    computed at its own temperature.
    """
    _check_coefficient(beta, "beta")
    drg = drg_loss(aux_logits, logits, y, tau, alpha, "none", detach_teacher=detach_teacher)
    return _reduce(drg + beta * sr, reduction)
