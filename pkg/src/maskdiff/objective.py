"""Weighted masked cross-entropy (continuous-time NELBO).

Per sequence the loss is ``weight(t) * CE_masked / L`` where

    weight(t) = |alpha'_t| ** p / (1 - alpha_t)

``p`` softens the derivative factor: ``p = 1`` is the full bound, ``p = 0``
leaves ``1 / (1 - alpha_t)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .schedules import Schedule


@dataclass
class LossBreakdown:
    weighted_loss: float
    raw_masked_ce_sum: float
    masked_count: int
    weight: float
    t: float


def nelbo_weight(
    kind: Schedule, t: float, tau: float, p: float, rate_factor: bool = True
) -> float:
    """Scalar loss weight for one sequence at diffusion time ``t``.

    With ``rate_factor=False`` the ``1 / (1 - alpha_t)`` term is dropped, so
    ``p = 0`` gives plain unweighted MLM.
    """
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"derivative power must lie in [0, 1], got {p}")
    deriv = float(kind.alpha_prime_magnitude(t, tau)) ** p
    if not rate_factor:
        return deriv
    return deriv / float(kind.masking_rate(t, tau))


def masked_cross_entropy(logits: torch.Tensor, original: torch.Tensor, mask_indicator: torch.Tensor):
    """Sum of ``-log p(original)`` over masked positions, and the masked count.

    Works on a single sequence ``(L, V)`` or a batch ``(B, L, V)``; in the batch
    case both outputs have shape ``(B,)``.
    """
    if logits.shape[:-1] != original.shape or original.shape != mask_indicator.shape:
        raise ValueError("logits, original and mask_indicator are not aligned")
    if torch.isnan(logits).any():
        raise FloatingPointError("NaN in logits")
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, original.unsqueeze(-1)).squeeze(-1)
    mask = mask_indicator.bool()
    nll = torch.where(mask, nll, torch.zeros_like(nll))
    return nll.sum(dim=-1), mask.sum(dim=-1)


def nelbo_loss(weights, ce_sums, lengths) -> torch.Tensor:
    """Batch mean of ``weight * ce_sum / length``."""
    ce_sums = torch.as_tensor(ce_sums)
    weights = torch.as_tensor(weights, dtype=ce_sums.dtype, device=ce_sums.device)
    lengths = torch.as_tensor(lengths, dtype=ce_sums.dtype, device=ce_sums.device)
    if ce_sums.numel() == 0:
        raise ValueError("need at least one sequence")
    return (weights * ce_sums / lengths).mean()


def breakdown(weight: float, ce_sum: float, masked_count: int, length: int, t: float) -> LossBreakdown:
    return LossBreakdown(
        weighted_loss=weight * ce_sum / length if masked_count else 0.0,
        raw_masked_ce_sum=ce_sum,
        masked_count=masked_count,
        weight=weight,
        t=t,
    )
