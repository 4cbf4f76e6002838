"""Contrastive, captioning and text-guided reconstruction losses."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .tokenizer import CLS, PAD


@dataclass(frozen=True)
class LossBreakdown:
    l_itc: float
    l_ic: float
    l_tm: float
    total: float
    lambda_ic: float
    lambda_tm: float

    def as_row(self) -> tuple[float, float, float, float]:
        return (self.l_itc, self.l_ic, self.l_tm, self.total)


def itc_loss(img_embs: torch.Tensor, txt_embs: torch.Tensor, logit_scale) -> tuple[torch.Tensor, torch.Tensor]:
    """Symmetric InfoNCE over a batch of matched, unit-norm embedding pairs.

    Returns the loss and the raw (unscaled) N x N similarity matrix with
    images on rows.
    """
    n = img_embs.shape[0]
    if n < 2 or txt_embs.shape[0] != n:
        raise ValueError(f"itc_loss needs N >= 2 matched pairs, got {n} and {txt_embs.shape[0]}")
    sims = img_embs @ txt_embs.T
    logits = logit_scale * sims
    if not bool(torch.isfinite(logits).all()):
        raise FloatingPointError("non-finite contrastive logits")
    labels = torch.arange(n, device=sims.device)
    loss = 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))
    return loss, sims


def caption_targets(token_ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Shift ids left by one; the loss covers predictions of content and EOS only."""
    targets = torch.cat([token_ids[:, 1:], torch.full_like(token_ids[:, :1], PAD)], dim=1)
    loss_mask = (targets != PAD) & (targets != CLS)
    return targets, loss_mask


def ic_loss(logits: torch.Tensor, target_ids: torch.Tensor, loss_mask: torch.Tensor) -> torch.Tensor:
    """Teacher-forced next-token NLL, averaged over masked positions then over sequences.

    Accepts a single sequence ``(L, V)`` or a batch ``(N, L, V)``.
    """
    if logits.dim() == 2:
        logits, target_ids, loss_mask = logits[None], target_ids[None], loss_mask[None]
    loss_mask = loss_mask.to(torch.bool)
    counts = loss_mask.sum(dim=1)
    if bool((counts == 0).any()):
        raise ValueError("ic_loss: empty loss mask")
    nll = -logits.log_softmax(dim=-1).gather(-1, target_ids.unsqueeze(-1)).squeeze(-1)
    # where() rather than multiply so out-of-mask logits cannot leak in (even as inf/nan)
    nll = torch.where(loss_mask, nll, torch.zeros_like(nll))
    per_seq = nll.sum(dim=1) / counts.to(nll.dtype)
    return per_seq.mean()


def tgmim_loss(
    pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor, reduction: str = "pixel"
) -> torch.Tensor:
    """Masked-patch L1 in pixel space.

    ``pixel``: sum of |target - pred| over masked patches divided by the
    number of masked pixel values. ``sum``: the raw masked L1 sum per image,
    averaged over the batch. Accepts ``(P, D)`` or ``(N, P, D)``.
    """
    if pred.dim() == 2:
        pred, target, mask = pred[None], target[None], mask[None]
    mask = mask.to(torch.bool)
    n_masked = int(mask.sum())
    if n_masked == 0:
        raise ValueError("tgmim_loss: mask selects no patches")
    err = (target - pred).abs()
    err = torch.where(mask.unsqueeze(-1), err, torch.zeros_like(err))
    if reduction == "sum":
        return err.sum() / pred.shape[0]
    return err.sum() / (n_masked * pred.shape[-1])


def total_loss(l_itc, l_ic, l_tm, lambda_ic: float, lambda_tm: float):
    """Weighted sum; a disabled objective is passed as ``None`` and contributes 0."""
    zero = None
    for t in (l_itc, l_ic, l_tm):
        if t is not None:
            zero = torch.zeros((), dtype=t.dtype)
            break
    if zero is None:
        raise ValueError("no objective enabled")
    l_itc = zero if l_itc is None else l_itc
    l_ic = zero if l_ic is None else l_ic
    l_tm = zero if l_tm is None else l_tm
    total = l_itc + lambda_ic * l_ic + lambda_tm * l_tm
    return total, LossBreakdown(
        l_itc=l_itc.item(), l_ic=l_ic.item(), l_tm=l_tm.item(), total=total.item(),
        lambda_ic=lambda_ic, lambda_tm=lambda_tm,
    )
