"""Attentive patch masking driven by token-wise max image-text similarity.

Patches whose embeddings best match some caption token get the *high* mask
(reconstructed from text); the least related patches get the *low* mask
(hidden from the captioner).
"""

from __future__ import annotations

import numpy as np
import torch

from .config import ConfigError

EPS = 1e-8


def patch_scores(
    image_tokens: torch.Tensor, text_tokens: torch.Tensor, text_keep: torch.Tensor
) -> torch.Tensor:
    """s_i = max_j <v_i/|v_i|, w_j/|w_j|> over kept text positions j.

    Accepts unbatched ``(P, d), (S, d), (S,)`` or batched ``(N, P, d),
    (N, S, d), (N, S)`` inputs. The result carries no gradient.
    """
    unbatched = image_tokens.dim() == 2
    if unbatched:
        image_tokens, text_tokens, text_keep = (
            image_tokens[None], text_tokens[None], text_keep[None]
        )
    text_keep = torch.as_tensor(text_keep, dtype=torch.bool)
    if not bool(text_keep.any(dim=1).all()):
        raise ValueError("patch_scores needs at least one kept text token per example")
    with torch.no_grad():
        v = image_tokens / image_tokens.norm(dim=-1, keepdim=True).clamp_min(EPS)
        w = text_tokens / text_tokens.norm(dim=-1, keepdim=True).clamp_min(EPS)
        sim = v @ w.transpose(-2, -1)
        sim = sim.masked_fill(~text_keep.unsqueeze(1), float("-inf"))
        scores = sim.max(dim=-1).values
    return scores[0] if unbatched else scores


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def mask_counts(num_patches: int, r_h: float, r_l: float) -> tuple[int, int]:
    if not (0.0 <= r_h <= 1.0 and 0.0 <= r_l <= 1.0) or r_h + r_l > 1.0 + 1e-12:
        raise ConfigError(f"invalid mask ratios r_h={r_h}, r_l={r_l}")
    if num_patches < 1:
        raise ConfigError("need at least one patch")
    k_h = _round_half_up(r_h * num_patches)
    k_l = min(_round_half_up(r_l * num_patches), num_patches - k_h)
    return k_h, k_l


def build_masks(scores, r_h: float, r_l: float) -> tuple[np.ndarray, np.ndarray]:
    """Top-``r_h`` scores -> high mask, bottom-``r_l`` of the rest -> low mask.

    Ties go to the lower patch index. Works row-wise on ``(N, P)`` input.
    """
    s = np.asarray(scores.cpu() if isinstance(scores, torch.Tensor) else scores, dtype=np.float64)
    if s.ndim == 1:
        hi, lo = build_masks(s[None], r_h, r_l)
        return hi[0], lo[0]
    n, P = s.shape
    k_h, k_l = mask_counts(P, r_h, r_l)
    high = np.zeros((n, P), dtype=bool)
    low = np.zeros((n, P), dtype=bool)
    for row in range(n):
        desc = np.argsort(-s[row], kind="stable")
        high[row, desc[:k_h]] = True
        asc = [i for i in np.argsort(s[row], kind="stable") if not high[row, i]]
        low[row, asc[:k_l]] = True
    return high, low


def random_masks(
    num_patches: int, r_h: float, r_l: float, seed=None, rng: np.random.Generator | None = None
) -> tuple[np.ndarray, np.ndarray]:
    k_h, k_l = mask_counts(num_patches, r_h, r_l)
    rng = rng if rng is not None else np.random.default_rng(seed)
    perm = rng.permutation(num_patches)
    high = np.zeros(num_patches, dtype=bool)
    low = np.zeros(num_patches, dtype=bool)
    high[perm[:k_h]] = True
    low[perm[k_h : k_h + k_l]] = True
    return high, low
