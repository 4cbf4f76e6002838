"""Image encoder, causal text encoder, text-guided image decoder and
image-conditioned text decoder.

All four stacks are pre-LN transformers with learned absolute positions and
GELU MLPs. Attention is written out explicitly (no fused kernels) so that
masked keys contribute exact zeros, which keeps causality and PAD isolation
bitwise.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .config import ConfigError, ModelConfig
from .tokenizer import PAD

NORM_EPS = 1e-8


class Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.o = nn.Linear(d_model, d_model)

    def forward(self, x, context=None, allowed=None):
        """``allowed`` is a bool tensor broadcastable to (N, Lq, Lk); False blocks a key."""
        context = x if context is None else context
        n, lq, d = x.shape
        lk = context.shape[1]
        h, hd = self.n_heads, d // self.n_heads
        q = self.q(x).view(n, lq, h, hd).transpose(1, 2)
        k = self.k(context).view(n, lk, h, hd).transpose(1, 2)
        v = self.v(context).view(n, lk, h, hd).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        if allowed is not None:
            scores = scores.masked_fill(~allowed.unsqueeze(1), float("-inf"))
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(n, lq, d)
        return self.o(out)


class Block(nn.Module):
    """Pre-LN block: self-attention, optional cross-attention, MLP."""

    def __init__(self, d_model: int, n_heads: int, mlp_ratio: int, cross: bool = False):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = Attention(d_model, n_heads)
        if cross:
            self.norm_cross = nn.LayerNorm(d_model)
            self.cross_attn = Attention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.fc1 = nn.Linear(d_model, mlp_ratio * d_model)
        self.fc2 = nn.Linear(mlp_ratio * d_model, d_model)

    def forward(self, x, self_allowed=None, memory=None, memory_allowed=None, use_cross=True):
        x = x + self.attn(self.norm1(x), allowed=self_allowed)
        if memory is not None and use_cross:
            x = x + self.cross_attn(self.norm_cross(x), context=memory, allowed=memory_allowed)
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class SyCoCa(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = c = config
        d, P = c.d_model, c.num_patches

        def stack(n, cross):
            return nn.ModuleList(Block(d, c.n_heads, c.mlp_ratio, cross) for _ in range(n))

        # image encoder
        self.patch_proj = nn.Linear(c.patch_dim, d)
        self.img_cls = nn.Parameter(torch.zeros(d))
        self.mask_token = nn.Parameter(torch.zeros(d))
        self.img_pos = nn.Parameter(torch.zeros(P + 1, d))
        self.img_enc = stack(c.n_layers_img_enc, cross=False)
        self.img_enc_norm = nn.LayerNorm(d)
        # causal text encoder
        self.tok_embed = nn.Parameter(torch.zeros(c.vocab_size, d))
        self.txt_pos = nn.Parameter(torch.zeros(c.max_text_len, d))
        self.txt_enc = stack(c.n_layers_txt_enc, cross=False)
        self.txt_enc_norm = nn.LayerNorm(d)
        # contrastive heads
        self.img_proj = nn.Linear(d, c.embed_dim, bias=False)
        self.txt_proj = nn.Linear(d, c.embed_dim, bias=False)
        self.log_logit_scale = nn.Parameter(torch.tensor(math.log(c.init_logit_scale)))
        # text-to-image decoder
        self.img_dec = stack(c.n_layers_img_dec, cross=True)
        self.img_dec_norm = nn.LayerNorm(d)
        self.pixel_head = nn.Linear(d, c.patch_dim)
        # image-to-text decoder
        self.txt_dec = stack(c.n_layers_txt_dec, cross=True)
        self.txt_dec_norm = nn.LayerNorm(d)
        self.token_head = nn.Linear(d, c.vocab_size)

    # -- initialization ---------------------------------------------------

    @torch.no_grad()
    def reset_parameters(self, seed: int) -> None:
        """Weights and embeddings ~ N(0, init_std^2); biases 0; norms 1."""
        g = torch.Generator().manual_seed(seed)
        std = self.config.init_std
        for name, p in self.named_parameters():
            if name == "log_logit_scale":
                p.fill_(math.log(self.config.init_logit_scale))
            elif "norm" in name:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64) * std)

    @property
    def logit_scale(self) -> torch.Tensor:
        return self.log_logit_scale.exp().clamp(max=self.config.max_logit_scale)

    # -- encoders ---------------------------------------------------------

    def encode_image(self, patches: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """(N, P, patch_dim) -> (N, P + 1, d); output row 0 is the image CLS.

        Masked patches (``mask`` True) have their projection replaced by the
        learned MASK token; positional embeddings are kept.
        """
        c = self.config
        if patches.dim() != 3 or patches.shape[1:] != (c.num_patches, c.patch_dim):
            raise ConfigError(
                f"expected patches (N, {c.num_patches}, {c.patch_dim}), got {tuple(patches.shape)}"
            )
        x = self.patch_proj(patches)
        if mask is not None:
            if mask.shape != patches.shape[:2]:
                raise ConfigError(f"mask shape {tuple(mask.shape)} does not match patches")
            x = torch.where(mask.unsqueeze(-1), self.mask_token.to(x.dtype), x)
        x = x + self.img_pos[1:]
        cls = (self.img_cls + self.img_pos[0]).expand(x.shape[0], 1, -1)
        x = torch.cat([cls, x], dim=1)
        for blk in self.img_enc:
            x = blk(x)
        return self.img_enc_norm(x)

    def text_self_allowed(self, token_ids: torch.Tensor) -> torch.Tensor:
        L = token_ids.shape[1]
        causal = torch.ones(L, L, dtype=torch.bool, device=token_ids.device).tril()
        return causal.unsqueeze(0) & (token_ids != PAD).unsqueeze(1)

    def encode_text(self, token_ids: torch.Tensor) -> torch.Tensor:
        """(N, L) ids -> (N, L, d) under causal attention with PAD keys excluded."""
        c = self.config
        if token_ids.dim() != 2 or token_ids.shape[1] > c.max_text_len:
            raise ConfigError(f"expected ids (N, <= {c.max_text_len}), got {tuple(token_ids.shape)}")
        if token_ids.numel() and (token_ids.min() < 0 or token_ids.max() >= c.vocab_size):
            raise ValueError(f"token id out of range [0, {c.vocab_size})")
        L = token_ids.shape[1]
        x = self.tok_embed[token_ids] + self.txt_pos[:L]
        allowed = self.text_self_allowed(token_ids)
        for blk in self.txt_enc:
            x = blk(x, self_allowed=allowed)
        return self.txt_enc_norm(x)

    # -- contrastive projections -------------------------------------------

    @staticmethod
    def _normalize(z: torch.Tensor) -> torch.Tensor:
        return z / (z.norm(dim=-1, keepdim=True) + NORM_EPS)

    def project_image(self, cls_vec: torch.Tensor) -> torch.Tensor:
        return self._normalize(self.img_proj(cls_vec))

    def project_text(self, cls_vec: torch.Tensor) -> torch.Tensor:
        return self._normalize(self.txt_proj(cls_vec))

    # -- decoders ---------------------------------------------------------

    def decode_text_logits(
        self,
        text_hidden: torch.Tensor,
        image_memory: torch.Tensor,
        token_ids: torch.Tensor,
        memory_keep: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Next-token logits (N, L, vocab) from causal text states and image memory.

        ``memory_keep`` (N, P + 1) restricts which memory slots cross-attention may read.
        """
        n, m = image_memory.shape[:2]
        if memory_keep is None:
            memory_keep = torch.ones(n, m, dtype=torch.bool, device=image_memory.device)
        if memory_keep.shape != (n, m):
            raise ConfigError(f"memory_keep must have shape {(n, m)}, got {tuple(memory_keep.shape)}")
        if not bool(memory_keep.any(dim=1).all()):
            raise ValueError("memory_keep leaves no attendable memory slot")
        allowed = self.text_self_allowed(token_ids)
        mem_allowed = memory_keep.unsqueeze(1)
        x = text_hidden
        for blk in self.txt_dec:
            x = blk(x, self_allowed=allowed, memory=image_memory, memory_allowed=mem_allowed)
        return self.token_head(self.txt_dec_norm(x))

    def decode_image_pixels(
        self,
        image_hidden: torch.Tensor,
        text_memory: torch.Tensor | None,
        token_ids: torch.Tensor | None = None,
        text_guided: bool = True,
    ) -> torch.Tensor:
        """Per-patch pixel predictions (N, P, patch_dim); the CLS row is dropped.

        With ``text_guided=False`` the cross-attention sublayers are skipped
        (plain MIM).
        """
        mem_allowed = None
        if text_guided:
            if text_memory is None or token_ids is None:
                raise ConfigError("text-guided decoding needs text memory and token ids")
            if text_memory.shape[-1] != image_hidden.shape[-1]:
                raise ConfigError(
                    f"text memory width {text_memory.shape[-1]} != image width {image_hidden.shape[-1]}"
                )
            mem_allowed = (token_ids != PAD).unsqueeze(1)
        x = image_hidden
        for blk in self.img_dec:
            x = blk(x, memory=text_memory, memory_allowed=mem_allowed, use_cross=text_guided)
        return self.pixel_head(self.img_dec_norm(x)[:, 1:])


def init_params(config: ModelConfig, seed: int, dtype=torch.float32) -> SyCoCa:
    model = SyCoCa(config).to(dtype)
    model.reset_parameters(seed)
    return model


def cls_positions(token_ids: torch.Tensor) -> torch.Tensor:
    """Index of the CLS token (last non-PAD position) per row."""
    return (token_ids != PAD).sum(dim=1) - 1


def no_decay(name: str) -> bool:
    """Parameters exempt from weight decay: biases, norms, positions, temperature."""
    return (
        name.endswith("bias")
        or "norm" in name
        or name in ("img_pos", "txt_pos", "log_logit_scale")
    )
