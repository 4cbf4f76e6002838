"""Training step, AdamW, warmup+cosine schedule, checkpoints and the run loop.

Every source of randomness in a run (init, batch order, random masks) is a
pure function of ``(seed, step)``, so a run resumed from a checkpoint
reproduces the uninterrupted loss stream exactly.
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, TextIO

import numpy as np
import torch

from .config import RunConfig, format_config, parse_config
from .data import generate_synthetic, load_image_ppm, load_manifest, patchify
from .masking import build_masks, patch_scores, random_masks
from .model import SyCoCa, cls_positions, init_params, no_decay
from .objectives import LossBreakdown, caption_targets, ic_loss, itc_loss, tgmim_loss, total_loss
from .tokenizer import BOS, CLS, EOS, PAD, Vocabulary, encode, train_bpe

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class CheckpointFormatError(ValueError):
    pass


# -- schedule -------------------------------------------------------------


@dataclass(frozen=True)
class Schedule:
    peak_lr: float
    warmup_steps: int
    total_steps: int
    floor_lr: float = 0.0

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "Schedule":
        t = cfg.train
        return cls(t.peak_lr, t.warmup_steps, t.total_steps, t.floor_lr)


def lr_at(t: int, schedule: Schedule) -> float:
    """Linear warmup to ``peak_lr``, then cosine decay to ``floor_lr`` at ``total_steps``."""
    s = schedule
    if not 0 <= t <= s.total_steps:
        raise ValueError(f"step {t} outside [0, {s.total_steps}]")
    if t <= s.warmup_steps:
        return s.peak_lr * t / s.warmup_steps
    progress = (t - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    return s.floor_lr + (s.peak_lr - s.floor_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


# -- optimizer ------------------------------------------------------------


@dataclass
class OptimState:
    exp_avg: dict[str, torch.Tensor]
    exp_avg_sq: dict[str, torch.Tensor]
    t: int = 0

    @classmethod
    def zeros_like(cls, model: torch.nn.Module) -> "OptimState":
        return cls(
            exp_avg={n: torch.zeros_like(p) for n, p in model.named_parameters()},
            exp_avg_sq={n: torch.zeros_like(p) for n, p in model.named_parameters()},
        )


@torch.no_grad()
def adamw_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor | None],
    optim: OptimState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    decay: Callable[[str], bool] = lambda name: not no_decay(name),
) -> None:
    """One in-place AdamW update with decoupled weight decay.

    Parameters whose gradient is ``None`` (not reachable from the loss) are
    left untouched, decay included.
    """
    optim.t += 1
    t = optim.t
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not bool(torch.isfinite(g).all()):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        if weight_decay and decay(name):
            p.mul_(1.0 - lr * weight_decay)
        m, v = optim.exp_avg[name], optim.exp_avg_sq[name]
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        denom = (v / bc2).sqrt_().add_(eps)
        p.addcdiv_(m, denom, value=-lr / bc1)


# -- forward pipeline -----------------------------------------------------


@dataclass
class ForwardResult:
    total: torch.Tensor
    losses: LossBreakdown
    high: torch.Tensor | None = None
    low: torch.Tensor | None = None
    scores: torch.Tensor | None = None
    sims: torch.Tensor | None = None


def content_keep(token_ids: torch.Tensor) -> torch.Tensor:
    return (token_ids != PAD) & (token_ids != BOS) & (token_ids != EOS) & (token_ids != CLS)


def forward_losses(
    model: SyCoCa,
    patches: torch.Tensor,
    token_ids: torch.Tensor,
    cfg: RunConfig,
    step: int = 0,
    masks: tuple[torch.Tensor, torch.Tensor] | None = None,
    objectives: set[str] | None = None,
) -> ForwardResult:
    """Clean pass for ITC, scoring and captioning memory; high-masked pass
    for (TG-)MIM.

    The low mask reaches the captioner either as a cross-attention
    restriction on the clean memory (``ic_masking = restrict``) or as a
    third, MASK-substituted encoder pass (``ic_masking = substitute``).

    ``masks`` pins the (high, low) masks instead of computing them;
    ``objectives`` restricts which of ``{"itc", "ic", "tm"}`` are evaluated.
    """
    mc, tc = cfg.model, cfg.train
    want = {"itc", "ic", "tm"} if objectives is None else set(objectives)
    use_itc = tc.itc and "itc" in want
    use_ic = tc.ic and mc.lambda_ic > 0 and "ic" in want
    use_tm = (tc.mim or tc.tgmim) and mc.lambda_tm > 0 and "tm" in want
    masked = tc.masking != "none" and (use_tm or use_ic)

    txt_h = model.encode_text(token_ids)
    img_h = None
    if (
        use_itc
        or (use_ic and (not masked or tc.ic_masking == "restrict"))
        or (masked and tc.masking == "attentive" and masks is None)
    ):
        img_h = model.encode_image(patches)

    res = ForwardResult(total=torch.zeros(()), losses=None)
    l_itc = l_ic = l_tm = None
    if use_itc:
        idx = cls_positions(token_ids)
        img_emb = model.project_image(img_h[:, 0])
        txt_emb = model.project_text(txt_h[torch.arange(len(idx)), idx])
        l_itc, res.sims = itc_loss(img_emb, txt_emb, model.logit_scale)

    if masked:
        if masks is None:
            P = patches.shape[1]
            if tc.masking == "attentive":
                res.scores = patch_scores(img_h[:, 1:], txt_h, content_keep(token_ids))
                high, low = build_masks(res.scores, mc.r_h, mc.r_l)
            else:
                rng = np.random.default_rng([tc.seed, step, 1])
                pairs = [random_masks(P, mc.r_h, mc.r_l, rng=rng) for _ in range(patches.shape[0])]
                high, low = np.stack([h for h, _ in pairs]), np.stack([lo for _, lo in pairs])
            masks = torch.from_numpy(high), torch.from_numpy(low)
        res.high, res.low = masks

    if use_tm:
        hidden = model.encode_image(patches, res.high)
        pred = model.decode_image_pixels(hidden, txt_h, token_ids, text_guided=tc.tgmim)
        l_tm = tgmim_loss(pred, patches, res.high, mc.tm_reduction)

    if use_ic:
        keep = None
        if masked and tc.ic_masking == "substitute":
            memory = model.encode_image(patches, res.low)
        else:
            memory = img_h if img_h is not None else model.encode_image(patches)
            if masked:
                # low-masked patches are hidden from cross-attention; CLS stays visible
                keep = torch.cat([torch.ones_like(res.low[:, :1]), ~res.low], dim=1)
        logits = model.decode_text_logits(txt_h, memory, token_ids, keep)
        targets, loss_mask = caption_targets(token_ids)
        l_ic = ic_loss(logits, targets, loss_mask)

    for name, val in (("ITC", l_itc), ("IC", l_ic), ("TG-MIM", l_tm)):
        if val is not None and not bool(torch.isfinite(val)):
            raise TrainingError(f"non-finite {name} loss ({val.item()})")
    res.total, res.losses = total_loss(l_itc, l_ic, l_tm, mc.lambda_ic, mc.lambda_tm)
    return res


def clip_grad_norm(grads: dict[str, torch.Tensor | None], max_norm: float) -> float:
    present = [g for g in grads.values() if g is not None]
    total = torch.sqrt(sum((g.double() ** 2).sum() for g in present)).item() if present else 0.0
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for g in present:
            g.mul_(scale)
    return total


def train_step(
    model: SyCoCa, optim: OptimState, patches: torch.Tensor, token_ids: torch.Tensor,
    cfg: RunConfig, step: int,
) -> LossBreakdown:
    """Forward, backward and one AdamW update at ``lr_at(step)``. ``step`` is 1-based."""
    if patches.shape[0] < 2:
        raise TrainingError("train_step needs a batch of at least 2 pairs")
    model.zero_grad(set_to_none=True)
    res = forward_losses(model, patches, token_ids, cfg, step=step)
    res.total.backward()
    params = dict(model.named_parameters())
    grads = {n: p.grad for n, p in params.items()}
    for n, g in grads.items():
        if g is not None and not bool(torch.isfinite(g).all()):
            raise TrainingError(f"non-finite gradient for parameter {n!r}")
    tc = cfg.train
    clip_grad_norm(grads, tc.grad_clip)
    lr = lr_at(step, Schedule.from_config(cfg))
    adamw_step(params, grads, optim, lr, tc.beta1, tc.beta2, tc.eps, tc.weight_decay)
    return res.losses


# -- data -----------------------------------------------------------------


@dataclass
class Dataset:
    patches: torch.Tensor  # (M, P, patch_dim)
    token_ids: torch.Tensor  # (M, L)
    captions: list[str]
    grid_hw: tuple[int, int] = (0, 0)

    def __len__(self) -> int:
        return len(self.captions)


def tokenize_all(vocab: Vocabulary, captions: list[str], max_len: int) -> torch.Tensor:
    return torch.tensor([encode(vocab, c, max_len).ids for c in captions], dtype=torch.long)


def build_dataset(images: list[np.ndarray], captions: list[str], vocab: Vocabulary, cfg: RunConfig) -> Dataset:
    mc = cfg.model
    grids = [patchify(img, mc.patch_size) for img in images]
    return Dataset(
        patches=torch.from_numpy(np.stack([g.patches for g in grids]).astype(np.float32)),
        token_ids=tokenize_all(vocab, captions, mc.max_text_len),
        captions=list(captions),
        grid_hw=(grids[0].grid_h, grids[0].grid_w),
    )


def load_training_pairs(cfg: RunConfig, base_dir: Path | None = None) -> tuple[list[np.ndarray], list[str]]:
    dc, mc = cfg.data, cfg.model
    if not dc.manifest:
        pairs = generate_synthetic(
            dc.synthetic_count, mc.image_hw, dc.synthetic_seed, mc.patch_size, dc.enumerate_all
        )
        return [p[0] for p in pairs], [p[1] for p in pairs]
    manifest = Path(dc.manifest)
    if base_dir is not None and not manifest.is_absolute():
        manifest = base_dir / manifest
    records = load_manifest(manifest)
    images = []
    for r in records:
        src = Path(r.image_source)
        if not src.is_absolute():
            src = manifest.parent / src
        images.append(load_image_ppm(src, (mc.image_hw, mc.image_hw)))
    return images, [r.caption for r in records]


def prepare_vocab(cfg: RunConfig, captions: list[str]) -> Vocabulary:
    vocab = Vocabulary.load(cfg.data.vocab) if cfg.data.vocab else train_bpe(captions, cfg.data.vocab_size)
    cfg.model.vocab_size = vocab.size
    return vocab


def batch_indices(step: int, num_examples: int, batch_size: int, seed: int) -> np.ndarray:
    """Examples for 1-based ``step``: consecutive slices of a per-epoch seeded permutation."""
    per_epoch = max(num_examples // batch_size, 1)
    epoch, j = divmod(step - 1, per_epoch)
    perm = np.random.default_rng([seed, epoch, 0]).permutation(num_examples)
    return perm[j * batch_size : (j + 1) * batch_size]


# -- checkpoints ----------------------------------------------------------

CKPT_MAGIC = b"SYCOCA-CKPT"
CKPT_VERSION = 1
_DTYPES = {torch.float32: b"f32", torch.float64: b"f64"}
_DTYPES_INV = {v: k for k, v in _DTYPES.items()}


def _write_array(fh, name: str, t: torch.Tensor) -> None:
    enc = name.encode("utf-8")
    fh.write(struct.pack("<I", len(enc)) + enc)
    fh.write(_DTYPES[t.dtype])
    fh.write(struct.pack("<I", t.dim()))
    fh.write(struct.pack(f"<{t.dim()}Q", *t.shape))
    arr = t.detach().cpu().contiguous().numpy()
    fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError("checkpoint truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self) -> tuple[str, torch.Tensor]:
        (nlen,) = self.unpack("<I")
        name = self.take(nlen).decode("utf-8")
        tag = self.take(3)
        if tag not in _DTYPES_INV:
            raise CheckpointFormatError(f"unknown dtype tag {tag!r} for {name!r}")
        (rank,) = self.unpack("<I")
        dims = self.unpack(f"<{rank}Q")
        dtype = np.float32 if tag == b"f32" else np.float64
        count = int(np.prod(dims)) if rank else 1
        raw = self.take(count * np.dtype(dtype).itemsize)
        arr = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<")).astype(dtype).reshape(dims)
        return name, torch.from_numpy(arr.copy())


@dataclass
class Checkpoint:
    model: SyCoCa
    optim: OptimState
    config: RunConfig
    step: int
    vocab: Vocabulary | None = None


def checkpoint_bytes(model: SyCoCa, optim: OptimState, cfg: RunConfig, step: int, vocab: Vocabulary | None) -> bytes:
    blob = json.dumps(
        {"config": format_config(cfg), "vocab": vocab.dumps() if vocab is not None else None},
        sort_keys=True,
    ).encode("utf-8")
    fh = io.BytesIO()
    fh.write(CKPT_MAGIC)
    fh.write(struct.pack("<I", CKPT_VERSION))
    fh.write(struct.pack("<Q", len(blob)) + blob)
    named = list(model.named_parameters())
    fh.write(struct.pack("<I", len(named)))
    for name, p in named:
        _write_array(fh, name, p)
    fh.write(struct.pack("<I", 2 * len(named)))
    for name, _ in named:
        _write_array(fh, f"exp_avg.{name}", optim.exp_avg[name])
    for name, _ in named:
        _write_array(fh, f"exp_avg_sq.{name}", optim.exp_avg_sq[name])
    fh.write(struct.pack("<QQ", optim.t, step))
    return fh.getvalue()


def save_checkpoint(model, optim, cfg, step, path, vocab=None) -> None:
    data = checkpoint_bytes(model, optim, cfg, step, vocab)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    """Parse a checkpoint completely before building any state."""
    r = _Reader(Path(path).read_bytes())
    if r.take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic")
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    (blen,) = r.unpack("<Q")
    try:
        blob = json.loads(r.take(blen).decode("utf-8"))
        cfg = parse_config(blob["config"])
        vocab = Vocabulary.loads(blob["vocab"]) if blob.get("vocab") else None
    except (ValueError, KeyError) as exc:
        raise CheckpointFormatError(f"{path}: bad config blob: {exc}") from None
    (n_params,) = r.unpack("<I")
    params = dict(r.array() for _ in range(n_params))
    (n_opt,) = r.unpack("<I")
    opt = dict(r.array() for _ in range(n_opt))
    t, step = r.unpack("<QQ")
    if r.pos != len(r.data):
        raise CheckpointFormatError(f"{path}: trailing bytes")

    model = SyCoCa(cfg.model)
    expected = dict(model.named_parameters())
    if list(params) != list(expected):
        raise CheckpointFormatError(f"{path}: parameter names do not match the config")
    dtype = next(iter(params.values())).dtype
    model = model.to(dtype)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if params[name].shape != p.shape:
                raise CheckpointFormatError(
                    f"{path}: shape mismatch for {name}: {tuple(params[name].shape)} vs {tuple(p.shape)}"
                )
            p.copy_(params[name])
    try:
        optim = OptimState(
            exp_avg={n: opt[f"exp_avg.{n}"] for n in expected},
            exp_avg_sq={n: opt[f"exp_avg_sq.{n}"] for n in expected},
            t=t,
        )
    except KeyError as exc:
        raise CheckpointFormatError(f"{path}: missing optimizer state {exc}") from None
    return Checkpoint(model=model, optim=optim, config=cfg, step=step, vocab=vocab)


# -- run loop -------------------------------------------------------------


def format_log_line(step: int, lr: float, losses: LossBreakdown) -> str:
    vals = "\t".join(f"{v:.9g}" for v in losses.as_row())
    return f"{step}\t{lr:.9g}\t{vals}"


@dataclass
class RunResult:
    model: SyCoCa
    optim: OptimState
    history: list[LossBreakdown] = field(default_factory=list)
    step: int = 0


def run_training(
    cfg: RunConfig,
    dataset: Dataset,
    vocab: Vocabulary | None = None,
    resume: Checkpoint | None = None,
    log_file: TextIO | None = None,
    stop_at: int | None = None,
    on_step: Callable[[int, SyCoCa], None] | None = None,
) -> RunResult:
    """Train from scratch (or from ``resume``) up to ``stop_at`` or ``total_steps``."""
    tc = cfg.train
    if resume is not None:
        model, optim, start = resume.model, resume.optim, resume.step
    else:
        model = init_params(cfg.model, tc.seed)
        optim = OptimState.zeros_like(model)
        start = 0
    end = tc.total_steps if stop_at is None else min(stop_at, tc.total_steps)
    sched = Schedule.from_config(cfg)
    result = RunResult(model=model, optim=optim, step=start)
    if on_step is not None and start == 0:
        on_step(0, model)
    for step in range(start + 1, end + 1):
        idx = torch.from_numpy(batch_indices(step, len(dataset), tc.batch_size, tc.seed))
        losses = train_step(model, optim, dataset.patches[idx], dataset.token_ids[idx], cfg, step)
        result.history.append(losses)
        result.step = step
        if log_file is not None:
            log_file.write(format_log_line(step, lr_at(step, sched), losses) + "\n")
        if tc.checkpoint_path and tc.checkpoint_every and step % tc.checkpoint_every == 0:
            save_checkpoint(model, optim, cfg, step, tc.checkpoint_path, vocab)
        if on_step is not None:
            on_step(step, model)
        if step % 100 == 0:
            log.info("step %d total %.4f", step, losses.total)
    return result
