"""Zero-shot retrieval and classification, greedy captioning, masked
reconstruction and patch-score heatmaps."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import PatchGrid, patchify, synthetic_prompt_templates, unpatchify
from .masking import build_masks, mask_counts, patch_scores, random_masks
from .model import SyCoCa, cls_positions
from .objectives import caption_targets
from .tokenizer import BOS, EOS, PAD, Vocabulary, decode, encode
from .training import content_keep, tokenize_all


@dataclass(frozen=True)
class RecallTable:
    direction: str  # "image->text" or "text->image"
    recall_at: dict[int, float]
    n: int


# -- embeddings -----------------------------------------------------------


def _as_patches(model: SyCoCa, images) -> torch.Tensor:
    """Accept an (N, P, D) tensor, a list of H x W x 3 arrays / PatchGrids, or one image."""
    if isinstance(images, torch.Tensor):
        return images if images.dim() == 3 else images[None]
    if isinstance(images, (np.ndarray, PatchGrid)):
        images = [images]
    ps = model.config.patch_size
    rows = [im.patches if isinstance(im, PatchGrid) else patchify(im, ps).patches for im in images]
    dtype = next(model.parameters()).dtype
    return torch.from_numpy(np.stack(rows)).to(dtype)


@torch.no_grad()
def embed_images(model: SyCoCa, images, chunk: int = 256) -> torch.Tensor:
    patches = _as_patches(model, images)
    out = [model.project_image(model.encode_image(patches[i : i + chunk])[:, 0])
           for i in range(0, len(patches), chunk)]
    return torch.cat(out)


@torch.no_grad()
def embed_texts(model: SyCoCa, token_ids: torch.Tensor, chunk: int = 256) -> torch.Tensor:
    out = []
    for i in range(0, len(token_ids), chunk):
        ids = token_ids[i : i + chunk]
        h = model.encode_text(ids)
        out.append(model.project_text(h[torch.arange(len(ids)), cls_positions(ids)]))
    return torch.cat(out)


# -- retrieval ------------------------------------------------------------


def _ranks(sim: np.ndarray) -> np.ndarray:
    """1-based rank of the diagonal entry in each row; ties go to the lower index."""
    n = sim.shape[0]
    true = np.diag(sim)[:, None]
    higher = (sim > true).sum(axis=1)
    tied_before = ((sim == true) & (np.arange(n)[None, :] < np.arange(n)[:, None])).sum(axis=1)
    return 1 + higher + tied_before


def retrieval_recall(img_embs, txt_embs, ks: Sequence[int] = (1, 5, 10)):
    """Recall@k in both directions for index-aligned pairs.

    Returns ``(image->text table, text->image table, mTR, mIR)`` where mTR and
    mIR are the means over ``ks`` of the respective recalls.
    """
    img = np.asarray(torch.as_tensor(img_embs).detach().cpu(), dtype=np.float64)
    txt = np.asarray(torch.as_tensor(txt_embs).detach().cpu(), dtype=np.float64)
    n = img.shape[0]
    if txt.shape[0] != n:
        raise ValueError("image and text galleries differ in size")
    if not ks or n < max(ks):
        raise ValueError(f"gallery of {n} is smaller than k={max(ks) if ks else None}")
    sim = img @ txt.T
    tables = []
    for direction, s in (("image->text", sim), ("text->image", sim.T)):
        r = _ranks(s)
        tables.append(RecallTable(direction, {k: float((r <= k).mean()) for k in ks}, n))
    m_tr = float(np.mean([tables[0].recall_at[k] for k in ks]))
    m_ir = float(np.mean([tables[1].recall_at[k] for k in ks]))
    return tables[0], tables[1], m_tr, m_ir


def format_recall_tables(i2t: RecallTable, t2i: RecallTable, m_tr: float, m_ir: float) -> str:
    ks = sorted(i2t.recall_at)
    lines = ["direction\t" + "\t".join(f"R@{k}" for k in ks) + "\tmean"]
    for t, m in ((i2t, m_tr), (t2i, m_ir)):
        lines.append(t.direction + "\t" + "\t".join(f"{t.recall_at[k]:.4f}" for k in ks) + f"\t{m:.4f}")
    return "\n".join(lines) + "\n"


# -- zero-shot classification ----------------------------------------------


def _templates(prompt_template) -> list[str]:
    templates = [prompt_template] if isinstance(prompt_template, str) else list(prompt_template)
    if not templates or any("{}" not in t for t in templates):
        raise ValueError("prompt templates must each contain '{}'")
    return templates


@torch.no_grad()
def class_scores(
    model: SyCoCa, vocab: Vocabulary, images, class_names: Sequence[str],
    prompt_template="a photo of a {}", reduction: str = "mean",
) -> np.ndarray:
    """(N images, C classes) scores from prompted class names.

    With several templates, ``mean`` averages the prompt embeddings per class
    (then renormalizes); ``max`` keeps the best-matching prompt per class.
    """
    if len(class_names) < 2:
        raise ValueError("zero-shot classification needs at least 2 classes")
    if reduction not in ("mean", "max"):
        raise ValueError(f"reduction must be mean or max, got {reduction!r}")
    templates = _templates(prompt_template)
    img = embed_images(model, images)
    L = model.config.max_text_len
    cols = []
    for name in class_names:
        txt = embed_texts(model, tokenize_all(vocab, [t.format(name) for t in templates], L))
        if reduction == "mean":
            e = txt.mean(dim=0)
            cols.append(img @ (e / (e.norm() + 1e-8)))
        else:
            cols.append((img @ txt.T).max(dim=1).values)
    return torch.stack(cols, dim=1).double().numpy()


def zero_shot_classify(model, vocab, image, class_names, prompt_template="a photo of a {}", reduction="mean"):
    """Return (predicted class index, per-class scores) for one image.

    Ties resolve to the earlier class.
    """
    scores = class_scores(model, vocab, image, class_names, prompt_template, reduction)[0]
    return int(np.argmax(scores)), scores


def zero_shot_accuracy(
    model, vocab, images, labels: Sequence[str], class_names, prompt_template="a photo of a {}",
    reduction: str = "mean",
) -> float:
    scores = class_scores(model, vocab, images, class_names, prompt_template, reduction)
    truth = np.array([list(class_names).index(lbl) for lbl in labels])
    return float((scores.argmax(axis=1) == truth).mean())


def prompts_from_config(eval_cfg) -> list[str] | str:
    if eval_cfg.prompt_ensemble == "synthetic":
        return synthetic_prompt_templates()
    return eval_cfg.prompt_template


# -- captioning -----------------------------------------------------------


@torch.no_grad()
def caption_greedy_batch(model: SyCoCa, vocab: Vocabulary, images, max_len: int | None = None):
    """Greedy decoding for a batch; rows never interact, so each result
    equals decoding that image alone."""
    L = model.config.max_text_len
    max_len = L if max_len is None else min(max_len, L)
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    patches = _as_patches(model, images)
    n = patches.shape[0]
    memory = model.encode_image(patches)
    ids = torch.full((n, L), PAD, dtype=torch.long)
    ids[:, 0] = BOS
    done = torch.zeros(n, dtype=torch.bool)
    length = 1
    while length < max_len and not bool(done.all()):
        h = model.encode_text(ids)
        logits = model.decode_text_logits(h, memory, ids)
        nxt = logits[:, length - 1].argmax(dim=-1)
        nxt = torch.where(done, torch.full_like(nxt, PAD), nxt)
        ids[:, length] = nxt
        done |= nxt == EOS
        length += 1
    out = []
    for row in ids[:, :length].tolist():
        if EOS in row:
            row = row[: row.index(EOS) + 1]
        else:
            while len(row) > 1 and row[-1] == PAD:
                row.pop()
        out.append((row, decode(vocab, row)))
    return out


def caption_greedy(model, vocab, image, max_len: int | None = None) -> tuple[list[int], str]:
    return caption_greedy_batch(model, vocab, image, max_len)[0]


@torch.no_grad()
def caption_token_accuracy(model: SyCoCa, vocab: Vocabulary, images, captions: Sequence[str]) -> float:
    """Teacher-forced next-token accuracy over content and EOS predictions."""
    patches = _as_patches(model, images)
    ids = tokenize_all(vocab, list(captions), model.config.max_text_len)
    logits = model.decode_text_logits(model.encode_text(ids), model.encode_image(patches), ids)
    targets, mask = caption_targets(ids)
    hits = (logits.argmax(dim=-1) == targets) & mask
    return float(hits.sum()) / float(mask.sum())


def caption_exact_match(model, vocab, images, captions) -> float:
    results = caption_greedy_batch(model, vocab, images)
    return float(np.mean([text == cap for (_, text), cap in zip(results, captions)]))


# -- reconstruction -------------------------------------------------------


@torch.no_grad()
def reconstruct(
    model: SyCoCa, vocab: Vocabulary, image: np.ndarray, caption: str, r_h: float,
    mode: str = "attentive", seed: int = 0, text_guided: bool = True,
):
    """Mask ``r_h`` of the patches, predict them from text, splice them back.

    Returns ``(composite image, per-pixel L1 over masked patches, high mask,
    patch scores)``; scores are ``None`` in random mode.
    """
    c = model.config
    grid = patchify(np.asarray(image, dtype=np.float32), c.patch_size)
    k_h, _ = mask_counts(grid.num_patches, r_h, 0.0)
    if k_h == 0:
        raise ValueError(f"r_h={r_h} masks no patches of {grid.num_patches}")
    patches = _as_patches(model, [grid])
    ids = tokenize_all(vocab, [caption], c.max_text_len)
    txt_h = model.encode_text(ids)
    scores = None
    if mode == "attentive":
        scores = patch_scores(model.encode_image(patches)[:, 1:], txt_h, content_keep(ids))[0]
        high, _ = build_masks(scores, r_h, 0.0)
    elif mode == "random":
        high, _ = random_masks(grid.num_patches, r_h, 0.0, seed=seed)
    else:
        raise ValueError(f"mode must be 'attentive' or 'random', got {mode!r}")
    mask = torch.from_numpy(high)[None]
    pred = model.decode_image_pixels(model.encode_image(patches, mask), txt_h, ids, text_guided=text_guided)
    pred = pred[0].double().clamp(0.0, 1.0).numpy()
    target = grid.patches.astype(np.float64)
    composite = target.copy()
    composite[high] = pred[high]
    l1 = float(np.abs(pred[high] - target[high]).mean())
    out = unpatchify(PatchGrid(composite.astype(np.float32), grid.grid_h, grid.grid_w, grid.patch_size))
    return out, l1, high, None if scores is None else scores.double().numpy()


# -- heatmaps -------------------------------------------------------------


def heatmap_bytes(scores, grid_h: int, grid_w: int) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if s.size != grid_h * grid_w:
        raise ValueError(f"{s.size} scores do not fill a {grid_h}x{grid_w} grid")
    lo, hi = s.min(), s.max()
    if hi == lo:
        return np.full((grid_h, grid_w), 128, dtype=np.uint8)
    return np.rint((s - lo) / (hi - lo) * 255.0).astype(np.uint8).reshape(grid_h, grid_w)


def export_heatmap(scores, grid_h: int, grid_w: int, path) -> None:
    """Write min-max normalized patch scores as a binary PGM (P5)."""
    pix = heatmap_bytes(scores, grid_h, grid_w)
    Path(path).write_bytes(f"P5\n{grid_w} {grid_h}\n255\n".encode("ascii") + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    head = data.split(maxsplit=4)
    w, h, maxval = int(head[1]), int(head[2]), int(head[3])
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval}")
    raster = data[len(data) - w * h :]
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()
