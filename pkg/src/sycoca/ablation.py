"""Objective and masking-ratio ablation grids.

Every row trains from the same seed on the same data in the same batch
order, then reports held-out retrieval (mTR/mIR), zero-shot accuracy and
whether the loss identities hold for the row's freshly initialized model.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, parse_override
from .data import generate_synthetic, parse_caption
from .evaluation import embed_images, embed_texts, prompts_from_config, retrieval_recall, zero_shot_accuracy
from .model import cls_positions, init_params
from .objectives import caption_targets, ic_loss, itc_loss, tgmim_loss
from .tokenizer import Vocabulary
from .training import Dataset, run_training, tokenize_all

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AblationRow:
    name: str
    overrides: dict = field(default_factory=dict)


def _toggles(itc, ic, mim, tgmim, masking) -> dict:
    return {"train.itc": itc, "train.ic": ic, "train.mim": mim, "train.tgmim": tgmim, "train.masking": masking}


TABLE6 = (
    AblationRow("itc", _toggles(True, False, False, False, "none")),
    AblationRow("coca", _toggles(True, True, False, False, "none")),
    AblationRow("itc+ic+am", _toggles(True, True, False, False, "attentive")),
    AblationRow("itc+ic+mim+rm", _toggles(True, True, True, False, "random")),
    AblationRow("itc+ic+mim+am", _toggles(True, True, True, False, "attentive")),
    AblationRow("itc+ic+tgmim+rm", _toggles(True, True, False, True, "random")),
    AblationRow("sycoca", _toggles(True, True, False, True, "attentive")),
)

TABLE7 = tuple(
    AblationRow(f"rl{int(rl * 100)}_rh{int(rh * 100)}", {"model.r_l": rl, "model.r_h": rh})
    for rl in (0.25, 0.5, 0.75)
    for rh in (0.25, 0.5, 0.75)
    if rl + rh <= 1.0
)


def load_grid(path, base: RunConfig) -> tuple[AblationRow, ...]:
    """Grid file: one row per line, ``name section.key=value ...``; ``#`` comments."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            overrides = dict(parse_override(base, a) for a in parts[1:])
        except ConfigError as exc:
            raise ConfigError(f"grid line {lineno}: {exc}") from None
        rows.append(AblationRow(parts[0], overrides))
    if not rows:
        raise ConfigError(f"{path}: grid has no rows")
    return tuple(rows)


# -- initialization identities ---------------------------------------------


@torch.no_grad()
def init_loss_identities(cfg: RunConfig, dataset: Dataset, n: int = 8) -> dict[str, float]:
    """Absolute deviations of three closed-form losses on a fresh float64 model.

    * ITC over ``n`` copies of one pair (identical embeddings) equals ln n.
    * IC with a zeroed token head (uniform logits) equals ln vocab_size.
    * TG-MIM with the decoder's own prediction as target is exactly 0.
    """
    model = init_params(cfg.model, cfg.train.seed, dtype=torch.float64)
    patches = dataset.patches[:1].double().expand(n, -1, -1).contiguous()
    ids = dataset.token_ids[:1].expand(n, -1).contiguous()
    img_h, txt_h = model.encode_image(patches), model.encode_text(ids)

    img = model.project_image(img_h[:, 0])
    txt = model.project_text(txt_h[torch.arange(n), cls_positions(ids)])
    l_itc, _ = itc_loss(img, txt, model.logit_scale)

    flat = copy.deepcopy(model)
    flat.token_head.weight.zero_()
    flat.token_head.bias.zero_()
    targets, mask = caption_targets(ids)
    l_ic = ic_loss(flat.decode_text_logits(txt_h, img_h, ids), targets, mask)

    high = torch.zeros(patches.shape[:2], dtype=torch.bool)
    high[:, ::2] = True
    pred = model.decode_image_pixels(model.encode_image(patches, high), txt_h, ids)
    l_tm = tgmim_loss(pred, pred, high, cfg.model.tm_reduction)

    return {
        "itc": abs(l_itc.item() - math.log(n)),
        "ic": abs(l_ic.item() - math.log(cfg.model.vocab_size)),
        "tm": abs(l_tm.item()),
    }


# -- grid driver ------------------------------------------------------------


COLUMNS = (
    "row", "itc", "ic", "mim", "tgmim", "masking", "r_h", "r_l", "steps",
    "final_total", "mTR", "mIR", "zs_acc", "init_identities", "status",
)


@dataclass
class HeldOut:
    images: list[np.ndarray]
    captions: list[str]
    labels: list[str]


def heldout_set(cfg: RunConfig) -> HeldOut:
    ec, mc = cfg.eval, cfg.model
    pairs = generate_synthetic(ec.heldout_count, mc.image_hw, ec.heldout_seed, mc.patch_size)
    caps = [c for _, c in pairs]
    return HeldOut([p for p, _ in pairs], caps, [parse_caption(c)[1] for c in caps])


def _row_cells(cfg: RunConfig) -> dict:
    t = cfg.train
    return {
        "itc": int(t.itc), "ic": int(t.ic), "mim": int(t.mim), "tgmim": int(t.tgmim),
        "masking": t.masking, "r_h": f"{cfg.model.r_h:g}", "r_l": f"{cfg.model.r_l:g}",
        "steps": t.total_steps,
    }


def run_ablation_grid(
    base: RunConfig,
    rows,
    dataset: Dataset,
    vocab: Vocabulary,
    heldout: HeldOut | None = None,
    identity_tol: float = 1e-9,
) -> list[dict]:
    """Train and evaluate every row; a failing row is recorded and the grid continues."""
    heldout = heldout_set(base) if heldout is None else heldout
    results = []
    for row in rows:
        cells = {"row": row.name}
        try:
            cfg = base.replace(**row.overrides)
            cells.update(_row_cells(cfg))
            dev = init_loss_identities(cfg, dataset)
            cells["init_identities"] = "ok" if max(dev.values()) <= identity_tol else (
                "FAIL " + ",".join(f"{k}={v:.3g}" for k, v in dev.items())
            )
            run = run_training(cfg, dataset, vocab)
            m = run.model
            ids = tokenize_all(vocab, heldout.captions, cfg.model.max_text_len)
            _, _, m_tr, m_ir = retrieval_recall(
                embed_images(m, heldout.images), embed_texts(m, ids), cfg.eval.k_list
            )
            acc = zero_shot_accuracy(
                m, vocab, heldout.images, heldout.labels, cfg.eval.class_list,
                prompts_from_config(cfg.eval), cfg.eval.prompt_reduction,
            )
            cells.update(
                final_total=f"{run.history[-1].total:.6g}", mTR=f"{m_tr:.4f}", mIR=f"{m_ir:.4f}",
                zs_acc=f"{acc:.4f}", status="ok",
            )
        except Exception as exc:  # noqa: BLE001 - one bad row must not sink the grid
            log.exception("ablation row %s failed", row.name)
            cells["status"] = f"error: {type(exc).__name__}: {exc}".replace("\t", " ").replace("\n", " ")
        results.append(cells)
    return results


def format_table(results: list[dict]) -> str:
    lines = ["\t".join(COLUMNS)]
    lines += ["\t".join(str(r.get(c, "-")) for c in COLUMNS) for r in results]
    return "\n".join(lines) + "\n"
