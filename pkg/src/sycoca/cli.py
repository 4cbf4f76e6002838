"""Command-line entry point: ``sycoca <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage, config or missing-file error.
Tables go to stdout as tab-separated text; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import ablation
from .config import ConfigError, RunConfig, format_config, load_config
from .data import DataError, generate_synthetic, load_image_ppm, load_manifest, save_image_ppm
from .evaluation import (
    caption_greedy,
    embed_images,
    embed_texts,
    export_heatmap,
    format_recall_tables,
    prompts_from_config,
    reconstruct,
    retrieval_recall,
    zero_shot_classify,
)
from .tokenizer import TokenizerError, train_bpe
from .training import (
    Checkpoint,
    Schedule,
    build_dataset,
    format_log_line,
    load_checkpoint,
    load_training_pairs,
    lr_at,
    prepare_vocab,
    run_training,
    save_checkpoint,
    tokenize_all,
)

log = logging.getLogger("sycoca")


class UsageError(Exception):
    pass


def _config(path: str | None) -> RunConfig:
    return load_config(path) if path else RunConfig().validate()


def _checkpoint(path: str) -> Checkpoint:
    ckpt = load_checkpoint(path)
    if ckpt.vocab is None:
        raise UsageError(f"{path}: checkpoint carries no vocabulary")
    ckpt.model.eval()
    return ckpt


def _run_identity(cfg: RunConfig) -> str:
    # output locations may change between the original run and a resume
    io_keys = ("log_path", "checkpoint_path", "checkpoint_every")
    return format_config(cfg.replace(**{f"train.{k}": getattr(RunConfig().train, k) for k in io_keys}))


def _manifest_images(path: str, cfg: RunConfig):
    records = load_manifest(path)
    base = Path(path).parent
    hw = (cfg.model.image_hw, cfg.model.image_hw)
    images = []
    for r in records:
        src = Path(r.image_source)
        images.append(load_image_ppm(src if src.is_absolute() else base / src, hw))
    return images, [r.caption for r in records]


# -- subcommands ------------------------------------------------------------


def cmd_print_config(args) -> int:
    sys.stdout.write(format_config(_config(args.config)))
    return 0


def cmd_tokenizer_train(args) -> int:
    lines = [ln for ln in Path(args.corpus).read_text(encoding="utf-8").splitlines() if ln]
    vocab = train_bpe(lines, args.vocab_size)
    vocab.save(args.out)
    print(f"vocab_size\t{vocab.size}\nmerges\t{len(vocab.merges)}")
    return 0


def cmd_make_synthetic(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (img, caption) in enumerate(generate_synthetic(args.count, args.image_hw, args.seed, args.patch_size)):
        name = f"{i:05d}.ppm"
        save_image_ppm(img, out / name)
        rows.append(f"{name}\t{caption}\n")
    (out / "manifest.tsv").write_text("".join(rows), encoding="utf-8")
    print(f"wrote\t{len(rows)}\t{out / 'manifest.tsv'}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args.config)
    resume = None
    images, captions = load_training_pairs(cfg)
    if args.resume:
        resume = load_checkpoint(args.resume)
        if resume.vocab is None:
            raise UsageError(f"{args.resume}: checkpoint carries no vocabulary")
        vocab = resume.vocab
        cfg.model.vocab_size = vocab.size
        if _run_identity(resume.config) != _run_identity(cfg):
            raise ConfigError(f"{args.resume}: checkpoint was written under a different config")
    else:
        vocab = prepare_vocab(cfg, captions)
    dataset = build_dataset(images, captions, vocab, cfg)
    tc = cfg.train
    mode = "a" if resume is not None else "w"
    fh = open(tc.log_path, mode, encoding="utf-8") if tc.log_path else sys.stdout
    try:
        result = run_training(cfg, dataset, vocab, resume=resume, log_file=fh)
    finally:
        if fh is not sys.stdout:
            fh.close()
    if tc.checkpoint_path:
        save_checkpoint(result.model, result.optim, cfg, result.step, tc.checkpoint_path, vocab)
    if result.history:
        line = format_log_line(result.step, lr_at(result.step, Schedule.from_config(cfg)), result.history[-1])
        print(f"final\t{line}", file=sys.stderr)
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args.config)
    kind, *rest = args.grid
    if kind == "table6" and not rest:
        rows = ablation.TABLE6
    elif kind == "table7" and not rest:
        rows = ablation.TABLE7
    elif kind == "custom" and len(rest) == 1:
        rows = ablation.load_grid(rest[0], cfg)
    else:
        raise UsageError("--grid takes table6, table7 or 'custom PATH'")
    images, captions = load_training_pairs(cfg)
    vocab = prepare_vocab(cfg, captions)
    dataset = build_dataset(images, captions, vocab, cfg)
    results = ablation.run_ablation_grid(cfg, rows, dataset, vocab)
    table = ablation.format_table(results)
    sys.stdout.write(table)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    return 0 if all(r["status"] == "ok" for r in results) else 1


def cmd_eval_retrieval(args) -> int:
    ckpt = _checkpoint(args.ckpt)
    cfg = ckpt.config
    images, captions = _manifest_images(args.manifest, cfg)
    ks = [int(k) for k in args.ks.split(",")] if args.ks else cfg.eval.k_list
    ids = tokenize_all(ckpt.vocab, captions, cfg.model.max_text_len)
    tables = retrieval_recall(embed_images(ckpt.model, images), embed_texts(ckpt.model, ids), ks)
    sys.stdout.write(format_recall_tables(*tables))
    return 0


def _label_for(caption: str, classes: list[str]) -> str:
    words = caption.split()
    hits = [c for c in classes if c in words]
    if len(hits) != 1:
        raise DataError(f"caption {caption!r} names {len(hits)} of the classes, expected exactly 1")
    return hits[0]


def cmd_eval_classify(args) -> int:
    ckpt = _checkpoint(args.ckpt)
    cfg = ckpt.config
    ec = cfg.eval
    for key in ("prompt_template", "prompt_ensemble", "prompt_reduction"):
        val = getattr(args, key)
        if val is not None:
            setattr(ec, key, val)
    ec.validate()
    classes = [c.strip() for c in (args.classes or ec.classes).split(",") if c.strip()]
    if len(classes) < 2:
        raise UsageError("--classes needs at least two names")
    images, captions = _manifest_images(args.manifest, cfg)
    prompts = prompts_from_config(ec)
    print("index\tlabel\tpredicted\t" + "\t".join(classes))
    correct = 0
    for i, (img, cap) in enumerate(zip(images, captions)):
        label = _label_for(cap, classes)
        pred, scores = zero_shot_classify(ckpt.model, ckpt.vocab, img, classes, prompts, ec.prompt_reduction)
        correct += classes[pred] == label
        print(f"{i}\t{label}\t{classes[pred]}\t" + "\t".join(f"{s:.6f}" for s in scores))
    print(f"accuracy\t{correct / len(images):.4f}")
    return 0


def cmd_caption(args) -> int:
    ckpt = _checkpoint(args.ckpt)
    hw = ckpt.config.model.image_hw
    ids, text = caption_greedy(ckpt.model, ckpt.vocab, load_image_ppm(args.image, (hw, hw)), args.max_len)
    print(f"{text}\t{' '.join(map(str, ids))}")
    return 0


def cmd_reconstruct(args) -> int:
    if args.heatmap and args.mode != "attentive":
        raise UsageError("--heatmap needs --mode attentive")
    ckpt = _checkpoint(args.ckpt)
    mc = ckpt.config.model
    img = load_image_ppm(args.image, (mc.image_hw, mc.image_hw))
    r_h = mc.r_h if args.r_h is None else args.r_h
    seed = ckpt.config.train.seed if args.seed is None else args.seed
    out, l1, high, scores = reconstruct(ckpt.model, ckpt.vocab, img, args.caption, r_h, args.mode, seed)
    save_image_ppm(out, args.out)
    if args.heatmap:
        export_heatmap(scores, mc.grid_size, mc.grid_size, args.heatmap)
    print(f"masked_patches\t{int(np.sum(high))}\nl1\t{l1:.6f}")
    return 0


# -- parser -----------------------------------------------------------------


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    # unset defaults either explain themselves in the help text or mean "off"
    def _get_help_string(self, action):
        if action.default in (None, False) or action.required:
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    p = argparse.ArgumentParser(prog="sycoca", description="Vision-language pretraining toolkit.", formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        sp.set_defaults(func=func)
        return sp

    sp = add("print-config", cmd_print_config, "print the effective config with every default")
    sp.add_argument("--config", default=None, help="config file to overlay on the defaults")

    sp = add("tokenizer-train", cmd_tokenizer_train, "train a byte-level BPE vocabulary")
    sp.add_argument("--corpus", required=True, help="UTF-8 text, one caption per line")
    sp.add_argument("--vocab-size", type=int, default=512, help="target vocabulary size")
    sp.add_argument("--out", required=True, help="vocabulary file to write")

    sp = add("make-synthetic", cmd_make_synthetic, "render synthetic shape images and a manifest")
    sp.add_argument("--count", type=int, default=256, help="number of pairs")
    sp.add_argument("--seed", type=int, default=0, help="rendering seed")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--image-hw", type=int, default=32, help="image side in pixels")
    sp.add_argument("--patch-size", type=int, default=8, help="patch side the images must divide into")

    sp = add("train", cmd_train, "train a model from a config file")
    sp.add_argument("--config", required=True, help="config file")
    sp.add_argument("--resume", default=None, help="checkpoint to resume from")

    sp = add("ablate", cmd_ablate, "run an ablation grid and print a result table")
    sp.add_argument("--config", required=True, help="base config file")
    sp.add_argument("--grid", nargs="+", required=True, metavar="GRID",
                    help="table6, table7 or 'custom PATH'")
    sp.add_argument("--out", default=None, help="also write the table to this file")

    sp = add("eval-retrieval", cmd_eval_retrieval, "image-text retrieval recall on a manifest")
    sp.add_argument("--ckpt", required=True, help="checkpoint file")
    sp.add_argument("--manifest", required=True, help="image<TAB>caption manifest")
    sp.add_argument("--ks", default=None, help="comma-separated k values (default: config eval.ks)")

    sp = add("eval-classify", cmd_eval_classify, "prompt-based zero-shot classification on a manifest")
    sp.add_argument("--ckpt", required=True, help="checkpoint file")
    sp.add_argument("--manifest", required=True, help="manifest; each caption must name one class")
    sp.add_argument("--classes", default=None, help="comma-separated class names (default: config eval.classes)")
    sp.add_argument("--prompt-template", dest="prompt_template", default=None, help="template containing '{}' (default: config eval.prompt_template)")
    sp.add_argument("--prompt-ensemble", dest="prompt_ensemble", default=None, choices=["", "synthetic"],
                    help="prompt ensemble (default: config eval.prompt_ensemble)")
    sp.add_argument("--prompt-reduction", dest="prompt_reduction", default=None, choices=["mean", "max"],
                    help="reduction over the ensemble (default: config eval.prompt_reduction)")

    sp = add("caption", cmd_caption, "greedy-decode a caption for one image")
    sp.add_argument("--ckpt", required=True, help="checkpoint file")
    sp.add_argument("--image", required=True, help="P6 PPM image")
    sp.add_argument("--max-len", type=int, default=None, help="maximum token count including BOS (default: config max_text_len)")

    sp = add("reconstruct", cmd_reconstruct, "mask patches and reconstruct them from a caption")
    sp.add_argument("--ckpt", required=True, help="checkpoint file")
    sp.add_argument("--image", required=True, help="P6 PPM image")
    sp.add_argument("--caption", required=True, help="guiding caption")
    sp.add_argument("--mode", choices=["attentive", "random"], default="attentive", help="mask selection")
    sp.add_argument("--out", required=True, help="composite PPM to write")
    sp.add_argument("--r-h", dest="r_h", type=float, default=None, help="masked fraction (default: config r_h)")
    sp.add_argument("--seed", type=int, default=None, help="random-mode seed (default: config seed)")
    sp.add_argument("--heatmap", default=None, help="also write patch scores as a PGM")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"sycoca: error: {exc}", file=sys.stderr)
        return 2
    except (DataError, TokenizerError, ValueError, RuntimeError, OSError) as exc:
        print(f"sycoca: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
