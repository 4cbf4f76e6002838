"""Run configuration and the plain-text config file format.

The file is UTF-8 with ``[model]``, ``[train]``, ``[data]`` and ``[eval]``
sections holding ``key = value`` lines. Lines starting with ``#`` are comments. Unknown
sections or keys are rejected with the offending line number. Every key has
a default, so an empty file is a valid config.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers_img_enc: int = 2
    n_layers_txt_enc: int = 2
    n_layers_img_dec: int = 2
    n_layers_txt_dec: int = 2
    patch_size: int = 8
    image_hw: int = 32
    max_text_len: int = 16
    vocab_size: int = 512
    embed_dim: int = 64
    mlp_ratio: int = 4
    r_h: float = 0.5
    r_l: float = 0.5
    lambda_ic: float = 2.0
    lambda_tm: float = 1.0
    init_logit_scale: float = 1 / 0.07
    max_logit_scale: float = 100.0
    init_std: float = 0.01
    # "pixel": masked L1 averaged per masked pixel; "sum": raw masked L1 sum
    tm_reduction: str = "pixel"

    @property
    def grid_size(self) -> int:
        return self.image_hw // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * 3

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type == "int" and v <= 0:
                raise ConfigError(f"model.{f.name} must be positive, got {v}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.image_hw % self.patch_size:
            raise ConfigError(f"image_hw {self.image_hw} not a multiple of patch_size {self.patch_size}")
        if self.max_text_len < 4:
            raise ConfigError("max_text_len must be >= 4")
        for name in ("r_h", "r_l"):
            r = getattr(self, name)
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {r}")
        if self.r_h + self.r_l > 1.0 + 1e-12:
            raise ConfigError(f"r_h + r_l must be <= 1, got {self.r_h} + {self.r_l}")
        if self.lambda_ic < 0 or self.lambda_tm < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0 < self.init_logit_scale <= self.max_logit_scale:
            raise ConfigError("init_logit_scale must lie in (0, max_logit_scale]")
        if self.tm_reduction not in ("pixel", "sum"):
            raise ConfigError(f"tm_reduction must be 'pixel' or 'sum', got {self.tm_reduction!r}")


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 32
    total_steps: int = 1000
    warmup_steps: int = 100
    peak_lr: float = 1e-3
    floor_lr: float = 0.0
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0  # global-norm clip; 0 disables
    itc: bool = True
    ic: bool = True
    mim: bool = False
    tgmim: bool = True
    masking: str = "attentive"  # attentive | random | none
    ic_masking: str = "restrict"  # restrict | substitute
    log_path: str = ""
    checkpoint_path: str = ""
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for the contrastive loss")
        if not 0 < self.warmup_steps < self.total_steps:
            raise ConfigError("require 0 < warmup_steps < total_steps")
        if self.peak_lr <= 0 or self.floor_lr < 0 or self.floor_lr > self.peak_lr:
            raise ConfigError("require peak_lr > 0 and 0 <= floor_lr <= peak_lr")
        if self.mim and self.tgmim:
            raise ConfigError("mim and tgmim are mutually exclusive")
        if self.masking not in ("attentive", "random", "none"):
            raise ConfigError(f"masking must be attentive, random or none, got {self.masking!r}")
        if self.ic_masking not in ("restrict", "substitute"):
            raise ConfigError(f"ic_masking must be restrict or substitute, got {self.ic_masking!r}")
        if (self.mim or self.tgmim) and self.masking == "none":
            raise ConfigError("masked image modeling needs masking = attentive or random")
        if not (self.itc or self.ic or self.mim or self.tgmim):
            raise ConfigError("at least one objective must be enabled")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")


@dataclass
class DataConfig:
    manifest: str = ""  # empty: generate synthetic pairs
    synthetic_count: int = 256
    synthetic_seed: int = 0
    enumerate_all: bool = True
    vocab: str = ""  # empty: train BPE on the training captions
    vocab_size: int = 512

    def validate(self) -> None:
        if self.synthetic_count < 1:
            raise ConfigError("synthetic_count must be >= 1")


@dataclass
class EvalConfig:
    prompt_template: str = "a photo of a {}"
    # "" uses prompt_template alone; "synthetic" fills the class name into every
    # color/position context of the synthetic caption template
    prompt_ensemble: str = ""
    prompt_reduction: str = "mean"  # mean | max over the ensemble
    classes: str = "circle,square,triangle"
    heldout_count: int = 64
    heldout_seed: int = 12345
    ks: str = "1,5,10"

    @property
    def class_list(self) -> list[str]:
        return [c.strip() for c in self.classes.split(",") if c.strip()]

    @property
    def k_list(self) -> list[int]:
        return [int(k) for k in self.ks.split(",") if k.strip()]

    def validate(self) -> None:
        if "{}" not in self.prompt_template:
            raise ConfigError("prompt_template must contain '{}'")
        if self.prompt_ensemble not in ("", "synthetic"):
            raise ConfigError(f"prompt_ensemble must be empty or 'synthetic', got {self.prompt_ensemble!r}")
        if self.prompt_reduction not in ("mean", "max"):
            raise ConfigError(f"prompt_reduction must be mean or max, got {self.prompt_reduction!r}")
        try:
            ks = self.k_list
        except ValueError:
            raise ConfigError(f"ks must be comma-separated integers, got {self.ks!r}") from None
        if not ks or min(ks) < 1:
            raise ConfigError("ks must be positive integers")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        self.train.validate()
        self.data.validate()
        self.eval.validate()
        return self

    def replace(self, **overrides) -> "RunConfig":
        """Copy with ``section.key`` overrides, e.g. ``replace(**{"train.ic": False})``."""
        new = copy_config(self)
        for dotted, value in overrides.items():
            section, key = dotted.split(".", 1)
            sec = getattr(new, section)
            if key not in {f.name for f in fields(sec)}:
                raise ConfigError(f"unknown key {dotted!r}")
            setattr(sec, key, value)
        return new.validate()


SECTIONS = ("model", "train", "data", "eval")


def copy_config(cfg: RunConfig) -> RunConfig:
    return RunConfig(**{s: dataclasses.replace(getattr(cfg, s)) for s in SECTIONS})


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(raw: str, typ: str, lineno: int, key: str):
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError
        if typ == "int":
            return int(raw)
        if typ == "float":
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError
            return v
        return raw
    except ValueError:
        raise ConfigError(f"config line {lineno}: invalid {typ} for {key!r}: {raw!r}") from None


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("["):
            if not stripped.endswith("]") or stripped[1:-1].strip() not in SECTIONS:
                raise ConfigError(f"config line {lineno}: unknown section {stripped!r}")
            section = stripped[1:-1].strip()
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        if section is None:
            raise ConfigError(f"config line {lineno}: key outside of a section")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        sec = getattr(cfg, section)
        types = {f.name: f.type for f in fields(sec)}
        if key not in types:
            raise ConfigError(f"config line {lineno}: unknown key {section}.{key}")
        setattr(sec, key, _parse_value(raw, types[key], lineno, key))
    try:
        return cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"config: {exc}") from None


def format_config(cfg: RunConfig) -> str:
    lines = []
    for s in SECTIONS:
        sec = getattr(cfg, s)
        lines.append(f"[{s}]")
        lines += [f"{f.name} = {_format_value(getattr(sec, f.name))}" for f in fields(sec)]
        lines.append("")
    return "\n".join(lines)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def parse_override(cfg: RunConfig, assignment: str) -> tuple[str, object]:
    """Parse ``section.key=value`` against ``cfg``'s field types."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r}: expected section.key=value")
    dotted, raw = (s.strip() for s in assignment.split("=", 1))
    section, _, key = dotted.partition(".")
    if section not in SECTIONS:
        raise ConfigError(f"override {assignment!r}: unknown section {section!r}")
    types = {f.name: f.type for f in fields(getattr(cfg, section))}
    if key not in types:
        raise ConfigError(f"override {assignment!r}: unknown key {dotted}")
    try:
        return dotted, _parse_value(raw, types[key], 0, key)
    except ConfigError:
        raise ConfigError(f"override {assignment!r}: invalid {types[key]} value") from None
