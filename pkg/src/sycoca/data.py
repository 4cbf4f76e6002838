"""Image-text pair ingestion, patchification, batching and synthetic data."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .tokenizer import Vocabulary, encode


class DataError(ValueError):
    pass


class ConfigurationError(DataError):
    pass


class ImageFormatError(DataError):
    pass


COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.1),
    "blue": (0.1, 0.2, 0.9),
    "yellow": (0.95, 0.9, 0.1),
    "cyan": (0.1, 0.85, 0.9),
    "magenta": (0.85, 0.1, 0.85),
}
SHAPES = ("circle", "square", "triangle")
POSITIONS = ("top left", "top right", "bottom left", "bottom right")
BACKGROUND = 0.5
COMBINATIONS = tuple(itertools.product(COLORS, SHAPES, POSITIONS))


def caption_for(color: str, shape: str, position: str) -> str:
    return f"a {color} {shape} at the {position}"


@dataclass(frozen=True)
class PatchGrid:
    patches: np.ndarray  # (P, patch_size * patch_size * 3), row-major over the grid
    grid_h: int
    grid_w: int
    patch_size: int

    @property
    def num_patches(self) -> int:
        return self.grid_h * self.grid_w


@dataclass(frozen=True)
class PairRecord:
    image_source: str
    caption: str
    id: int


@dataclass
class Batch:
    patches: torch.Tensor  # (N, P, patch_dim)
    token_ids: torch.Tensor  # (N, max_len) int64
    ids: list[int]
    grid_h: int
    grid_w: int
    patch_size: int

    def __len__(self) -> int:
        return len(self.ids)


# -- loading --------------------------------------------------------------


def load_manifest(path) -> list[PairRecord]:
    """Parse ``image_path<TAB>caption`` lines; the 0-based line number is the id."""
    text = Path(path).read_bytes().decode("utf-8")
    records = []
    for lineno, line in enumerate(text.splitlines()):
        if not line.strip():
            continue
        if "\t" not in line:
            raise DataError(f"manifest line {lineno + 1}: expected TAB")
        src, caption = line.split("\t", 1)
        records.append(PairRecord(image_source=src, caption=caption, id=lineno))
    return records


def _ppm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PPM header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates header from raster
    return tokens, pos + 1


def resize_nearest(img: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    h, w = img.shape[:2]
    th, tw = target_hw
    if (h, w) == (th, tw):
        return img
    rows = (np.arange(th) * h) // th
    cols = (np.arange(tw) * w) // tw
    return img[rows][:, cols]


def load_image_ppm(path, target_hw: tuple[int, int] | None = None) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] != b"P6":
        raise ImageFormatError(f"{path}: expected binary PPM (P6), got {data[:2]!r}")
    tokens, offset = _ppm_tokens(data, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageFormatError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"{path}: invalid dimensions {width}x{height}")
    n = width * height * 3
    raster = data[offset : offset + n]
    if len(raster) != n:
        raise ImageFormatError(f"{path}: truncated payload ({len(raster)} of {n} bytes)")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    img = img.astype(np.float32) / np.float32(255.0)
    if target_hw is not None:
        img = resize_nearest(img, tuple(target_hw))
    return img


def save_image_ppm(img: np.ndarray, path) -> None:
    h, w, _ = img.shape
    raster = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + raster.tobytes())


# -- synthetic ------------------------------------------------------------


def _render(hw: int, color: str, shape: str, position: str, rng: np.random.Generator) -> np.ndarray:
    img = np.full((hw, hw, 3), BACKGROUND, dtype=np.float32)
    q = hw // 2
    radius = rng.uniform(0.38, 0.42) * q
    # jitter around the quadrant centre, shape kept inside the quadrant
    jitter = min(max(q / 2 - radius - 0.5, 0.0), q / 10)
    cy = q / 2 + rng.uniform(-jitter, jitter) + (q if position.startswith("bottom") else 0)
    cx = q / 2 + rng.uniform(-jitter, jitter) + (q if position.endswith("right") else 0)
    ys, xs = np.mgrid[0:hw, 0:hw] + 0.5
    if shape == "circle":
        inside = (ys - cy) ** 2 + (xs - cx) ** 2 <= radius**2
    elif shape == "square":
        inside = (np.abs(ys - cy) <= radius) & (np.abs(xs - cx) <= radius)
    else:
        # apex up, base at cy + radius
        depth = (ys - (cy - radius)) / (2 * radius)
        inside = (depth >= 0) & (depth <= 1) & (np.abs(xs - cx) <= radius * depth)
    img[inside] = COLORS[color]
    return img


def generate_synthetic(
    count: int, image_hw: int = 32, seed: int = 0, patch_size: int = 8, enumerate_all: bool = True
) -> list[tuple[np.ndarray, str]]:
    """Render ``count`` single-shape images with templated captions.

    With ``enumerate_all`` the 72 (color, shape, position) combinations are
    cycled in a seeded shuffled order, so ``count = 72 k`` covers each
    combination exactly ``k`` times; otherwise combinations are drawn
    uniformly. Shape size and placement within the quadrant are jittered.
    """
    if count < 1:
        raise ConfigurationError(f"count must be >= 1, got {count}")
    if image_hw <= 0 or image_hw % patch_size or image_hw % 2:
        raise ConfigurationError(
            f"image_hw {image_hw} must be a positive even multiple of patch size {patch_size}"
        )
    rng = np.random.default_rng(seed)
    if enumerate_all:
        order = []
        while len(order) < count:
            order.extend(rng.permutation(len(COMBINATIONS)).tolist())
        order = order[:count]
    else:
        order = rng.integers(0, len(COMBINATIONS), size=count).tolist()
    out = []
    for idx in order:
        color, shape, position = COMBINATIONS[idx]
        out.append((_render(image_hw, color, shape, position, rng), caption_for(color, shape, position)))
    return out


def synthetic_prompt_templates() -> list[str]:
    """Class-name slots in every color/position context of the caption template."""
    return [caption_for(c, "{}", p) for c in COLORS for p in POSITIONS]


def parse_caption(caption: str) -> tuple[str, str, str]:
    """Inverse of :func:`caption_for`; raises on captions outside the template."""
    for color, shape, position in COMBINATIONS:
        if caption == caption_for(color, shape, position):
            return color, shape, position
    raise DataError(f"not a synthetic caption: {caption!r}")


# -- patches --------------------------------------------------------------


def patchify(img: np.ndarray, patch_size: int) -> PatchGrid:
    h, w, c = img.shape
    if patch_size <= 0 or h % patch_size or w % patch_size:
        raise ConfigurationError(f"image {h}x{w} is not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    p = img.reshape(gh, patch_size, gw, patch_size, c).transpose(0, 2, 1, 3, 4)
    return PatchGrid(p.reshape(gh * gw, patch_size * patch_size * c), gh, gw, patch_size)


def unpatchify(grid: PatchGrid) -> np.ndarray:
    ps = grid.patch_size
    p = np.asarray(grid.patches).reshape(grid.grid_h, grid.grid_w, ps, ps, 3)
    return p.transpose(0, 2, 1, 3, 4).reshape(grid.grid_h * ps, grid.grid_w * ps, 3)


def make_batch(
    records: list[PairRecord],
    images: list[np.ndarray],
    vocab: Vocabulary,
    patch_size: int,
    max_text_len: int,
    image_hw: int | None = None,
) -> Batch:
    if len(records) < 2:
        raise DataError(f"a batch needs at least 2 pairs for contrastive loss, got {len(records)}")
    if len(records) != len(images):
        raise DataError("records and images differ in length")
    grids = []
    for img in images:
        if image_hw is not None:
            img = resize_nearest(img, (image_hw, image_hw))
        grids.append(patchify(img, patch_size))
    shapes = {(g.grid_h, g.grid_w) for g in grids}
    if len(shapes) != 1:
        raise ConfigurationError(f"images produce differing patch grids: {sorted(shapes)}")
    gh, gw = shapes.pop()
    tokens = [encode(vocab, r.caption, max_text_len).ids for r in records]
    return Batch(
        patches=torch.from_numpy(np.stack([g.patches for g in grids]).astype(np.float32)),
        token_ids=torch.tensor(tokens, dtype=torch.long),
        ids=[r.id for r in records],
        grid_h=gh,
        grid_w=gw,
        patch_size=patch_size,
    )
