"""Byte-level BPE tokenizer with fixed special-token ids.

Sequence layout fed to the causal text encoder::

    BOS, content..., EOS, CLS, PAD, PAD, ...

CLS sits after EOS so that, under a causal mask, it sees every content token.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

PAD, BOS, EOS, CLS, UNK = 0, 1, 2, 3, 4
NUM_SPECIALS = 5
BYTE_OFFSET = NUM_SPECIALS
MIN_VOCAB = NUM_SPECIALS + 256
SPECIAL_IDS = frozenset(range(NUM_SPECIALS))

VOCAB_MAGIC = "SYCOCA-BPE v1"


class TokenizerError(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    merges: tuple[tuple[bytes, bytes], ...]
    tokens: tuple[bytes, ...] = field(repr=False)  # index = id; specials map to b""

    @classmethod
    def from_merges(cls, merges) -> "Vocabulary":
        merges = tuple((bytes(a), bytes(b)) for a, b in merges)
        tokens = [b""] * NUM_SPECIALS + [bytes([i]) for i in range(256)]
        for a, b in merges:
            tokens.append(a + b)
        return cls(merges=merges, tokens=tuple(tokens))

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def ranks(self) -> dict[tuple[bytes, bytes], int]:
        # cached on first access; dataclass is frozen so go through __dict__
        cached = self.__dict__.get("_ranks")
        if cached is None:
            cached = {pair: r for r, pair in enumerate(self.merges)}
            object.__setattr__(self, "_ranks", cached)
        return cached

    @property
    def token_to_id(self) -> dict[bytes, int]:
        cached = self.__dict__.get("_token_to_id")
        if cached is None:
            cached = {}
            for i, tok in enumerate(self.tokens):
                if i >= NUM_SPECIALS:
                    cached.setdefault(tok, i)
            object.__setattr__(self, "_token_to_id", cached)
        return cached

    # -- file format -------------------------------------------------------

    def dumps(self) -> str:
        lines = [VOCAB_MAGIC, str(self.size)]
        lines += [f"{a.hex()} {b.hex()}" for a, b in self.merges]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Vocabulary":
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if len(lines) < 2 or lines[0] != VOCAB_MAGIC:
            raise TokenizerError("vocabulary file: bad magic line")
        try:
            size = int(lines[1])
        except ValueError:
            raise TokenizerError("vocabulary file line 2: expected vocab size") from None
        merges = []
        for lineno, line in enumerate(lines[2:], start=3):
            parts = line.split(" ")
            if len(parts) != 2:
                raise TokenizerError(f"vocabulary file line {lineno}: expected two hex strings")
            try:
                a, b = bytes.fromhex(parts[0]), bytes.fromhex(parts[1])
            except ValueError:
                raise TokenizerError(f"vocabulary file line {lineno}: invalid hex") from None
            if not a or not b:
                raise TokenizerError(f"vocabulary file line {lineno}: empty token")
            merges.append((a, b))
        vocab = cls.from_merges(merges)
        if vocab.size != size:
            raise TokenizerError(
                f"vocabulary file declares size {size} but has {vocab.size} tokens"
            )
        return vocab

    def save(self, path) -> None:
        Path(path).write_bytes(self.dumps().encode("utf-8"))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.loads(Path(path).read_bytes().decode("utf-8"))


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]

    @property
    def pad_mask(self) -> tuple[bool, ...]:
        return tuple(i != PAD for i in self.ids)

    @property
    def length(self) -> int:
        return sum(self.pad_mask)

    @property
    def cls_index(self) -> int:
        return self.length - 1


def train_bpe(corpus: list[str], vocab_size: int) -> Vocabulary:
    """Learn byte-pair merges from ``corpus``.

    Each step merges the most frequent adjacent pair; ties go to the
    lexicographically smallest ``(left, right)`` pair. Stops early when no
    pair occurs at least once.
    """
    if vocab_size <= MIN_VOCAB:
        raise TokenizerError(f"vocab_size must exceed {MIN_VOCAB}, got {vocab_size}")
    if not corpus:
        raise TokenizerError("corpus is empty")

    # identical lines share a word entry weighted by count
    words = [
        ([bytes([b]) for b in line.encode("utf-8")], n)
        for line, n in sorted(Counter(corpus).items())
    ]
    merges: list[tuple[bytes, bytes]] = []
    while MIN_VOCAB + len(merges) < vocab_size:
        counts: Counter = Counter()
        for toks, n in words:
            for pair in zip(toks, toks[1:]):
                counts[pair] += n
        if not counts:
            break
        best = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        merged = best[0] + best[1]
        for toks, _ in words:
            i = 0
            while i < len(toks) - 1:
                if toks[i] == best[0] and toks[i + 1] == best[1]:
                    toks[i : i + 2] = [merged]
                i += 1
    return Vocabulary.from_merges(merges)


def _bpe(vocab: Vocabulary, text: str) -> list[int]:
    toks = [bytes([b]) for b in text.encode("utf-8")]
    ranks = vocab.ranks
    while len(toks) > 1:
        best_rank, best_pair = None, None
        for pair in zip(toks, toks[1:]):
            r = ranks.get(pair)
            if r is not None and (best_rank is None or r < best_rank):
                best_rank, best_pair = r, pair
        if best_pair is None:
            break
        merged, out, i = best_pair[0] + best_pair[1], [], 0
        while i < len(toks):
            if i < len(toks) - 1 and (toks[i], toks[i + 1]) == best_pair:
                out.append(merged)
                i += 2
            else:
                out.append(toks[i])
                i += 1
        toks = out
    t2i = vocab.token_to_id
    return [t2i.get(t, UNK) for t in toks]


def encode(vocab: Vocabulary, text: str, max_len: int) -> TokenSequence:
    """Tokenize ``text`` into a fixed-length BOS/EOS/CLS/PAD framed sequence.

    Content tokens are truncated so that BOS, EOS and CLS always fit.
    """
    if max_len < 4:
        raise TokenizerError(f"max_len must be >= 4, got {max_len}")
    content = _bpe(vocab, text)[: max_len - 3]
    ids = [BOS, *content, EOS, CLS]
    ids += [PAD] * (max_len - len(ids))
    return TokenSequence(tuple(ids))


def decode(vocab: Vocabulary, ids) -> str:
    out = bytearray()
    for i in ids:
        i = int(i)
        if not 0 <= i < vocab.size:
            raise TokenizerError(f"token id {i} out of range [0, {vocab.size})")
        if i not in SPECIAL_IDS:
            out += vocab.tokens[i]
    return out.decode("utf-8", errors="replace")
