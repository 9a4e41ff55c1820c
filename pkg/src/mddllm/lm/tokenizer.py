"""Word-level tokenizer: lower-cased words, single punctuation marks, one token per digit."""

from __future__ import annotations

import re
from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)

# a digit, a run of letters (incl. other alphanumerics such as "²"), or one symbol
_TOKEN_RE = re.compile(r"\d|[^\W\d_]+|[^\w\s]|_")


def split_tokens(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def normalize(text: str) -> str:
    """What ``decode(encode(text))`` returns when no token is unknown."""
    return " ".join(split_tokens(text))


class Tokenizer:
    def __init__(self, vocab: Sequence[str]):
        if len(vocab) <= len(SPECIALS):
            raise ValueError("empty vocabulary")
        if tuple(vocab[: len(SPECIALS)]) != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        if len(set(vocab)) != len(vocab):
            raise ValueError("duplicate tokens in vocabulary")
        self.vocab = list(vocab)
        self.index = {tok: i for i, tok in enumerate(self.vocab)}
        self.pad_id, self.bos_id, self.eos_id, self.unk_id = range(4)

    def __len__(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(tok, self.unk_id) for tok in split_tokens(text)]

    def decode(self, ids: Iterable[int]) -> str:
        skip = {self.pad_id, self.bos_id, self.eos_id}
        return " ".join(self.vocab[i] for i in ids if i not in skip)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.vocab) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())

    def content_hash(self) -> str:
        import hashlib
        return hashlib.sha256("\n".join(self.vocab).encode("utf-8")).hexdigest()


def build_vocab(texts: Iterable[str], min_count: int = 1, max_size: int | None = None) -> Tokenizer:
    """Vocabulary ordered by descending frequency, ties broken alphabetically."""
    counts = Counter()
    for text in texts:
        counts.update(split_tokens(text))
    words = sorted((w for w, c in counts.items() if c >= min_count and w not in SPECIALS),
                   key=lambda w: (-counts[w], w))
    if max_size is not None:
        words = words[: max(0, max_size - len(SPECIALS))]
    if not words:
        raise ValueError("empty vocabulary: no token reaches min_count")
    return Tokenizer([*SPECIALS, *words])
