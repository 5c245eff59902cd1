"""Tokenization, vocabulary construction and caption encoding."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

from capforge.errors import ContractError, DataError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

_STRIP = str.maketrans("", "", ".,!?;:")


def tokenize(text: str) -> list[str]:
    """Lowercase, drop ``.,!?;:`` and split on whitespace."""
    return text.lower().translate(_STRIP).split()


@dataclass
class Vocabulary:
    tokens: list[str]
    min_count: int = 1
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != RESERVED:
            raise DataError("vocabulary must start with the reserved tokens")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    @property
    def words(self) -> list[str]:
        return self.tokens[4:]


def build_vocabulary(captions: Iterable[str], min_count: int = 1, max_size: int | None = None) -> Vocabulary:
    """Frequency-sorted vocabulary, ties broken lexicographically.

    ``max_size`` caps the number of non-reserved words.
    """
    if min_count < 1:
        raise ContractError("min_count must be >= 1")
    counts: Counter[str] = Counter()
    n = 0
    for caption in captions:
        counts.update(tokenize(caption))
        n += 1
    if n == 0:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    kept = sorted((w for w, c in counts.items() if c >= min_count and w not in RESERVED),
                  key=lambda w: (-counts[w], w))
    if max_size is not None:
        kept = kept[:max_size]
    return Vocabulary(list(RESERVED) + kept, min_count=min_count)


def encode_caption(v: Vocabulary, text: str, max_len: int) -> list[int]:
    """BOS + word ids + EOS, truncated to ``max_len`` with EOS kept last."""
    if max_len < 3:
        raise ContractError("max_len must be >= 3")
    ids = [v.id(t) for t in tokenize(text)][: max_len - 2]
    return [BOS, *ids, EOS]


def decode_caption(v: Vocabulary, ids: Iterable[int]) -> str:
    words = []
    for i in ids:
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        words.append(v.tokens[i])
    return " ".join(words)
