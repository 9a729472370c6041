"""Token inventory shared by the CTC heads, the decoder and the LM.

Id layout: 0 is the CTC blank, base tokens follow in file order, dialect
tags come after them and a single sos/eos symbol closes the table.  CTC
heads see ids ``0..len(tokens)``; decoder and LM outputs also cover sos/eos.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

DIALECTS = ("UL", "CO", "MU")
TAGS = tuple(f"[{d}]" for d in DIALECTS)
SOS_EOS = "<sos/eos>"
BLANK_SYMBOL = "<blank>"


class VocabularyError(ValueError):
    pass


class LabelError(ValueError):
    pass


def is_tag(symbol: str) -> bool:
    return len(symbol) > 2 and symbol.startswith("[") and symbol.endswith("]")


@dataclass
class Vocabulary:
    tokens: List[str] = field(default_factory=list)  # base tokens then tags; id = index + 1

    def __post_init__(self):
        self._index: Dict[str, int] = {}
        for i, tok in enumerate(self.tokens, start=1):
            if tok in self._index:
                raise VocabularyError(f"duplicate token {tok!r}")
            self._index[tok] = i

    def __len__(self) -> int:
        """|V'|: base tokens plus tags (blank and sos/eos excluded)."""
        return len(self.tokens)

    @property
    def blank(self) -> int:
        return 0

    @property
    def sos(self) -> int:
        return len(self.tokens) + 1

    eos = sos

    @property
    def ctc_dim(self) -> int:
        return len(self.tokens) + 1

    @property
    def output_dim(self) -> int:
        return len(self.tokens) + 2

    @property
    def tag_ids(self) -> List[int]:
        return [self._index[t] for t in self.tokens if is_tag(t)]

    @property
    def base_ids(self) -> List[int]:
        return [self._index[t] for t in self.tokens if not is_tag(t)]

    def tag_id(self, dialect: str) -> int:
        tag = dialect if is_tag(dialect) else f"[{dialect}]"
        if tag not in self._index or not is_tag(tag):
            raise LabelError(f"unknown dialect {dialect!r}; known: {[self.tokens[i - 1] for i in self.tag_ids]}")
        return self._index[tag]

    def dialect_of(self, token_id: int) -> str:
        return self.tokens[token_id - 1][1:-1]

    def is_tag_id(self, token_id: int) -> bool:
        return 1 <= token_id <= len(self.tokens) and is_tag(self.tokens[token_id - 1])

    def encode(self, words: Iterable[str]) -> List[int]:
        out = []
        for w in words:
            if w not in self._index:
                raise VocabularyError(f"token {w!r} not in vocabulary")
            out.append(self._index[w])
        return out

    def decode(self, ids: Iterable[int]) -> List[str]:
        names = [BLANK_SYMBOL] + self.tokens + [SOS_EOS]
        return [names[i] for i in ids]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


def extend_vocab(base: Vocabulary, tags: Sequence[str] = TAGS) -> Vocabulary:
    """V' = V plus dialect tags appended after the base tokens."""
    for tag in tags:
        if tag in base._index:
            raise VocabularyError(f"tag {tag} already present in the vocabulary")
    return Vocabulary(list(base.tokens) + list(tags))


def base_vocabulary(size: int) -> Vocabulary:
    return Vocabulary([f"w{i:02d}" for i in range(size)])
