"""Caption vocabulary: deterministic token ids with fixed reserved slots."""

from __future__ import annotations

import re

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list:
    """Lowercase alphanumeric runs; punctuation splits, never survives."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Bidirectional token/id map.  Ids 0..3 are reserved; real tokens get
    ids in sorted order so the mapping depends only on the token set."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tokens[: len(RESERVED)] != list(RESERVED):
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(tokens) != len(set(tokens)):
            raise ValueError("duplicate tokens in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def from_corpus(cls, texts) -> "Vocabulary":
        words = set()
        for text in texts:
            words.update(tokenize(text))
        if not words:
            raise ValueError("caption corpus produced no tokens")
        return cls(list(RESERVED) + sorted(words))

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def token_id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def encode(self, text: str) -> list:
        """Token ids for a caption, EOS-terminated, no BOS."""
        return [self.token_id(t) for t in tokenize(text)] + [EOS]

    def encode_padded(self, text: str, length: int) -> np.ndarray:
        ids = self.encode(text)
        if len(ids) > length:
            raise ValueError(f"caption needs {len(ids)} steps, limit is {length}")
        out = np.full(length, PAD, dtype=np.int64)
        out[: len(ids)] = ids
        return out

    def decode(self, ids) -> str:
        """Words joined by spaces; stops at EOS, skips PAD/BOS."""
        words = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            words.append(self.tokens[i] if 0 <= i < len(self.tokens) else RESERVED[UNK])
        return " ".join(words)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh if line.strip()]
        return cls(tokens)


def build_vocabulary(corpus) -> Vocabulary:
    return Vocabulary.from_corpus(corpus)
