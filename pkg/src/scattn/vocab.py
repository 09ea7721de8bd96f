"""Token/id bijection with four fixed control tokens.

Ids 0-3 are reserved: 0 padding, 1 sequence start, 2 sequence end,
3 unknown word. File format: one token per line, line number = id, so the
first four lines are always the reserved tokens.
"""

from __future__ import annotations

from .errors import VocabularyError

PAD, START, END, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<start>", "<end>", "<unk>")


class Vocabulary:
    def __init__(self, words):
        words = list(words)
        if not words:
            raise VocabularyError("vocabulary needs at least one word beyond the reserved four")
        seen = set(RESERVED)
        for w in words:
            if w in seen:
                raise VocabularyError(f"duplicate or reserved token {w!r}")
            seen.add(w)
        self._tokens = list(RESERVED) + words
        self._ids = {t: i for i, t in enumerate(self._tokens)}

    @property
    def size(self):
        return len(self._tokens)

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token):
        return token in self._ids

    def id_for(self, token):
        """Id of a token; unknown words map to the UNK id."""
        return self._ids.get(token, UNK)

    def token_for(self, idx):
        if not 0 <= idx < len(self._tokens):
            raise VocabularyError(f"token id {idx} out of range 0..{len(self._tokens) - 1}")
        return self._tokens[idx]

    def encode(self, tokens):
        return [self.id_for(t) for t in tokens]

    def decode(self, ids):
        return [self.token_for(i) for i in ids]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for t in self._tokens:
                fh.write(t + "\n")

    @staticmethod
    def load(path):
        with open(path, encoding="utf-8") as fh:
            lines = [line.rstrip("\n") for line in fh]
        while lines and lines[-1] == "":
            lines.pop()
        if len(lines) < 5:
            raise VocabularyError(f"vocabulary file {path} has {len(lines)} entries, need at least 5")
        if tuple(lines[:4]) != RESERVED:
            raise VocabularyError(
                f"vocabulary file {path} must start with {', '.join(RESERVED)}"
            )
        return Vocabulary(lines[4:])
