"""Fixed word-level token table shared by the corpus generator and the models.

The token space is tiny and closed: special tokens, the ten digits (which
double as glyph values), and a handful of task keywords. Multi-digit words
("42") expand into one token per digit, so every string round-trips through
`encode`/`decode` without a learned tokenizer.
"""

from __future__ import annotations

PAD = 0
EOS = 1

DIGIT_BASE = 2  # token id of digit d is DIGIT_BASE + d

_KEYWORDS = ["transcribe", "region", "count", "sum", "cot", "="]

# Glyphs are rendered as their decimal value, so the alphabet is capped by
# the ten digit tokens.
MAX_ALPHABET = 10

# Coordinates get their own tokens (r0..r9 / c0..c9): instruction addressing
# must not share embeddings with digit content.
MAX_COORD = 10

_WORD_TO_ID: dict[str, int] = {"<pad>": PAD, "<eos>": EOS}
for _d in range(10):
    _WORD_TO_ID[str(_d)] = DIGIT_BASE + _d
for _i, _kw in enumerate(_KEYWORDS):
    _WORD_TO_ID[_kw] = DIGIT_BASE + 10 + _i
_COORD_BASE = DIGIT_BASE + 10 + len(_KEYWORDS)
for _d in range(MAX_COORD):
    _WORD_TO_ID[f"r{_d}"] = _COORD_BASE + _d
    _WORD_TO_ID[f"c{_d}"] = _COORD_BASE + MAX_COORD + _d

_ID_TO_WORD = {i: w for w, i in _WORD_TO_ID.items()}

VOCAB_USED = len(_WORD_TO_ID)  # ids below this are meaningful; the rest is headroom


def digit_token(d: int) -> int:
    if not 0 <= d <= 9:
        raise ValueError(f"not a digit: {d}")
    return DIGIT_BASE + d


def keyword_token(word: str) -> int:
    return _WORD_TO_ID[word]


def encode(text: str) -> list[int]:
    """Tokenize a whitespace-separated string; digit runs expand per digit."""
    ids: list[int] = []
    for word in text.split():
        if word in _WORD_TO_ID and not word.isdigit():
            ids.append(_WORD_TO_ID[word])
        elif word.isdigit():
            ids.extend(DIGIT_BASE + int(ch) for ch in word)
        else:
            raise ValueError(f"unknown word: {word!r}")
    return ids


def decode(ids: list[int]) -> str:
    """Inverse of encode up to digit grouping: digits come back space-separated."""
    words = []
    for i in ids:
        if i in (PAD, EOS):
            continue
        if i not in _ID_TO_WORD:
            raise ValueError(f"unknown token id: {i}")
        words.append(_ID_TO_WORD[i])
    return " ".join(words)
