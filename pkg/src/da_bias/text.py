"""Character vocabulary used for transcripts and catalog entities."""

from __future__ import annotations

from typing import Iterable

# 30 symbols; the transducer blank is id len(VOCAB)
VOCAB = " abcdefghijklmnopqrstuvwxyz'-."
VOCAB_SIZE = len(VOCAB)
SPACE = 0
_INDEX = {ch: i for i, ch in enumerate(VOCAB)}


def encode(text: str) -> list[int]:
    try:
        return [_INDEX[ch] for ch in text.lower()]
    except KeyError as e:
        raise ValueError(f"character {e.args[0]!r} is not in the vocabulary") from None


def decode(ids: Iterable[int]) -> str:
    return "".join(VOCAB[i] for i in ids if 0 <= i < VOCAB_SIZE)


def words(ids: Iterable[int]) -> list[str]:
    return decode(ids).split()
