"""WER, WERR and slot-level scoring."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np

# alignment operations
MATCH, SUB, INS, DEL = "M", "S", "I", "D"


class UndefinedMetricError(ValueError):
    pass


@dataclass
class WerStats:
    substitutions: int = 0
    insertions: int = 0
    deletions: int = 0
    reference_length: int = 0

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions

    @property
    def wer(self) -> float:
        if self.reference_length <= 0:
            raise UndefinedMetricError("WER is undefined for an empty reference")
        return self.errors / self.reference_length

    def __add__(self, other: "WerStats") -> "WerStats":
        return WerStats(self.substitutions + other.substitutions, self.insertions + other.insertions,
                        self.deletions + other.deletions, self.reference_length + other.reference_length)


def align(ref: Sequence[Hashable], hyp: Sequence[Hashable]) -> list[tuple[str, int, int]]:
    """Minimal unit-cost edit alignment.

    Returns ``(op, ref_index, hyp_index)`` triples in order; for insertions
    ``ref_index`` is the number of reference tokens consumed so far, for
    deletions ``hyp_index`` likewise.  Ties during the backtrace prefer
    match/substitution, then insertion, then deletion.
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]), d[i, j - 1] + 1, d[i - 1, j] + 1)
    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            ops.append((MATCH if ref[i - 1] == hyp[j - 1] else SUB, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif j > 0 and d[i, j] == d[i, j - 1] + 1:
            ops.append((INS, i, j - 1))
            j -= 1
        else:
            ops.append((DEL, i - 1, j))
            i -= 1
    ops.reverse()
    return ops


def _count(ops) -> WerStats:
    s = sum(op == SUB for op, _, _ in ops)
    ins = sum(op == INS for op, _, _ in ops)
    dl = sum(op == DEL for op, _, _ in ops)
    return WerStats(s, ins, dl)


def wer(reference: Sequence[Hashable], hypothesis: Sequence[Hashable]) -> WerStats:
    if len(reference) == 0:
        raise UndefinedMetricError("WER is undefined for an empty reference")
    stats = _count(align(reference, hypothesis))
    stats.reference_length = len(reference)
    return stats


def werr(wer_baseline: float, wer_model: float) -> float:
    """Relative WER reduction in percent; negative means degradation."""
    if wer_baseline <= 0:
        raise UndefinedMetricError("WERR is undefined for a zero baseline WER")
    return 100.0 * (wer_baseline - wer_model) / wer_baseline


def slot_wer(reference: Sequence[Hashable], hypothesis: Sequence[Hashable],
             slot_spans: Sequence[tuple[int, int, str]]) -> dict[str, WerStats]:
    """Per-slot-type errors restricted to reference positions inside spans.

    Substitutions and deletions count at their reference position.  An
    insertion counts for a span ``[s, e)`` when it falls between two
    reference tokens of that span.
    """
    n = len(reference)
    for s, e, _ in slot_spans:
        if not (0 <= s < e <= n):
            raise ValueError(f"slot span ({s}, {e}) is invalid for a reference of length {n}")
    ops = align(reference, hypothesis)
    out: dict[str, WerStats] = {}
    for s, e, stype in slot_spans:
        st = out.setdefault(stype, WerStats())
        st.reference_length += e - s
        for op, i, _ in ops:
            if op in (SUB, DEL) and s <= i < e:
                if op == SUB:
                    st.substitutions += 1
                else:
                    st.deletions += 1
            elif op == INS and s < i < e:
                st.insertions += 1
    return out


def char_spans_to_words(tokens_text: str, spans: Sequence[tuple[int, int, str]]) -> list[tuple[int, int, str]]:
    """Map character spans of a space-separated transcript to word spans."""
    starts = []
    pos = 0
    for w in tokens_text.split(" "):
        starts.append(pos)
        pos += len(w) + 1
    out = []
    for s, e, t in spans:
        ws = sum(1 for p in starts if p <= s) - 1
        we = sum(1 for p in starts if p < e)
        out.append((ws, we, t))
    return out
