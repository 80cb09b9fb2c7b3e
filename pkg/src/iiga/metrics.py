"""Word error rate and its edit-operation decomposition.

Counts come from a unit-cost Levenshtein DP. The total distance is unique;
the split into substitutions/deletions/insertions is not, so the backtrace
prefers match > substitution > deletion > insertion to keep the decomposition
reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence


class UndefinedMetricError(ValueError):
    """WER requested over a corpus with zero reference tokens."""


@dataclass(frozen=True)
class EditCounts:
    subs: int
    dels: int
    ins: int

    @property
    def total(self) -> int:
        return self.subs + self.dels + self.ins


def edit_ops(reference: Sequence, hypothesis: Sequence) -> EditCounts:
    """Minimal edit counts transforming `hypothesis` into `reference`."""
    n, m = len(reference), len(hypothesis)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dist[i][0] = i
    for j in range(1, m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        ref_tok = reference[i - 1]
        row, above = dist[i], dist[i - 1]
        for j in range(1, m + 1):
            sub = above[j - 1] + (ref_tok != hypothesis[j - 1])
            row[j] = min(sub, above[j] + 1, row[j - 1] + 1)

    subs = dels = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        here = dist[i][j]
        if i > 0 and j > 0 and reference[i - 1] == hypothesis[j - 1] \
                and dist[i - 1][j - 1] == here:
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and dist[i - 1][j - 1] + 1 == here:
            subs += 1
            i, j = i - 1, j - 1
        elif i > 0 and dist[i - 1][j] + 1 == here:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(subs, dels, ins)


def wer(pairs: Sequence[tuple[Sequence, Sequence]]) -> float:
    """Corpus-pooled word error rate: sum all edit counts, then divide once."""
    ref_tokens = sum(len(ref) for ref, _ in pairs)
    if ref_tokens == 0:
        raise UndefinedMetricError("total reference length is zero")
    errors = sum(edit_ops(ref, hyp).total for ref, hyp in pairs)
    return errors / ref_tokens
