"""Levenshtein alignment and corpus-level WER/CER.

The alignment routine is also the engine behind confusion-network
construction in the fusion module, so its tie-breaking is fixed:
match > substitute > delete > insert.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

__all__ = ["EditOp", "EditAlignment", "align", "wer", "cer"]


@dataclass(frozen=True)
class EditOp:
    kind: str  # "match" | "substitute" | "delete" | "insert"
    ref: str | None
    hyp: str | None


@dataclass(frozen=True)
class EditAlignment:
    ops: tuple[EditOp, ...]
    matches: int
    substitutions: int
    insertions: int
    deletions: int

    @property
    def cost(self) -> int:
        return self.substitutions + self.insertions + self.deletions


_MATCH, _SUB, _DEL, _INS = 0, 1, 2, 3


def align(ref: Sequence[str], hyp: Sequence[str]) -> EditAlignment:
    """Minimal-cost alignment of hyp against ref with unit costs.

    Ties are broken preferring match > substitute > delete > insert,
    applied during backtrace from the end of both sequences.
    """
    n, m = len(ref), len(hyp)
    # dp[i][j] = min edits between ref[:i] and hyp[:j]
    dp = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        dp[i][0] = i
    for j in range(1, m + 1):
        dp[0][j] = j
    for i in range(1, n + 1):
        ri = ref[i - 1]
        row, prev = dp[i], dp[i - 1]
        for j in range(1, m + 1):
            sub = prev[j - 1] + (0 if ri == hyp[j - 1] else 1)
            row[j] = min(sub, prev[j] + 1, row[j - 1] + 1)

    ops: list[EditOp] = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and dp[i][j] == dp[i - 1][j - 1]:
            ops.append(EditOp("match", ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and dp[i][j] == dp[i - 1][j - 1] + 1:
            ops.append(EditOp("substitute", ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and dp[i][j] == dp[i - 1][j] + 1:
            ops.append(EditOp("delete", ref[i - 1], None))
            i -= 1
        else:
            ops.append(EditOp("insert", None, hyp[j - 1]))
            j -= 1
    ops.reverse()

    counts = {"match": 0, "substitute": 0, "delete": 0, "insert": 0}
    for op in ops:
        counts[op.kind] += 1
    return EditAlignment(
        ops=tuple(ops),
        matches=counts["match"],
        substitutions=counts["substitute"],
        insertions=counts["insert"],
        deletions=counts["delete"],
    )


def _pooled_error(refs: Sequence[Sequence[str]], hyps: Sequence[Sequence[str]]) -> float:
    if len(refs) != len(hyps):
        raise ValueError(f"got {len(refs)} references but {len(hyps)} hypotheses")
    total_ref = sum(len(r) for r in refs)
    if total_ref == 0:
        raise ValueError("total reference length is zero")
    errors = 0
    for r, h in zip(refs, hyps):
        a = align(r, h)
        errors += a.cost
    return errors / total_ref


def wer(refs: Sequence[Sequence[str]], hyps: Sequence[Sequence[str]]) -> float:
    """Corpus-level word error rate: pooled (S+I+D) / pooled reference length."""
    return _pooled_error(refs, hyps)


def cer(refs: Sequence[Sequence[str]], hyps: Sequence[Sequence[str]]) -> float:
    """Corpus-level character error rate on the space-joined character stream."""
    ref_chars = [list(" ".join(r)) for r in refs]
    hyp_chars = [list(" ".join(h)) for h in hyps]
    return _pooled_error(ref_chars, hyp_chars)
