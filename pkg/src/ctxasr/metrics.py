"""Word-level edit alignment and the WER / U-WER / B-WER decomposition.

Every reference word is either "biased" (it appears in some bias-list
phrase) or not, and every edit error is attributed to exactly one side of
that split — substitutions and deletions by the reference word, insertions
by the hypothesis word — so bias and unbias error counts always sum to the
total. Corpus metrics are sums of per-utterance counts, never means of
per-utterance rates.
"""

from __future__ import annotations

from dataclasses import dataclass
from collections.abc import Iterable

UNDEFINED_MARK = "–"


@dataclass(frozen=True)
class EditOp:
    """One alignment step; positions index into ref/hyp, None where absent."""

    kind: str  # "match" | "sub" | "del" | "ins"
    ref_pos: int | None
    hyp_pos: int | None


@dataclass(frozen=True)
class Alignment:
    ops: tuple[EditOp, ...]
    distance: int


def _words(utt) -> list[str]:
    if isinstance(utt, str):
        return utt.split()
    return list(utt)


def align(ref, hyp) -> Alignment:
    """Minimal edit alignment of two word sequences.

    Ties are broken deterministically during backtrace, preferring
    match > sub > del > ins at equal total cost.
    """
    r, h = _words(ref), _words(hyp)
    n, m = len(r), len(h)
    dist = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        dist[i][0] = i
    for j in range(m + 1):
        dist[0][j] = j
    for i in range(1, n + 1):
        row, prev = dist[i], dist[i - 1]
        ri = r[i - 1]
        for j in range(1, m + 1):
            row[j] = min(
                prev[j - 1] + (ri != h[j - 1]),
                prev[j] + 1,
                row[j - 1] + 1,
            )

    ops: list[EditOp] = []
    i, j = n, m
    while i > 0 or j > 0:
        here = dist[i][j]
        if i > 0 and j > 0 and r[i - 1] == h[j - 1] and dist[i - 1][j - 1] == here:
            ops.append(EditOp("match", i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and dist[i - 1][j - 1] + 1 == here:
            ops.append(EditOp("sub", i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and dist[i - 1][j] + 1 == here:
            ops.append(EditOp("del", i - 1, None))
            i = i - 1
        else:
            ops.append(EditOp("ins", None, j - 1))
            j = j - 1
    ops.reverse()
    return Alignment(tuple(ops), dist[n][m])


@dataclass
class ErrorBreakdown:
    """Edit-error counts split by bias membership, plus reference sizes."""

    sub_b: int = 0
    del_b: int = 0
    ins_b: int = 0
    sub_u: int = 0
    del_u: int = 0
    ins_u: int = 0
    n_bias: int = 0
    n_unbias: int = 0

    def __add__(self, other: "ErrorBreakdown") -> "ErrorBreakdown":
        return ErrorBreakdown(
            self.sub_b + other.sub_b,
            self.del_b + other.del_b,
            self.ins_b + other.ins_b,
            self.sub_u + other.sub_u,
            self.del_u + other.del_u,
            self.ins_u + other.ins_u,
            self.n_bias + other.n_bias,
            self.n_unbias + other.n_unbias,
        )

    @property
    def bias_errors(self) -> int:
        return self.sub_b + self.del_b + self.ins_b

    @property
    def unbias_errors(self) -> int:
        return self.sub_u + self.del_u + self.ins_u

    @property
    def total_errors(self) -> int:
        return self.bias_errors + self.unbias_errors

    @property
    def wer(self) -> float | None:
        n = self.n_bias + self.n_unbias
        return None if n == 0 else 100.0 * self.total_errors / n

    @property
    def u_wer(self) -> float | None:
        return None if self.n_unbias == 0 else 100.0 * self.unbias_errors / self.n_unbias

    @property
    def b_wer(self) -> float | None:
        return None if self.n_bias == 0 else 100.0 * self.bias_errors / self.n_bias

    def as_dict(self) -> dict:
        return {
            "sub_b": self.sub_b, "del_b": self.del_b, "ins_b": self.ins_b,
            "sub_u": self.sub_u, "del_u": self.del_u, "ins_u": self.ins_u,
            "n_bias": self.n_bias, "n_unbias": self.n_unbias,
            "wer": self.wer, "u_wer": self.u_wer, "b_wer": self.b_wer,
        }


def bias_word_set(bias_list: Iterable[str]) -> frozenset[str]:
    """Words appearing in any bias phrase (phrases may be multiword)."""
    words: set[str] = set()
    for phrase in bias_list:
        words.update(phrase.split())
    return frozenset(words)


def wer_breakdown(refs, hyps, bias_list: Iterable[str]) -> ErrorBreakdown:
    """Score a corpus of (ref, hyp) pairs against one bias list.

    ``refs``/``hyps`` are parallel sequences of utterances (word lists or
    space-separated strings). Substitutions and deletions count against the
    reference word's side; insertions against the hypothesis word's side.
    """
    if len(refs) != len(hyps):
        raise ValueError(f"got {len(refs)} refs but {len(hyps)} hyps")
    biased = bias_word_set(bias_list)
    out = ErrorBreakdown()
    for ref, hyp in zip(refs, hyps):
        r, h = _words(ref), _words(hyp)
        for w in r:
            if w in biased:
                out.n_bias += 1
            else:
                out.n_unbias += 1
        for op in align(r, h).ops:
            if op.kind == "match":
                continue
            if op.kind == "ins":
                word, is_ref = h[op.hyp_pos], False
            else:
                word, is_ref = r[op.ref_pos], True
            hit = word in biased
            if op.kind == "sub":
                out.sub_b, out.sub_u = out.sub_b + hit, out.sub_u + (not hit)
            elif op.kind == "del":
                out.del_b, out.del_u = out.del_b + hit, out.del_u + (not hit)
            else:
                out.ins_b, out.ins_u = out.ins_b + hit, out.ins_u + (not hit)
    return out


def _fmt(rate: float | None) -> str:
    return UNDEFINED_MARK if rate is None else f"{rate:.2f}"


def format_report(b: ErrorBreakdown) -> str:
    """Render as "WER (U-WER/B-WER)" percentages with two decimals."""
    return f"{_fmt(b.wer)} ({_fmt(b.u_wer)}/{_fmt(b.b_wer)})"
