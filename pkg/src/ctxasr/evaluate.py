"""Test-set decoding and scoring: the bridge between model and metrics.

Each test utterance is decoded against its own bias list (its rare words
plus sampled distractors, or the no-bias list at M=0). Bias lists are
drawn from a stream seeded by (task seed, M) only, so every model under
comparison sees identical lists. Scoring sums per-utterance error
breakdowns, and every report is regenerable from the persisted
reference/bias/N-best files without the model.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import SyntheticTask, build_test_bias_list
from .decoding import DecodeConfig, decode_utterance, write_nbest
from .metrics import ErrorBreakdown, format_report, wer_breakdown
from .model import TransducerModel


@dataclass(frozen=True)
class UttResult:
    utt_id: str
    ref_words: tuple[str, ...]
    hyp_words: tuple[str, ...]
    bias_texts: tuple[str, ...]  # real bias phrases shown for this utterance


def bias_rng(task_seed: int, m: int) -> np.random.Generator:
    """Bias-list sampling stream independent of the model under test."""
    return np.random.default_rng(np.random.SeedSequence((task_seed, 2, m)))


def decode_corpus(
    model: TransducerModel,
    task: SyntheticTask,
    cfg: DecodeConfig,
    m: int,
    l_max: int = 10,
    nbest_handle=None,
    limit: int | None = None,
) -> list[UttResult]:
    """Decode the test split against per-utterance size-``m`` bias lists."""
    rng = bias_rng(task.seed, m)
    rows = []
    utts = task.test if limit is None else task.test[:limit]
    for utt in utts:
        bias = build_test_bias_list(utt, task.distractor_pool, m, task.lexicon, rng, l_max)
        hyps = decode_utterance(model, utt.features, bias, cfg)
        if nbest_handle is not None:
            write_nbest(nbest_handle, utt.utt_id, hyps, task.lexicon, cfg)
        rows.append(
            UttResult(
                utt_id=utt.utt_id,
                ref_words=tuple(utt.words),
                hyp_words=tuple(task.lexicon.tokens_to_words(hyps[0].tokens)),
                bias_texts=bias.real_texts(),
            )
        )
    return rows


def score_rows(rows) -> ErrorBreakdown:
    """Sum per-utterance breakdowns, each against its own bias list."""
    total = ErrorBreakdown()
    for row in rows:
        total = total + wer_breakdown([row.ref_words], [row.hyp_words], row.bias_texts)
    return total


def report_line(label: str, m: int, b: ErrorBreakdown) -> str:
    return f"{label}\tM={m}\t{format_report(b)}"


# ---------------- persistence ----------------


def save_refs(path, rows) -> None:
    with open(path, "w") as f:
        for row in rows:
            f.write(f"{row.utt_id}\t{' '.join(row.ref_words)}\n")


def save_bias(path, rows) -> None:
    with open(path, "w") as f:
        for row in rows:
            f.write("\t".join([row.utt_id, *row.bias_texts]) + "\n")


def load_eval_files(refs_path, nbest_path, bias_path) -> list[UttResult]:
    """Rebuild scoring rows from persisted files (rank-1 hypotheses)."""
    refs = {}
    order = []
    for line in Path(refs_path).read_text().splitlines():
        utt_id, _, words = line.partition("\t")
        refs[utt_id] = tuple(words.split())
        order.append(utt_id)

    bias = {}
    for line in Path(bias_path).read_text().splitlines():
        fields = line.split("\t")
        bias[fields[0]] = tuple(fields[1:])

    hyps = {}
    for line in Path(nbest_path).read_text().splitlines():
        fields = line.split("\t")
        utt_id, rank = fields[0], int(fields[1])
        if rank == 1:
            hyps[utt_id] = tuple(fields[5].split()) if len(fields) > 5 else ()

    missing = [u for u in order if u not in hyps]
    if missing:
        raise ValueError(f"no rank-1 hypothesis for {len(missing)} utterances, e.g. {missing[0]}")
    return [
        UttResult(
            utt_id=u,
            ref_words=refs[u],
            hyp_words=hyps[u],
            bias_texts=bias.get(u, ()),
        )
        for u in order
    ]
