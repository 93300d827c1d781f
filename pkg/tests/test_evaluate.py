import re

import pytest

from ctxasr.data import CorpusConfig, SyntheticTask
from ctxasr.decoding import DecodeConfig
from ctxasr.evaluate import (
    UttResult,
    decode_corpus,
    load_eval_files,
    report_line,
    save_bias,
    save_refs,
    score_rows,
)
from ctxasr.model import EncoderConfig, ModelConfig, TransducerModel


@pytest.fixture(scope="module")
def task():
    cfg = CorpusConfig(
        n_common_words=20,
        n_rare_words=4,
        n_distractor_words=8,
        n_cont_tokens=8,
        min_words=3,
        max_words=4,
        feature_dim=8,
        noise_sigma=0.2,
        homophone_gap=0.5,
        rare_utt_fraction=0.3,
        rare_word_cap=0.1,
        n_utterances=12,
    )
    return SyntheticTask.generate(cfg, seed=0, n_test=4)


def small_model(task, seed=0, use_biasing=True):
    cfg = ModelConfig(
        vocab_size=len(task.lexicon.vocab),
        encoder=EncoderConfig(
            n_layers=2, width=8, n_heads=2, ffn_width=16, taps=(1,), feature_dim=8
        ),
        use_biasing=use_biasing,
        ctx_emb_dim=4,
        ctx_hidden=4,
        ctx_layers=1,
        cb_heads=2,
        joint_width=8,
        pred_width=8,
    )
    return TransducerModel(cfg, seed=seed)


FAST = DecodeConfig(k_beam=2, mu_ctc=0.0, mu_tr=1.0, max_symbols_per_frame=2)


class TestDecodeCorpus:
    def test_row_shape(self, task):
        rows = decode_corpus(small_model(task), task, FAST, m=3, limit=2)
        assert len(rows) == 2
        assert rows[0].utt_id == task.test[0].utt_id
        assert rows[0].ref_words == task.test[0].words
        assert all(len(r.bias_texts) == 3 for r in rows)

    def test_empty_bias_list_means_no_bias_words(self, task):
        rows = decode_corpus(small_model(task, use_biasing=False), task, FAST, m=0, limit=3)
        assert all(r.bias_texts == () for r in rows)
        b = score_rows(rows)
        assert b.n_bias == 0 and b.b_wer is None
        assert b.u_wer == b.wer

    def test_bias_lists_do_not_depend_on_the_model(self, task):
        rows_a = decode_corpus(small_model(task, seed=1), task, FAST, m=4, limit=3)
        rows_b = decode_corpus(small_model(task, seed=2), task, FAST, m=4, limit=3)
        assert [r.bias_texts for r in rows_a] == [r.bias_texts for r in rows_b]

    def test_bias_lists_differ_across_sizes(self, task):
        rows_a = decode_corpus(small_model(task, seed=1), task, FAST, m=3, limit=3)
        rows_b = decode_corpus(small_model(task, seed=1), task, FAST, m=4, limit=3)
        assert any(
            set(a.bias_texts) != set(b.bias_texts) for a, b in zip(rows_a, rows_b)
        )


class TestReport:
    def test_line_format(self):
        rows = [
            UttResult("u1", ("alpha", "beta"), ("alpha", "beta"), ("alpha",)),
            UttResult("u2", ("gamma",), ("beta",), ()),
        ]
        line = report_line("ib", 10, score_rows(rows))
        label, m, report = line.split("\t")
        assert (label, m) == ("ib", "M=10")
        assert re.fullmatch(r"\d+\.\d\d \(\d+\.\d\d/\d+\.\d\d\)", report)

    def test_scores_sum_per_utterance_bias_lists(self):
        # "alpha" is biased in u1 only; the same miss in u2 counts as unbiased
        rows = [
            UttResult("u1", ("alpha",), ("beta",), ("alpha",)),
            UttResult("u2", ("alpha",), ("beta",), ()),
        ]
        b = score_rows(rows)
        assert (b.n_bias, b.n_unbias) == (1, 1)
        assert b.sub_b == 1 and b.sub_u == 1


class TestPersistence:
    def test_round_trip_preserves_scores(self, task, tmp_path):
        model = small_model(task)
        with open(tmp_path / "nbest.tsv", "w") as f:
            rows = decode_corpus(model, task, FAST, m=3, limit=3, nbest_handle=f)
        save_refs(tmp_path / "refs.tsv", rows)
        save_bias(tmp_path / "bias.tsv", rows)

        again = load_eval_files(
            tmp_path / "refs.tsv", tmp_path / "nbest.tsv", tmp_path / "bias.tsv"
        )
        assert again == list(rows)
        assert score_rows(again) == score_rows(rows)

    def test_missing_hypothesis_is_an_error(self, task, tmp_path):
        model = small_model(task)
        with open(tmp_path / "nbest.tsv", "w") as f:
            rows = decode_corpus(model, task, FAST, m=0, limit=2, nbest_handle=f)
        save_refs(tmp_path / "refs.tsv", rows)
        save_bias(tmp_path / "bias.tsv", rows)
        kept = [
            line
            for line in (tmp_path / "nbest.tsv").read_text().splitlines()
            if not line.startswith(rows[1].utt_id)
        ]
        (tmp_path / "nbest.tsv").write_text("\n".join(kept) + "\n")
        with pytest.raises(ValueError, match="rank-1"):
            load_eval_files(tmp_path / "refs.tsv", tmp_path / "nbest.tsv", tmp_path / "bias.tsv")
