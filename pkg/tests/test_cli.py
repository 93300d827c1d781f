import json
import re

import pytest

from ctxasr.cli import main
from ctxasr.data import CorpusConfig
from ctxasr.decoding import DecodeConfig
from ctxasr.model import EncoderConfig, ModelConfig
from ctxasr.training import OptimConfig, make_preset


def tiny_config(**kw):
    base = dict(
        corpus=CorpusConfig(
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
        ),
        model=ModelConfig(
            vocab_size=0,
            encoder=EncoderConfig(
                n_layers=6, width=8, n_heads=2, ffn_width=16, taps=(2, 4), feature_dim=8
            ),
            ctx_emb_dim=4,
            ctx_hidden=4,
            ctx_layers=1,
            cb_heads=2,
            joint_width=8,
            pred_width=8,
        ),
        epochs=1,
        batch_size=8,
        n_test=3,
        optim=OptimConfig(base_lr=1e-3, warmup=10),
        decode=DecodeConfig(k_beam=2, mu_ctc=0.0, mu_tr=1.0, max_symbols_per_frame=2),
    )
    base.update(kw)
    return make_preset("ib", **base)


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    """A workspace with a generated corpus and one trained ib run."""
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.json").write_text(tiny_config().to_json())
    assert main(["gen-data", "--out", str(root / "data"), "--config", str(root / "cfg.json")]) == 0
    assert (
        main(
            [
                "train",
                "--data", str(root / "data"),
                "--out", str(root / "run"),
                "--preset", "ib",
                "--config", str(root / "cfg.json"),
            ]
        )
        == 0
    )
    return root


class TestGenData:
    def test_writes_corpus_and_pool(self, ws):
        assert (ws / "data" / "corpus.npz").exists()
        pool = (ws / "data" / "distractors.txt").read_text().split()
        assert len(pool) == 12  # 4 rare + 8 distractor words


class TestTrain:
    def test_writes_run_artifacts(self, ws):
        assert (ws / "run" / "config.json").exists()
        assert (ws / "run" / "checkpoint.npz").exists()
        assert (ws / "run" / "curves.csv").exists()

    def test_feature_dim_mismatch_is_usage_error(self, ws, tmp_path, capsys):
        bad = tiny_config(model=ModelConfig(vocab_size=0))  # default 16-dim features
        (tmp_path / "bad.json").write_text(bad.to_json())
        rc = main(
            ["train", "--data", str(ws / "data"), "--out", str(tmp_path / "r"),
             "--config", str(tmp_path / "bad.json")]
        )
        assert rc == 2
        assert "feature_dim" in capsys.readouterr().err

    def test_missing_resume_checkpoint(self, ws, tmp_path):
        rc = main(
            ["train", "--data", str(ws / "data"), "--out", str(tmp_path / "r"),
             "--config", str(ws / "cfg.json"), "--resume", str(tmp_path / "nope.npz")]
        )
        assert rc == 2


class TestDecode:
    def test_writes_nbest_refs_bias(self, ws):
        rc = main(
            ["decode", "--data", str(ws / "data"), "--run", str(ws / "run"), "--bias-size", "2"]
        )
        assert rc == 0
        lines = (ws / "run" / "nbest_m2.tsv").read_text().splitlines()
        assert lines and all(len(line.split("\t")) == 6 for line in lines)
        assert len((ws / "run" / "refs.tsv").read_text().splitlines()) == 3
        bias = (ws / "run" / "bias_m2.tsv").read_text().splitlines()
        assert all(len(line.split("\t")) == 3 for line in bias)  # utt_id + 2 phrases

    def test_mu_ctc_zero_equals_transducer_only(self, ws, tmp_path):
        a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
        base = ["decode", "--data", str(ws / "data"), "--run", str(ws / "run"),
                "--bias-size", "2"]
        assert main(base + ["--out", str(a)]) == 0
        assert main(base + ["--joint", "--mu-ctc", "0", "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_joint_flag_mixes_in_the_prefix_score(self, ws, tmp_path):
        out = tmp_path / "joint.tsv"
        rc = main(
            ["decode", "--data", str(ws / "data"), "--run", str(ws / "run"),
             "--bias-size", "2", "--joint", "--out", str(out)]
        )
        assert rc == 0
        fields = [line.split("\t") for line in out.read_text().splitlines()]
        assert any(f[2] != f[3] for f in fields)  # joint score differs from transducer's

    def test_beam_flag(self, ws, tmp_path):
        rc = main(
            ["decode", "--data", str(ws / "data"), "--run", str(ws / "run"),
             "--bias-size", "0", "--beam", "1", "--limit", "1",
             "--out", str(tmp_path / "n.tsv")]
        )
        assert rc == 0
        assert len((tmp_path / "n.tsv").read_text().splitlines()) == 1


class TestScore:
    def test_report_rows_and_m0_invariant(self, ws):
        rc = main(
            ["score", "--data", str(ws / "data"), "--run", str(ws / "run"),
             "--bias-sizes", "0,2"]
        )
        assert rc == 0
        report = (ws / "run" / "report.txt").read_text().splitlines()
        assert len(report) == 2
        for line, m in zip(report, (0, 2)):
            label, size, rest = line.split("\t")
            assert label == "ib" and size == f"M={m}"
            assert re.fullmatch(r"[\d.]+ \(([\d.]+|–)/([\d.]+|–)\)", rest)
        records = json.loads((ws / "run" / "report.json").read_text())
        by_m = {r["m"]: r for r in records}
        assert by_m[0]["u_wer"] == by_m[0]["wer"]
        assert by_m[0]["b_wer"] is None

    def test_report_regenerable_from_files(self, ws):
        from ctxasr.evaluate import load_eval_files, score_rows

        run = ws / "run"
        rows = load_eval_files(run / "refs.tsv", run / "nbest_m2.tsv", run / "bias_m2.tsv")
        b = score_rows(rows)
        records = json.loads((run / "report.json").read_text())
        rec = next(r for r in records if r["m"] == 2)
        assert rec["counts"] == b.as_dict()


class TestAblate:
    def test_rows_per_tap_preset_plus_decoding_comparison(self, ws, tmp_path):
        rc = main(
            ["ablate", "--data", str(ws / "data"), "--out", str(tmp_path / "ab"),
             "--config", str(ws / "cfg.json"), "--bias-size", "2",
             "--joint-bias-size", "3", "--limit", "2", "--epochs", "1"]
        )
        assert rc == 0
        lines = (tmp_path / "ab" / "ablation.txt").read_text().splitlines()
        labels = [line.split("\t")[0] for line in lines]
        assert labels == [
            "ib taps={3}",
            "ib taps={2,4}",
            "ib taps={1,2,3,4,5}",
            "ib transducer-only",
            "ib-joint",
        ]
        assert (tmp_path / "ab" / "taps_2-4" / "nbest_m3.tsv").exists()
        assert (tmp_path / "ab" / "taps_2-4" / "nbest_m3_joint.tsv").exists()


class TestUsageErrors:
    def test_unknown_flag_exits_nonzero(self):
        with pytest.raises(SystemExit) as exc:
            main(["decode", "--frobnicate"])
        assert exc.value.code != 0

    def test_unknown_command_exits_nonzero(self):
        with pytest.raises(SystemExit) as exc:
            main(["transmogrify"])
        assert exc.value.code != 0

    def test_missing_corpus_path(self, tmp_path, capsys):
        rc = main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "r")])
        assert rc == 2
        assert "not found" in capsys.readouterr().err

    def test_missing_run_dir(self, ws, tmp_path, capsys):
        rc = main(["decode", "--data", str(ws / "data"), "--run", str(tmp_path / "norun")])
        assert rc == 2
        assert "not found" in capsys.readouterr().err
