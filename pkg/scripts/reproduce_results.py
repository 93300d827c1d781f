#!/usr/bin/env python3
"""Full experiment cycle on one synthetic task, printed as a report table.

Generates a corpus, trains the three presets on it (baseline without
context, ib with intermediate biasing, ib-joint additionally decoding
with the CTC prefix score), then scores each across bias-list sizes
M in {0, 10, 50, 100}.  Everything is seeded; rerunning reproduces the
same table.  Expect roughly half an hour at the default scale on one
core; use --epochs/--utts/--n-test to shrink it.

Artifacts land under --out:
  data/               corpus.npz + distractors.txt
  <preset>/           checkpoint, curves, N-best files, report.{txt,json}
  results.txt         the combined table
"""

import argparse
import sys
from pathlib import Path

from ctxasr.cli import main as cli
from ctxasr.data import CorpusConfig
from ctxasr.model import EncoderConfig, ModelConfig
from ctxasr.training import OptimConfig, make_preset

PRESETS = ("baseline", "ib", "ib-joint")


def build_config(preset: str, args):
    corpus = CorpusConfig(
        n_common_words=110,
        n_rare_words=16,
        n_distractor_words=88,
        n_cont_tokens=20,
        min_words=3,
        max_words=4,
        feature_dim=16,
        noise_sigma=0.25,
        homophone_gap=0.02,
        rare_utt_fraction=0.45,
        rare_word_cap=0.029125,
        n_utterances=args.utts,
    )
    model = ModelConfig(
        vocab_size=0,
        encoder=EncoderConfig(
            n_layers=3, width=32, n_heads=4, ffn_width=64, taps=(2,), feature_dim=16
        ),
        use_biasing=preset != "baseline",
        ctx_emb_dim=32,
        ctx_hidden=32,
        ctx_layers=1,
        cb_heads=4,
        joint_width=32,
        pred_width=12,
    )
    return make_preset(
        preset,
        corpus=corpus,
        model=model,
        epochs=args.epochs,
        batch_size=16,
        seed=args.seed,
        n_test=args.n_test,
        l_max=2,  # every lexicon word is two tokens; keep bias phrases unpadded
        optim=OptimConfig(base_lr=3e-3, warmup=300),
    )


def run(argv) -> None:
    rc = cli([str(a) for a in argv])
    if rc != 0:
        sys.exit(rc)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/repro", help="output directory")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--utts", type=int, default=2400)
    ap.add_argument("--n-test", type=int, default=100, dest="n_test")
    args = ap.parse_args()

    out = Path(args.out)
    data = out / "data"
    out.mkdir(parents=True, exist_ok=True)

    cfg_paths = {}
    for preset in PRESETS:
        cfg = build_config(preset, args)
        path = out / f"config_{preset}.json"
        path.write_text(cfg.to_json())
        cfg_paths[preset] = path

    run(["gen-data", "--config", cfg_paths["ib"], "--out", data])
    # ib and ib-joint share training; train once and reuse the checkpoint
    run(["train", "--data", data, "--out", out / "baseline",
         "--preset", "baseline", "--config", cfg_paths["baseline"]])
    run(["train", "--data", data, "--out", out / "ib",
         "--preset", "ib", "--config", cfg_paths["ib"]])
    ib_joint = out / "ib-joint"
    ib_joint.mkdir(exist_ok=True)
    joint_cfg = build_config("ib-joint", args)
    (ib_joint / "config.json").write_text(joint_cfg.to_json())
    (ib_joint / "checkpoint.npz").write_bytes((out / "ib" / "checkpoint.npz").read_bytes())

    table = []
    for preset in PRESETS:
        run(["score", "--data", data, "--run", out / preset])
        table.append((out / preset / "report.txt").read_text().rstrip())

    result = "\n".join(table) + "\n"
    (out / "results.txt").write_text(result)
    print("\nWER (U-WER/B-WER) by bias-list size:")
    print(result)


if __name__ == "__main__":
    main()
