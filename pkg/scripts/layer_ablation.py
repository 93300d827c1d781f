#!/usr/bin/env python3
"""Where to tap the encoder, and what joint decoding buys.

Trains the ib preset three times, varying which encoder layers carry the
intermediate-biasing heads (taps), and scores each at one bias size.
Then the middle variant is decoded twice more at a large bias size:
transducer-only versus jointly with the CTC prefix score.  Uses an
existing data directory when --data is given, otherwise generates one.

Writes <out>/ablation.txt plus one run directory per taps variant.
"""

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from ctxasr.cli import main as cli

sys.path.insert(0, str(Path(__file__).resolve().parent))
from reproduce_results import build_config  # noqa: E402  (sibling script)


def run(argv) -> None:
    rc = cli([str(a) for a in argv])
    if rc != 0:
        sys.exit(rc)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--data", help="existing data directory (default: generate)")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--utts", type=int, default=1200)
    ap.add_argument("--n-test", type=int, default=100, dest="n_test")
    ap.add_argument("--bias-size", type=int, default=10, dest="bias_size")
    ap.add_argument("--joint-bias-size", type=int, default=100, dest="joint_bias_size")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = build_config("ib", args)
    # taps vary per ablation row; give the encoder enough layers for all of them
    enc = replace(cfg.model.encoder, n_layers=6, taps=(2, 4))
    cfg = replace(cfg, model=replace(cfg.model, encoder=enc))
    cfg_path = out / "config.json"
    cfg_path.write_text(cfg.to_json())

    if args.data:
        data = Path(args.data)
    else:
        data = out / "data"
        run(["gen-data", "--config", cfg_path, "--out", data])

    run([
        "ablate", "--data", data, "--out", out, "--config", cfg_path,
        "--bias-size", args.bias_size, "--joint-bias-size", args.joint_bias_size,
    ])


if __name__ == "__main__":
    main()
