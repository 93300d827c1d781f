"""Command-line entry points.

Five subcommands cover the full experiment cycle:

  gen-data   synthesize a corpus (with its distractor pool) into a data dir
  train      train a preset on a saved corpus, writing a run directory
  decode     decode the test split into an N-best file (+ refs/bias sidecars)
  score      decode and score across bias-list sizes, writing a report
  ablate     tap-layer comparison and joint-vs-transducer comparison

Every command is deterministic given its config and seed.  Reports are
computed from the persisted N-best/refs/bias files, so any metric line
can be regenerated from the run directory alone.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .data import SyntheticTask, load_task, save_distractors, save_task
from .decoding import DecodeConfig
from .evaluate import decode_corpus, load_eval_files, report_line, save_bias, save_refs, score_rows
from .model import TransducerModel
from .training import (
    PRESET_NAMES,
    ExperimentConfig,
    TrainingDiverged,
    load_model,
    make_preset,
    train,
)

ABLATION_TAPS = ((3,), (2, 4), (1, 2, 3, 4, 5))
SCORE_BIAS_SIZES = (0, 10, 50, 100)


class UsageError(Exception):
    pass


def _require(path: Path, kind: str) -> Path:
    if not path.exists():
        raise UsageError(f"{kind} not found: {path}")
    return path


def _corpus_path(data: str) -> Path:
    p = Path(data)
    if p.is_dir():
        p = p / "corpus.npz"
    return _require(p, "corpus")


def _load_run(run_dir: str) -> tuple[ExperimentConfig, Path]:
    run = Path(run_dir)
    cfg_path = _require(run / "config.json", "run config")
    ckpt = _require(run / "checkpoint.npz", "checkpoint")
    return ExperimentConfig.from_json(cfg_path.read_text()), ckpt


def _base_config(args, preset: str | None = None) -> ExperimentConfig:
    """Experiment config from --config (if given) plus flag overrides."""
    if getattr(args, "config", None):
        cfg = ExperimentConfig.from_json(_require(Path(args.config), "config").read_text())
        if preset is not None and preset != cfg.preset:
            cfg = dataclasses.replace(cfg, preset=preset)
    else:
        cfg = make_preset(preset or "ib")
    for flag in ("seed", "epochs", "batch_size", "n_test"):
        value = getattr(args, flag, None)
        if value is not None:
            cfg = dataclasses.replace(cfg, **{flag: value})
    return cfg


def _fit_to_task(cfg: ExperimentConfig, task: SyntheticTask) -> ExperimentConfig:
    """Pin the config's corpus section to the corpus actually on disk."""
    if cfg.model.encoder.feature_dim != task.config.feature_dim:
        raise UsageError(
            f"model expects feature_dim {cfg.model.encoder.feature_dim}, "
            f"corpus provides {task.config.feature_dim}"
        )
    return dataclasses.replace(cfg, corpus=task.config)


# ---------------- subcommands ----------------


def cmd_gen_data(args) -> int:
    cfg = _base_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    task = SyntheticTask.generate(cfg.corpus, seed=cfg.seed, n_test=cfg.n_test)
    save_task(out / "corpus.npz", task)
    save_distractors(out / "distractors.txt", task.distractor_pool)
    print(
        f"wrote {len(task.train)} train / {len(task.test)} test utterances, "
        f"vocab {len(task.lexicon.vocab)}, pool {len(task.distractor_pool)} -> {out}"
    )
    return 0


def cmd_train(args) -> int:
    task = load_task(_corpus_path(args.data))
    cfg = _fit_to_task(_base_config(args, preset=args.preset), task)
    if args.resume is not None:
        _require(Path(args.resume), "resume checkpoint")
    try:
        _, result = train(
            cfg,
            task,
            out_dir=args.out,
            resume=args.resume,
            max_steps=args.max_steps,
            log_every=args.log_every,
        )
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(
        f"trained {cfg.preset}: {result.final_step} steps, "
        f"loss {result.initial_loss:.4f} -> {result.final_loss:.4f} ({args.out})"
    )
    return 0


def _effective_decode(cfg: ExperimentConfig, args) -> DecodeConfig:
    if args.mu_ctc is not None:
        mu = args.mu_ctc
    elif args.joint:
        mu = cfg.decode.mu_ctc if cfg.decode.mu_ctc > 0 else DecodeConfig().mu_ctc
    else:
        mu = 0.0
    return dataclasses.replace(
        cfg.decode,
        mu_ctc=mu,
        mu_tr=1.0 - mu,
        k_beam=args.beam if args.beam is not None else cfg.decode.k_beam,
    )


def cmd_decode(args) -> int:
    task = load_task(_corpus_path(args.data))
    cfg, ckpt = _load_run(args.run)
    model = load_model(ckpt, cfg, len(task.lexicon.vocab))
    dec = _effective_decode(cfg, args)
    m = args.bias_size
    tag = "_joint" if dec.mu_ctc > 0 else ""
    out = Path(args.out) if args.out else Path(args.run) / f"nbest_m{m}{tag}.tsv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        rows = decode_corpus(model, task, dec, m, l_max=cfg.l_max, nbest_handle=f, limit=args.limit)
    save_refs(out.parent / "refs.tsv", rows)
    save_bias(out.parent / f"bias_m{m}.tsv", rows)
    print(f"decoded {len(rows)} utterances (M={m}, mu_ctc={dec.mu_ctc:g}) -> {out}")
    return 0


def _score_run(model, task, cfg: ExperimentConfig, run: Path, sizes, limit, label, tag=""):
    """Decode at each bias size, then score from the persisted files."""
    lines = []
    records = []
    for m in sizes:
        nbest = run / f"nbest_m{m}{tag}.tsv"
        with open(nbest, "w") as f:
            rows = decode_corpus(
                model, task, cfg.decode, m, l_max=cfg.l_max, nbest_handle=f, limit=limit
            )
        save_refs(run / "refs.tsv", rows)
        save_bias(run / f"bias_m{m}.tsv", rows)
        scored = load_eval_files(run / "refs.tsv", nbest, run / f"bias_m{m}.tsv")
        b = score_rows(scored)
        lines.append(report_line(label, m, b))
        records.append(
            {"label": label, "m": m, "wer": b.wer, "u_wer": b.u_wer, "b_wer": b.b_wer,
             "counts": b.as_dict()}
        )
    return lines, records


def cmd_score(args) -> int:
    task = load_task(_corpus_path(args.data))
    cfg, ckpt = _load_run(args.run)
    model = load_model(ckpt, cfg, len(task.lexicon.vocab))
    sizes = [int(s) for s in args.bias_sizes.split(",")] if args.bias_sizes else SCORE_BIAS_SIZES
    run = Path(args.run)
    lines, records = _score_run(model, task, cfg, run, sizes, args.limit, cfg.preset)
    (run / "report.txt").write_text("\n".join(lines) + "\n")
    (run / "report.json").write_text(json.dumps(records, indent=2) + "\n")
    print("\n".join(lines))
    return 0


def cmd_ablate(args) -> int:
    task = load_task(_corpus_path(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = _fit_to_task(_base_config(args, preset="ib"), task)
    lines = []

    runs: dict[tuple[int, ...], tuple[TransducerModel, ExperimentConfig, Path]] = {}
    for taps in ABLATION_TAPS:
        enc = dataclasses.replace(base.model.encoder, taps=taps)
        cfg = dataclasses.replace(base, model=dataclasses.replace(base.model, encoder=enc))
        run = out / ("taps_" + "-".join(map(str, taps)))
        model, _ = train(cfg, task, out_dir=run)
        runs[taps] = (model, cfg, run)
        label = "ib taps={" + ",".join(map(str, taps)) + "}"
        row, _ = _score_run(model, task, cfg, run, [args.bias_size], args.limit, label)
        lines += row

    # same trained weights, decoded transducer-only vs jointly with the CTC head
    model, cfg, run = runs[(2, 4)] if (2, 4) in runs else next(iter(runs.values()))
    big = args.joint_bias_size
    mu = DecodeConfig().mu_ctc
    pure = dataclasses.replace(cfg, decode=dataclasses.replace(cfg.decode, mu_ctc=0.0, mu_tr=1.0))
    joint = dataclasses.replace(
        cfg,
        preset="ib-joint",
        decode=dataclasses.replace(cfg.decode, mu_ctc=mu, mu_tr=1.0 - mu),
    )
    row, _ = _score_run(model, task, pure, run, [big], args.limit, "ib transducer-only")
    lines += row
    row, _ = _score_run(model, task, joint, run, [big], args.limit, "ib-joint", tag="_joint")
    lines += row

    (out / "ablation.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


# ---------------- parser ----------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctxasr", description="contextual transducer experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common_train_flags(p):
        p.add_argument("--config", help="experiment config JSON to start from")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int, dest="batch_size")
        p.add_argument("--n-test", type=int, dest="n_test")

    p = sub.add_parser("gen-data", help="synthesize a corpus")
    p.add_argument("--out", required=True, help="data directory to create")
    common_train_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a preset")
    p.add_argument("--data", required=True, help="data directory (or corpus.npz)")
    p.add_argument("--out", required=True, help="run directory to create")
    p.add_argument("--preset", choices=PRESET_NAMES, default="ib")
    p.add_argument("--resume", help="checkpoint.npz to continue from")
    p.add_argument("--max-steps", type=int, dest="max_steps")
    p.add_argument("--log-every", type=int, dest="log_every", default=0)
    common_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="decode the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True, help="run directory with config + checkpoint")
    p.add_argument("--out", help="N-best output path (default: in the run dir)")
    p.add_argument("--bias-size", type=int, default=10, dest="bias_size")
    p.add_argument("--joint", action="store_true", help="decode with the CTC prefix score")
    p.add_argument("--beam", type=int)
    p.add_argument("--mu-ctc", type=float, dest="mu_ctc")
    p.add_argument("--limit", type=int, help="decode only the first N test utterances")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("score", help="decode + score across bias sizes")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True)
    p.add_argument("--bias-sizes", dest="bias_sizes",
                   help=f"comma-separated sizes (default {','.join(map(str, SCORE_BIAS_SIZES))})")
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("ablate", help="tap-layer and decoding comparisons")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bias-size", type=int, default=10, dest="bias_size")
    p.add_argument("--joint-bias-size", type=int, default=100, dest="joint_bias_size")
    p.add_argument("--limit", type=int)
    common_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
