"""Optimizer, schedule, experiment configuration, and the training loop.

A training run is fully determined by its ExperimentConfig: corpus
parameters, model dimensions, loss weights, decoding defaults, optimizer
settings, and the seed. Two runs with the same config produce
bit-identical trajectories, and a run resumed from a checkpoint
continues exactly where the original left off (parameters, Adam moments,
and the RNG stream are all persisted).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

import functools

from . import autodiff as ad
from .autodiff import EvaluationError, Parameters
from .data import BiasList, CorpusConfig, SyntheticTask, sample_training_bias
from .context import ib_target
from .decoding import DecodeConfig
from .losses import (
    LossWeights,
    combine_objectives,
    ctc_loss_graph,
    interctc_loss,
    ib_loss,
    rnnt_loss_graph,
)
from .model import EncoderConfig, ModelConfig, TransducerModel

PRESET_NAMES = ("baseline", "ib", "ib-joint")


class TrainingDiverged(RuntimeError):
    """Raised when a loss term or gradient stops being finite."""

    def __init__(self, term: str, step: int):
        super().__init__(f"training diverged at step {step}: {term}")
        self.term = term
        self.step = step


@dataclass
class OptimConfig:
    base_lr: float = 1e-3
    warmup: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.warmup < 1:
            raise ValueError("warmup must be >= 1")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError("betas must lie in [0, 1)")


def lr_schedule(step: int, base_lr: float, warmup: int) -> float:
    """Linear warmup to base_lr, then inverse-square-root decay."""
    if step <= 0:
        return 0.0
    return base_lr * min(step / warmup, np.sqrt(warmup / step))


class AdamState:
    """Bias-corrected Adam moments, keyed like the parameter set."""

    def __init__(self, params: Parameters, cfg: OptimConfig):
        self.cfg = cfg
        self.step = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}


def adam_step(params: Parameters, state: AdamState, lr: float) -> None:
    """One in-place update; parameters without gradients stay untouched."""
    state.step += 1
    c = state.cfg
    bc1 = 1.0 - c.beta1**state.step
    bc2 = 1.0 - c.beta2**state.step
    for name, t in params.items():
        g = t.grad
        if g is None:
            g = np.zeros_like(t.data)
        elif not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {name}", state.step)
        m = state.m[name]
        v = state.v[name]
        m *= c.beta1
        m += (1.0 - c.beta1) * g
        v *= c.beta2
        v += (1.0 - c.beta2) * g * g
        t.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


@dataclass
class ExperimentConfig:
    preset: str = "ib"
    seed: int = 0
    epochs: int = 30
    batch_size: int = 16
    l_max: int = 10
    n_test: int = 200
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(vocab_size=0))
    loss: LossWeights = field(default_factory=LossWeights)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def __post_init__(self):
        if self.preset not in PRESET_NAMES:
            raise ValueError(f"unknown preset {self.preset!r}; use one of {PRESET_NAMES}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def model_for(self, vocab_size: int) -> ModelConfig:
        """The model config with the corpus vocabulary filled in."""
        return replace(self.model, vocab_size=vocab_size)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        enc = dict(d["model"]["encoder"])
        enc["taps"] = tuple(enc["taps"])
        model = dict(d["model"], encoder=EncoderConfig(**enc))
        return cls(
            preset=d["preset"],
            seed=d["seed"],
            epochs=d["epochs"],
            batch_size=d["batch_size"],
            l_max=d["l_max"],
            n_test=d["n_test"],
            corpus=CorpusConfig(**d["corpus"]),
            model=ModelConfig(**model),
            loss=LossWeights(**d["loss"]),
            decode=DecodeConfig(**d["decode"]),
            optim=OptimConfig(**d["optim"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def training_signature(self) -> str:
        """Canonical id of everything the trained weights depend on.

        Presets that differ only in decoding (ib vs ib-joint) share a
        signature and can reuse one checkpoint.
        """
        d = self.to_dict()
        d.pop("preset")
        d.pop("decode")
        d.pop("n_test")
        return json.dumps(d, sort_keys=True)


def make_preset(name: str, **overrides) -> ExperimentConfig:
    """The three experiment presets; keyword overrides apply on top."""
    if name == "baseline":
        base = dict(
            preset=name,
            model=ModelConfig(vocab_size=0, use_biasing=False),
            loss=LossWeights(lam_ib=0.0),
            decode=DecodeConfig(mu_ctc=0.0, mu_tr=1.0),
        )
    elif name == "ib":
        base = dict(preset=name, decode=DecodeConfig(mu_ctc=0.0, mu_tr=1.0))
    elif name == "ib-joint":
        base = dict(preset=name, decode=DecodeConfig())
    else:
        raise ValueError(f"unknown preset {name!r}; use one of {PRESET_NAMES}")
    base.update(overrides)
    return ExperimentConfig(**base)


# ---------------- checkpoints ----------------


def save_checkpoint(
    path, model: TransducerModel, optim: AdamState, rng: np.random.Generator, meta: dict
) -> None:
    arrays = {f"param/{k}": v for k, v in model.params.values_dict().items()}
    arrays.update({f"adam_m/{k}": v for k, v in optim.m.items()})
    arrays.update({f"adam_v/{k}": v for k, v in optim.v.items()})
    meta = dict(meta, adam_step=optim.step, rng_state=rng.bit_generator.state)
    arrays["meta"] = np.array(json.dumps(meta))
    np.savez(path, **arrays)


def load_checkpoint(path) -> dict:
    with np.load(path, allow_pickle=False) as data:
        out = {"params": {}, "adam_m": {}, "adam_v": {}}
        for key in data.files:
            if key == "meta":
                out["meta"] = json.loads(str(data[key]))
            else:
                group, name = key.split("/", 1)
                {"param": out["params"], "adam_m": out["adam_m"], "adam_v": out["adam_v"]}[
                    group
                ][name] = data[key]
    return out


def restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


# ---------------- the loop ----------------


@dataclass
class TrainResult:
    curves: list[dict]
    final_step: int
    initial_loss: float
    final_loss: float


def _mean(tensors):
    if len(tensors) == 1:
        return tensors[0]
    return ad.scale(functools.reduce(ad.add, tensors), 1.0 / len(tensors))


def batch_losses(model: TransducerModel, batch, bias: BiasList, spans, w: LossWeights):
    """Per-term batch-mean losses: (ctc, interctc, ib, transducer) tensors.

    ``ib`` is None when the preset trains without the biasing objective.
    """
    outs = model.forward(batch, bias)
    ctc, inter, ib, tr = [], [], [], []
    for i, (utt, out) in enumerate(zip(batch, outs)):
        target = utt.transcript
        ctc.append(ctc_loss_graph(out.final_logp, target))
        inter.append(interctc_loss(list(out.tap_logp.values()), target))
        tr.append(rnnt_loss_graph(out.lattice_logits, target))
        if w.lam_ib != 0.0 and model.cfg.use_biasing:
            masked = ib_target(target, spans[i])
            ib.append(ib_loss(list(out.fused_tap_logp.values()), masked))
    return (
        _mean(ctc),
        _mean(inter),
        _mean(ib) if ib else None,
        _mean(tr),
    )


def _chunks(order, size):
    for i in range(0, len(order), size):
        yield order[i : i + size]


def train(
    cfg: ExperimentConfig,
    task: SyntheticTask,
    out_dir: Path | str | None = None,
    resume: Path | str | None = None,
    max_steps: int | None = None,
    log_every: int = 0,
) -> tuple[TransducerModel, TrainResult]:
    """Run the preset's training loop over the task's train split.

    Writes (when ``out_dir`` is given): the resolved config, a rolling
    ``checkpoint.npz`` at each epoch boundary, and ``curves.csv``. On
    divergence the last epoch checkpoint is left intact and
    TrainingDiverged propagates.
    """
    if cfg.loss.lam_ib != 0.0 and not cfg.model.use_biasing:
        raise ValueError("lam_ib > 0 needs a biasing model (use_biasing=True)")
    vocab_size = len(task.lexicon.vocab)
    model = TransducerModel(cfg.model_for(vocab_size), seed=cfg.seed)
    optim = AdamState(model.params, cfg.optim)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1)))
    start_epoch = 0
    step = 0

    if resume is not None:
        ckpt = load_checkpoint(resume)
        model.params.load_values(ckpt["params"])
        optim.m = ckpt["adam_m"]
        optim.v = ckpt["adam_v"]
        optim.step = ckpt["meta"]["adam_step"]
        rng = restore_rng(ckpt["meta"]["rng_state"])
        start_epoch = ckpt["meta"]["epoch"] + 1
        step = ckpt["meta"]["step"]

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(cfg.to_json())

    curves: list[dict] = []
    initial_loss = None

    def flush_curves():
        if out is None or not curves:
            return
        keys = list(curves[0])
        lines = [",".join(keys)]
        for row in curves:
            lines.append(
                ",".join(str(row[k]) if isinstance(row[k], int) else f"{row[k]:.8g}" for k in keys)
            )
        (out / "curves.csv").write_text("\n".join(lines) + "\n")

    for epoch in range(start_epoch, cfg.epochs):
        order = rng.permutation(len(task.train))
        for chunk in _chunks(order, cfg.batch_size):
            if max_steps is not None and step >= max_steps:
                break
            batch = [task.train[i] for i in chunk]
            bias, spans = sample_training_bias(batch, rng, cfg.l_max)
            model.params.zero_grad()
            try:
                l_ctc, l_ic, l_ib, l_tr = batch_losses(model, batch, bias, spans, cfg.loss)
                total = combine_objectives(l_ctc, l_ic, l_ib, l_tr, cfg.loss)
            except EvaluationError as exc:  # which term went non-finite
                flush_curves()
                raise TrainingDiverged(str(exc), step + 1) from exc
            total.backward()
            step += 1
            lr = lr_schedule(step, cfg.optim.base_lr, cfg.optim.warmup)
            try:
                adam_step(model.params, optim, lr)
            except TrainingDiverged:
                flush_curves()
                raise
            row = {
                "step": step,
                "epoch": epoch,
                "lr": lr,
                "loss": float(total.data),
                "ctc": float(l_ctc.data),
                "interctc": float(l_ic.data),
                "ib": float(l_ib.data) if l_ib is not None else 0.0,
                "transducer": float(l_tr.data),
            }
            curves.append(row)
            if initial_loss is None:
                initial_loss = row["loss"]
            if log_every and step % log_every == 0:
                print(
                    f"step {step} epoch {epoch} lr {lr:.2e} loss {row['loss']:.4f} "
                    f"(ctc {row['ctc']:.3f} ic {row['interctc']:.3f} "
                    f"ib {row['ib']:.3f} tr {row['transducer']:.3f})",
                    flush=True,
                )
        if out is not None:
            meta = {"epoch": epoch, "step": step, "preset": cfg.preset}
            save_checkpoint(out / "checkpoint.npz", model, optim, rng, meta)
            flush_curves()
        if max_steps is not None and step >= max_steps:
            break

    flush_curves()
    final_loss = curves[-1]["loss"] if curves else float("nan")
    return model, TrainResult(
        curves=curves,
        final_step=step,
        initial_loss=initial_loss if initial_loss is not None else float("nan"),
        final_loss=final_loss,
    )


def load_model(checkpoint_path, cfg: ExperimentConfig, vocab_size: int) -> TransducerModel:
    """Rebuild a model from a checkpoint written by ``train``."""
    ckpt = load_checkpoint(checkpoint_path)
    model = TransducerModel(cfg.model_for(vocab_size), seed=cfg.seed)
    model.params.load_values(ckpt["params"])
    return model
