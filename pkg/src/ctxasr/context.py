"""Bias-phrase encoding and IB-loss target construction.

Each bias phrase is padded to a fixed length and pushed through a stacked
bidirectional LSTM; the last hidden state of each direction is concatenated
and projected to the encoder width, giving one fixed-size row per phrase.
Row 0 always encodes the learned <no_bias> token. The recurrence runs over
padded positions too (no masking): padding embeddings are learned and the
fixed length keeps every phrase comparable.
"""

from __future__ import annotations

from dataclasses import dataclass
from collections.abc import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameters, Tensor
from .data import DUMMY_ID, BiasList, DataError


@dataclass
class ContextEncoderConfig:
    vocab_size: int
    emb_dim: int = 32
    width: int = 64  # output size; must match the audio encoder width
    hidden: int = 32  # per-direction LSTM units
    n_layers: int = 2

    def __post_init__(self):
        if min(self.vocab_size, self.emb_dim, self.width, self.hidden, self.n_layers) < 1:
            raise ValueError("all context-encoder dimensions must be >= 1")


def _init(rng, *shape):
    return rng.standard_normal(shape) / np.sqrt(shape[0])


class ContextEncoderParams:
    """Owns the context encoder's tensors inside a shared parameter store."""

    def __init__(self, store: Parameters, cfg: ContextEncoderConfig, rng, prefix: str = "ctx"):
        self.cfg = cfg
        self.prefix = prefix
        p = prefix
        self.emb = store.add(f"{p}.emb", _init(rng, cfg.vocab_size, cfg.emb_dim))
        self.cells = []
        in_dim = cfg.emb_dim
        for layer in range(cfg.n_layers):
            directions = {}
            for d in ("fw", "bw"):
                directions[d] = {
                    "W": store.add(f"{p}.l{layer}.{d}.W", _init(rng, in_dim, 4 * cfg.hidden)),
                    "U": store.add(f"{p}.l{layer}.{d}.U", _init(rng, cfg.hidden, 4 * cfg.hidden)),
                    "b": store.add(f"{p}.l{layer}.{d}.b", np.zeros(4 * cfg.hidden)),
                }
            self.cells.append(directions)
            in_dim = 2 * cfg.hidden
        self.proj_w = store.add(f"{p}.proj.W", _init(rng, 2 * cfg.hidden, cfg.width))
        self.proj_b = store.add(f"{p}.proj.b", np.zeros(cfg.width))


def lstm_step(x: Tensor, h: Tensor, c: Tensor, cell: dict) -> tuple[Tensor, Tensor]:
    """One LSTM step for a (B, in) input; gate order i, f, g, o."""
    n = cell["U"].shape[0]
    gates = ad.add(ad.add(ad.matmul(x, cell["W"]), ad.matmul(h, cell["U"])), cell["b"])
    i = ad.sigmoid(gates[:, 0 * n : 1 * n])
    f = ad.sigmoid(gates[:, 1 * n : 2 * n])
    g = ad.tanh(gates[:, 2 * n : 3 * n])
    o = ad.sigmoid(gates[:, 3 * n : 4 * n])
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


def _run_direction(steps: list[Tensor], cell: dict, hidden: int, batch: int) -> list[Tensor]:
    h = Tensor(np.zeros((batch, hidden)))
    c = Tensor(np.zeros((batch, hidden)))
    out = []
    for x in steps:
        h, c = lstm_step(x, h, c, cell)
        out.append(h)
    return out


def encode_bias_list(bias_list: BiasList, params: ContextEncoderParams) -> Tensor:
    """Encode a BiasList into an (M+1, width) embedding matrix."""
    cfg = params.cfg
    mat, _ = bias_list.padded()
    if mat.max() >= cfg.vocab_size or mat.min() < 0:
        raise DataError("bias phrase contains an out-of-vocabulary id")
    batch, length = mat.shape
    x = ad.embedding(params.emb, mat)  # (B, L, E)
    steps = [x[:, t] for t in range(length)]
    for layer in params.cells:
        fw = _run_direction(steps, layer["fw"], cfg.hidden, batch)
        bw = _run_direction(steps[::-1], layer["bw"], cfg.hidden, batch)[::-1]
        steps = [ad.concat([f, b], axis=1) for f, b in zip(fw, bw)]
    final = ad.concat([fw[-1], bw[0]], axis=1)  # last state of each direction
    return ad.add(ad.matmul(final, params.proj_w), params.proj_b)


def ib_target(
    transcript: Sequence[int], covered_spans: Sequence[tuple[int, int]]
) -> tuple[int, ...]:
    """Keep tokens inside covered spans; replace all others with the dummy id.

    Spans are [start, end) token indices and must be in-bounds and
    non-overlapping. Output length always equals input length.
    """
    n = len(transcript)
    keep = [False] * n
    for start, end in covered_spans:
        if not (0 <= start < end <= n):
            raise DataError(f"span ({start}, {end}) out of bounds for length {n}")
        for i in range(start, end):
            if keep[i]:
                raise DataError("overlapping bias spans")
            keep[i] = True
    return tuple(t if k else DUMMY_ID for t, k in zip(transcript, keep))
