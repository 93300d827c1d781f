"""Contextual biasing: cross-attention from hidden states to bias phrases.

Hidden states query the context-embedding rows; the attention-weighted
value vectors form a bias vector that is added residually to the states.
With the value projection at zero the module is an exact identity, which
is how the non-contextual baseline is expressed without changing the
architecture.  Value projections are also *initialized* at zero, so a
freshly built module starts as that identity and the bias only grows in
directions the training objectives ask for.

The query stream and the context rows may have different widths (as in
multi-head attention with separate key/value dimensions): keys and values
are projected from the context width into the query-stream width, where
the heads are split.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameters, ShapeError, Tensor


@dataclass
class CBConfig:
    width: int = 64  # query-stream width; heads are split over this
    n_heads: int = 4
    use_output_proj: bool = True
    ctx_width: int | None = None  # context-row width; defaults to `width`

    def __post_init__(self):
        if self.ctx_width is None:
            self.ctx_width = self.width
        if self.width % self.n_heads != 0:
            raise ValueError(f"width {self.width} not divisible by {self.n_heads} heads")


class CBParams:
    """Query/key/value (and optional output) projections for one CB site."""

    def __init__(self, store: Parameters, cfg: CBConfig, rng, prefix: str):
        self.cfg = cfg
        s, c = cfg.width, cfg.ctx_width
        self.w_q = store.add(f"{prefix}.Wq", rng.standard_normal((s, s)) / np.sqrt(s))
        self.w_k = store.add(f"{prefix}.Wk", rng.standard_normal((c, s)) / np.sqrt(c))
        # zero start: bias output is exactly 0 until training grows it
        self.w_v = store.add(f"{prefix}.Wv", np.zeros((c, s)))
        self.w_o = (
            store.add(f"{prefix}.Wo", rng.standard_normal((s, s)) / np.sqrt(s))
            if cfg.use_output_proj
            else None
        )


@dataclass
class AttentionOutput:
    scores: list[Tensor]  # per head, each (T', M+1); rows sum to 1
    bias: Tensor  # (T', S) attention-weighted context
    fused: Tensor  # (T', S) = input + bias


def cb_attend(h: Tensor, ctx: Tensor, params: CBParams) -> AttentionOutput:
    """Attend from hidden states (T', S) to context rows (M+1, ctx_width)."""
    cfg = params.cfg
    if h.shape[-1] != cfg.width or ctx.shape[-1] != cfg.ctx_width:
        raise ShapeError(
            f"width mismatch: states {h.shape} (want {cfg.width}), "
            f"context {ctx.shape} (want {cfg.ctx_width})"
        )
    if ctx.shape[0] < 1:
        raise ShapeError("context must contain at least the <no_bias> row")
    d_head = cfg.width // cfg.n_heads
    q = ad.matmul(h, params.w_q)
    k = ad.matmul(ctx, params.w_k)
    v = ad.matmul(ctx, params.w_v)
    scores: list[Tensor] = []
    heads: list[Tensor] = []
    for i in range(cfg.n_heads):
        sl = slice(i * d_head, (i + 1) * d_head)
        logits = ad.matmul(q[:, sl], ad.transpose(k[:, sl]))
        a = ad.softmax(ad.scale(logits, 1.0 / np.sqrt(d_head)), axis=-1)
        scores.append(a)
        heads.append(ad.matmul(a, v[:, sl]))
    bias = heads[0] if len(heads) == 1 else ad.concat(heads, axis=1)
    if params.w_o is not None:
        bias = ad.matmul(bias, params.w_o)
    return AttentionOutput(scores=scores, bias=bias, fused=ad.add(h, bias))
