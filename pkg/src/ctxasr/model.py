"""The transducer network: encoder with biasing taps, predictor, joiner.

The audio encoder is a pre-norm self-attention/feed-forward stack. At each
tap layer k the current stream is cross-attended against the bias-phrase
embeddings; the fused result feeds the IB loss head and (when
``propagate_fused``) replaces the stream entering layer k+1. The final
states drive the CTC head and, after one more biasing step, the joiner;
the predictor side gets its own biasing step before the joiner. A model
built with ``use_biasing=False`` contains none of the biasing machinery
and is the non-contextual baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Parameters, ShapeError, Tensor
from .biasing import AttentionOutput, CBConfig, CBParams, cb_attend
from .context import (
    ContextEncoderConfig,
    ContextEncoderParams,
    encode_bias_list,
    lstm_step,
)
from .data import BLANK_ID, SOS_ID, BiasList


@dataclass
class EncoderConfig:
    n_layers: int = 6
    width: int = 64
    n_heads: int = 4
    ffn_width: int = 128
    taps: tuple[int, ...] = (2, 4)
    subsample: int = 1
    feature_dim: int = 16
    propagate_fused: bool = True

    def __post_init__(self):
        self.taps = tuple(sorted(self.taps))
        if self.width % self.n_heads != 0:
            raise ValueError("width must divide evenly into heads")
        if any(not 1 <= k < self.n_layers for k in self.taps):
            raise ValueError(f"taps {self.taps} must lie in 1..{self.n_layers - 1}")
        if len(set(self.taps)) != len(self.taps):
            raise ValueError("duplicate tap layers")
        if self.subsample < 1:
            raise ValueError("subsample factor must be >= 1")


@dataclass
class ModelConfig:
    vocab_size: int
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    use_biasing: bool = True
    ctx_emb_dim: int = 32
    ctx_hidden: int = 32
    ctx_layers: int = 2
    cb_heads: int = 4
    joint_width: int = 64
    pred_width: int = 64

    def context_config(self) -> ContextEncoderConfig:
        return ContextEncoderConfig(
            vocab_size=self.vocab_size,
            emb_dim=self.ctx_emb_dim,
            width=self.encoder.width,
            hidden=self.ctx_hidden,
            n_layers=self.ctx_layers,
        )

    def cb_config(self, width: int | None = None) -> CBConfig:
        """One biasing site; `width` is the query stream (default: encoder)."""
        return CBConfig(
            width=width or self.encoder.width,
            n_heads=self.cb_heads,
            ctx_width=self.encoder.width,
        )


@dataclass
class TapOutput:
    raw: Tensor  # stream state after block k, before biasing
    fused: Tensor | None  # biased state (None for the baseline)
    attention: AttentionOutput | None


@dataclass
class EncoderOutput:
    final: Tensor  # (T', S) stream output after the last block
    taps: dict[int, TapOutput]
    fused_final: Tensor | None  # biased final states for the joiner
    final_attention: AttentionOutput | None


@dataclass
class PredictorState:
    h: Tensor  # (1, S)
    c: Tensor  # (1, S)
    last_token: int  # most recent non-blank token fed in


@dataclass
class ForwardOutput:
    tap_logp: dict[int, Tensor]  # per-tap CTC log-posteriors on raw states
    fused_tap_logp: dict[int, Tensor] | None  # same heads on fused states
    final_logp: Tensor  # (T', V) final CTC log-posteriors
    lattice_logits: Tensor  # (T', U+1, V) joiner logits
    encoder: EncoderOutput


def sinusoidal_positions(n: int, width: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(width)[None, :]
    angles = pos / np.power(10000.0, (2 * (i // 2)) / width)
    pe = np.zeros((n, width))
    pe[:, 0::2] = np.sin(angles[:, 0::2])
    pe[:, 1::2] = np.cos(angles[:, 1::2])
    return pe


def _init(rng, *shape):
    return rng.standard_normal(shape) / np.sqrt(shape[0])


class TransducerModel:
    """Owns every parameter tensor and exposes the forward computations."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        enc = cfg.encoder
        s = enc.width
        v = cfg.vocab_size
        self.params = Parameters()
        rng = np.random.default_rng(seed)
        p = self.params

        self.in_w = p.add("enc.in.W", _init(rng, enc.feature_dim, s))
        self.in_b = p.add("enc.in.b", np.zeros(s))
        self.blocks = []
        for l in range(enc.n_layers):
            pre = f"enc.l{l}"
            self.blocks.append(
                {
                    "ln1_g": p.add(f"{pre}.ln1.g", np.ones(s)),
                    "ln1_b": p.add(f"{pre}.ln1.b", np.zeros(s)),
                    "wq": p.add(f"{pre}.Wq", _init(rng, s, s)),
                    "wk": p.add(f"{pre}.Wk", _init(rng, s, s)),
                    "wv": p.add(f"{pre}.Wv", _init(rng, s, s)),
                    "wo": p.add(f"{pre}.Wo", _init(rng, s, s)),
                    "ln2_g": p.add(f"{pre}.ln2.g", np.ones(s)),
                    "ln2_b": p.add(f"{pre}.ln2.b", np.zeros(s)),
                    "ffn1_w": p.add(f"{pre}.ffn1.W", _init(rng, s, enc.ffn_width)),
                    "ffn1_b": p.add(f"{pre}.ffn1.b", np.zeros(enc.ffn_width)),
                    "ffn2_w": p.add(f"{pre}.ffn2.W", _init(rng, enc.ffn_width, s)),
                    "ffn2_b": p.add(f"{pre}.ffn2.b", np.zeros(s)),
                }
            )
        self.out_ln_g = p.add("enc.out.ln.g", np.ones(s))
        self.out_ln_b = p.add("enc.out.ln.b", np.zeros(s))

        # CTC heads: one per tap (shared by InterCTC and IB) plus a final one
        self.tap_heads = {
            k: (p.add(f"head.tap{k}.W", _init(rng, s, v)), p.add(f"head.tap{k}.b", np.zeros(v)))
            for k in enc.taps
        }
        self.final_head = (p.add("head.final.W", _init(rng, s, v)), p.add("head.final.b", np.zeros(v)))

        self.pred_emb = p.add("pred.emb", _init(rng, v, cfg.pred_width))
        self.pred_cell = {
            "W": p.add("pred.W", _init(rng, cfg.pred_width, 4 * cfg.pred_width)),
            "U": p.add("pred.U", _init(rng, cfg.pred_width, 4 * cfg.pred_width)),
            "b": p.add("pred.b", np.zeros(4 * cfg.pred_width)),
        }

        self.join_enc_w = p.add("join.enc.W", _init(rng, s, cfg.joint_width))
        self.join_pred_w = p.add("join.pred.W", _init(rng, cfg.pred_width, cfg.joint_width))
        self.join_b = p.add("join.b", np.zeros(cfg.joint_width))
        self.join_out_w = p.add("join.out.W", _init(rng, cfg.joint_width, v))
        self.join_out_b = p.add("join.out.b", np.zeros(v))

        if cfg.use_biasing:
            self.context = ContextEncoderParams(p, cfg.context_config(), rng, "ctx")
            cbc = cfg.cb_config()
            self.cb_taps = {k: CBParams(p, cbc, rng, f"cb.tap{k}") for k in enc.taps}
            self.cb_enc_join = CBParams(p, cbc, rng, "cb.encjoin")
            # the predictor stream keeps its own width at its biasing site
            self.cb_pred_join = CBParams(p, cfg.cb_config(cfg.pred_width), rng, "cb.predjoin")
        else:
            self.context = None
            self.cb_taps = {}
            self.cb_enc_join = None
            self.cb_pred_join = None

    # ---------------- context ----------------

    def encode_context(self, bias_list: BiasList) -> Tensor | None:
        if not self.cfg.use_biasing:
            return None
        return encode_bias_list(bias_list, self.context)

    # ---------------- encoder ----------------

    def _self_attention(self, x: Tensor, blk) -> Tensor:
        enc = self.cfg.encoder
        d_head = enc.width // enc.n_heads
        q = ad.matmul(x, blk["wq"])
        k = ad.matmul(x, blk["wk"])
        v = ad.matmul(x, blk["wv"])
        heads = []
        for i in range(enc.n_heads):
            sl = slice(i * d_head, (i + 1) * d_head)
            logits = ad.scale(ad.matmul(q[:, sl], ad.transpose(k[:, sl])), 1.0 / np.sqrt(d_head))
            heads.append(ad.matmul(ad.softmax(logits, axis=-1), v[:, sl]))
        merged = heads[0] if len(heads) == 1 else ad.concat(heads, axis=1)
        return ad.matmul(merged, blk["wo"])

    def _block(self, x: Tensor, blk) -> Tensor:
        a = ad.add(ad.mul(ad.layer_norm(x), blk["ln1_g"]), blk["ln1_b"])
        x = ad.add(x, self._self_attention(a, blk))
        f = ad.add(ad.mul(ad.layer_norm(x), blk["ln2_g"]), blk["ln2_b"])
        hidden = ad.tanh(ad.add(ad.matmul(f, blk["ffn1_w"]), blk["ffn1_b"]))
        return ad.add(x, ad.add(ad.matmul(hidden, blk["ffn2_w"]), blk["ffn2_b"]))

    def encode(self, features: np.ndarray, ctx: Tensor | None) -> EncoderOutput:
        enc = self.cfg.encoder
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != enc.feature_dim:
            raise ShapeError(f"features must be (T, {enc.feature_dim}), got {feats.shape}")
        if self.cfg.use_biasing and ctx is None:
            raise ContractError("biasing model needs context embeddings")
        feats = feats[:: enc.subsample]
        x = ad.add(ad.matmul(Tensor(feats), self.in_w), self.in_b)
        x = ad.add(x, Tensor(sinusoidal_positions(feats.shape[0], enc.width)))

        taps: dict[int, TapOutput] = {}
        for l, blk in enumerate(self.blocks, start=1):
            x = self._block(x, blk)
            if l in self.tap_heads:
                if self.cfg.use_biasing:
                    att = cb_attend(x, ctx, self.cb_taps[l])
                    taps[l] = TapOutput(raw=x, fused=att.fused, attention=att)
                    if enc.propagate_fused:
                        x = att.fused
                else:
                    taps[l] = TapOutput(raw=x, fused=None, attention=None)
        final = ad.add(ad.mul(ad.layer_norm(x), self.out_ln_g), self.out_ln_b)
        if self.cfg.use_biasing:
            att = cb_attend(final, ctx, self.cb_enc_join)
            return EncoderOutput(final=final, taps=taps, fused_final=att.fused, final_attention=att)
        return EncoderOutput(final=final, taps=taps, fused_final=None, final_attention=None)

    # ---------------- CTC heads ----------------

    def ctc_head(self, states: Tensor, tap: int | None = None) -> Tensor:
        """Log-posteriors (T', V) from tap k's head or the final head."""
        w, b = self.final_head if tap is None else self.tap_heads[tap]
        return ad.log_softmax(ad.add(ad.matmul(states, w), b), axis=-1)

    # ---------------- predictor ----------------

    def predictor_init(self) -> PredictorState:
        s = self.cfg.pred_width
        return PredictorState(
            h=Tensor(np.zeros((1, s))), c=Tensor(np.zeros((1, s))), last_token=SOS_ID
        )

    def predictor_step(self, y_prev: int, state: PredictorState) -> tuple[Tensor, PredictorState]:
        if y_prev == BLANK_ID:
            raise ContractError("predictor consumes non-blank labels only")
        x = ad.embedding(self.pred_emb, [y_prev])
        h, c = lstm_step(x, state.h, state.c, self.pred_cell)
        return h, PredictorState(h=h, c=c, last_token=y_prev)

    def predictor_outputs(self, targets) -> Tensor:
        """(U+1, S) prediction states for rows u=0..U of the lattice."""
        state = self.predictor_init()
        outs = []
        h, state = self.predictor_step(SOS_ID, state)
        outs.append(h)
        for y in targets:
            h, state = self.predictor_step(int(y), state)
            outs.append(h)
        return outs[0] if len(outs) == 1 else ad.concat(outs, axis=0)

    def fuse_predictor(self, h_pred: Tensor, ctx: Tensor | None) -> Tensor:
        if not self.cfg.use_biasing:
            return h_pred
        return cb_attend(h_pred, ctx, self.cb_pred_join).fused

    # ---------------- joiner ----------------

    def joiner(
        self,
        h_enc: Tensor,
        h_pred: Tensor,
        contextual: bool = False,
        ctx: Tensor | None = None,
    ) -> Tensor:
        """Logits over the vocabulary for single (1, S) state rows.

        With ``contextual`` the inputs are first passed through their
        joiner-side biasing modules (callers may instead pre-fuse and call
        with contextual=False; the two are equivalent).
        """
        if contextual:
            h_enc = cb_attend(h_enc, ctx, self.cb_enc_join).fused
            h_pred = self.fuse_predictor(h_pred, ctx)
        z = ad.tanh(
            ad.add(
                ad.add(ad.matmul(h_enc, self.join_enc_w), ad.matmul(h_pred, self.join_pred_w)),
                self.join_b,
            )
        )
        return ad.add(ad.matmul(z, self.join_out_w), self.join_out_b)

    def joiner_lattice(self, enc: Tensor, preds: Tensor) -> Tensor:
        """(T', U+1, V) joiner logits from (T', S) and (U+1, S) states."""
        n_frames, n_rows = enc.shape[0], preds.shape[0]
        e = ad.reshape(ad.matmul(enc, self.join_enc_w), (n_frames, 1, -1))
        g = ad.reshape(ad.matmul(preds, self.join_pred_w), (1, n_rows, -1))
        z = ad.tanh(ad.add(ad.add(e, g), self.join_b))
        flat = ad.reshape(z, (n_frames * n_rows, -1))
        out = ad.add(ad.matmul(flat, self.join_out_w), self.join_out_b)
        return ad.reshape(out, (n_frames, n_rows, -1))

    # ---------------- full forward ----------------

    def forward_utterance(self, features: np.ndarray, targets, ctx: Tensor | None) -> ForwardOutput:
        enc_out = self.encode(features, ctx)
        tap_logp = {k: self.ctc_head(tap.raw, k) for k, tap in enc_out.taps.items()}
        fused_tap_logp = None
        if self.cfg.use_biasing:
            fused_tap_logp = {
                k: self.ctc_head(tap.fused, k) for k, tap in enc_out.taps.items()
            }
        final_logp = self.ctc_head(enc_out.final)
        preds = self.predictor_outputs(targets)
        enc_j = enc_out.fused_final if self.cfg.use_biasing else enc_out.final
        pred_j = self.fuse_predictor(preds, ctx)
        lattice = self.joiner_lattice(enc_j, pred_j)
        return ForwardOutput(
            tap_logp=tap_logp,
            fused_tap_logp=fused_tap_logp,
            final_logp=final_logp,
            lattice_logits=lattice,
            encoder=enc_out,
        )

    def forward(self, batch, bias_list: BiasList) -> list[ForwardOutput]:
        """Run every utterance of a batch under one shared bias list."""
        ctx = self.encode_context(bias_list)
        return [
            self.forward_utterance(utt.features, utt.transcript, ctx) for utt in batch
        ]
